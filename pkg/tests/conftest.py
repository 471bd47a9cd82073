import sys
from pathlib import Path

# allow `import reference` (test-local oracle module) regardless of cwd
sys.path.insert(0, str(Path(__file__).parent))
