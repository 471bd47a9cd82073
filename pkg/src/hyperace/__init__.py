"""Hypergraph-enhanced detection blocks on a self-contained autodiff core.

The package provides four layers of machinery:

* ``tensor``: dense NCHW tensors with reverse-mode differentiation and an
  instrumented FLOP tally;
* ``modules`` / ``hypergraph``: depthwise-separable conv blocks and the
  adaptive-hypergraph correlation blocks built on them;
* ``network``: full detector assembly (backbone, correlation enhancement,
  gated distribution tunnels, PAN neck, anchor-free heads);
* ``profiler`` / ``postprocess`` / ``train``: budget accounting, detection
  decoding, and a desk-scale synthetic training loop.
"""

from .errors import (
    ConfigError,
    HyperaceError,
    SelectorError,
    ShapeError,
    TrainingDiverged,
    WeightFormatError,
)
from .tensor import FlopTally, Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FlopTally",
    "HyperaceError",
    "SelectorError",
    "ShapeError",
    "Tape",
    "Tensor",
    "TrainingDiverged",
    "WeightFormatError",
    "__version__",
]
