"""Exception types shared across the package."""


class HyperaceError(Exception):
    """Base class for all library errors."""


class ShapeError(HyperaceError, ValueError):
    """An operand's shape violates an operation's contract."""


class ConfigError(HyperaceError, ValueError):
    """A model configuration is internally inconsistent."""


class WeightFormatError(HyperaceError, ValueError):
    """A weight file is malformed, truncated, or does not match the network."""


class SelectorError(HyperaceError, KeyError):
    """A layer selector matched nothing; carries the available choices."""

    def __init__(self, selector, available):
        self.selector = selector
        self.available = list(available)
        super().__init__(
            f"no layer named {selector!r}; available: {', '.join(self.available) or '(none)'}"
        )


class TrainingDiverged(HyperaceError, RuntimeError):
    """The training loss became non-finite; carries the offending step index."""

    def __init__(self, step, message="loss became non-finite"):
        self.step = step
        super().__init__(f"{message} at step {step}")
