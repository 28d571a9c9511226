"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, NumericError -> 3,
FormatError and OSError -> 4.
"""


class ShapeError(ValueError):
    """Operands with incompatible shapes reached an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in self.shapes)}")


class NumericError(ArithmeticError):
    """A NaN or Inf appeared where the contract forbids it."""


class ConfigError(ValueError):
    """Bad configuration or usage."""


class FormatError(ValueError):
    """A file did not conform to its declared format."""
