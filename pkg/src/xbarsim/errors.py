"""Exception hierarchy shared across the package.

Everything raised on a bad input or an impossible request derives from
XbarError so callers (and the CLI) can distinguish domain failures from
programming bugs.
"""


class XbarError(Exception):
    """Base class for all domain errors."""


class DimensionError(XbarError):
    """Operand shape does not match the matrix or vector it is applied to."""


class RangeError(XbarError):
    """A value falls outside the representable range of its encoding."""


class ValidationError(XbarError):
    """A configuration or program fails its structural checks."""


class ParseError(XbarError):
    """Assembly or config text could not be parsed.

    Carries the 1-based line and column of the offending token.
    """

    def __init__(self, message, line=None, col=None):
        self.line = line
        self.col = col
        if line is not None:
            message = "line %d, col %d: %s" % (line, col if col else 1, message)
        super().__init__(message)


class CapacityError(XbarError):
    """The model does not fit the machine (MCUs, memory, register file)."""


class SpillOverflowError(CapacityError):
    """Register spills exhausted the shared-memory spill area."""


class UnsupportedLayerError(XbarError):
    """Model contains a layer type the compiler does not lower."""


class UnsupportedConvError(UnsupportedLayerError):
    """Convolution parameters outside the supported set (stride 1, zero pad)."""


class MissingOperandError(XbarError):
    """An MCU operation was issued without its implied operands staged."""


class DeadlockError(XbarError):
    """All cores are blocked on receives that can never be satisfied."""


class MemoryFault(XbarError):
    """Out-of-bounds or unallocated shared-memory access."""


class DivergenceError(XbarError):
    """Training produced a non-finite loss."""


class ShapeError(XbarError):
    """Dataset or model shapes are inconsistent with each other."""
