"""Crossbar accelerator simulator: sliced arithmetic, compiler, cycle model."""

from xbarsim.errors import XbarError
from xbarsim.fixedpoint import Q8_8, Q16_16, FixedFormat
from xbarsim.slicing import SliceConfig, SlicedMatrix

__version__ = "0.1.0"

__all__ = [
    "FixedFormat",
    "Q8_8",
    "Q16_16",
    "SliceConfig",
    "SlicedMatrix",
    "XbarError",
    "__version__",
]
