"""Half-space Stokes Green-function calculus: kernels, pressures, mild solutions."""
from .fields import Field, NormReport, ParityTable, SlabGrid

__all__ = ["Field", "NormReport", "ParityTable", "SlabGrid"]
__version__ = "0.1.0"
