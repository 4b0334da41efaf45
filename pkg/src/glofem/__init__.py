"""2D quasi-static viscoplastic FEM with adaptive time grids and
non-invasive global/local coupling."""

__version__ = "0.1.0"

from .material import MaterialParams, MaterialState, StressPoint  # noqa: F401
