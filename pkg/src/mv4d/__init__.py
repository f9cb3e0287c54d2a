"""Multi-view video grid sampling and desk-scale 4D Gaussian reconstruction."""

__version__ = "0.1.0"
