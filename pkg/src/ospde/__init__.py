"""Penalised obstacle problems for degenerate quasilinear SPDEs on box grids."""

__version__ = "0.1.0"
