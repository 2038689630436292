"""GCTAF: global cross-time attention fusion for multivariate time series
classification, on a small numpy autograd engine."""
__version__ = "0.1.0"
