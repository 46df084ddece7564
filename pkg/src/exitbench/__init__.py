"""Multi-exit image classifiers under distribution shift, at desk scale."""

__version__ = "0.1.0"
