"""Multi-scale 1D-CNN cell search with a surrogate-guided Bayesian loop."""

__version__ = "0.1.0"
