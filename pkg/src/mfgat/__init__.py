"""Multi-view graph attention classifier with its own autodiff, data loading and training."""

__version__ = "0.1.0"
