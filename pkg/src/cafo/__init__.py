"""Feature-centric explanations for multivariate time-series classifiers."""

__version__ = "0.1.0"
