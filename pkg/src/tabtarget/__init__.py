"""Target-aware tabular transformer: verbalization, encoding, training and evaluation."""

__version__ = "0.1.0"
