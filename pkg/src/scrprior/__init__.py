"""Scene-coordinate-regression mapping with reconstruction priors on synthetic indoor scenes."""

__version__ = "0.1.0"
