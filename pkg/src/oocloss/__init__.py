"""Out-of-cluster loss estimation under dependency leakage."""

__version__ = "0.1.0"
