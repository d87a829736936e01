"""Low-loss connection paths between trained network weight vectors."""

__version__ = "0.1.0"
