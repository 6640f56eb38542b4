"""Information-decomposition pretraining mechanism at desk scale."""

__version__ = "0.1.0"
