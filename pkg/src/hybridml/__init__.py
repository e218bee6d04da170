"""Simulator and cost engine for federated and split training, including hybrids, over wireless topologies."""
from .errors import HybridMLError

__version__ = "0.1.0"

__all__ = ["HybridMLError", "__version__"]
