"""Optimal-transport cross-attention: Sinkhorn, exact transport, MESH and slot attention."""

__version__ = "0.1.0"
