"""Recursive multimodal transformer with recursive connectors and a monotonic recursion loss."""

__version__ = "0.1.0"
