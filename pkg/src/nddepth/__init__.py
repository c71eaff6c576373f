"""Depth from normal and plane distance, with plane-aware losses and ConvGRU refinement."""

__version__ = "0.1.0"
