"""Confidence-aware bipartite graph network for scene graph generation."""

__version__ = "0.1.0"
