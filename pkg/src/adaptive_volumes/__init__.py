"""Adaptive neural volumes on dual octree graphs."""

__version__ = "0.1.0"
