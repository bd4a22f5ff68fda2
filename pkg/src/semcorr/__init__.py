"""Semantic correspondence embeddings for 3D object categories."""

__version__ = "0.1.0"
