"""Tractography-based voxel parcellation with deep NMF clustering."""

__version__ = "0.1.0"
