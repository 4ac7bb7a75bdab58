"""Dual-stream active vision and voxelwise encoding."""
__version__ = "0.1.0"
