"""Artistic radiance fields on dense voxel grids."""

__version__ = "0.1.0"
