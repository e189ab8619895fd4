"""Lossless spherical frustum representation of LiDAR point clouds."""

__version__ = "0.1.0"
