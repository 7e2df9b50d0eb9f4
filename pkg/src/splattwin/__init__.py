"""Gaussian splatting digital twins for 3D damage visualization."""
