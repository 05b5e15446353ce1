"""Discretised convolution-type energies, their homogenized limits and gradient flows."""

__version__ = "0.1.0"
