"""Dynamic-scene inverse rendering with 2D Gaussian splats at desk scale."""

__version__ = "0.1.0"
