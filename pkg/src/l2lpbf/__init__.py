"""Layer-to-layer melt-pool depth control for a 2D LPBF thermal plant."""

__version__ = "0.1.0"
