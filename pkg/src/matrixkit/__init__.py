"""Multi-view, multi-modal masked diffusion for photogrammetry at desk scale."""

__version__ = "0.1.0"
