"""Task-driven image restoration with partial diffusion, at desk scale."""

__version__ = "0.1.0"
