"""Vertiport take-off scheduling and evolutionary cost/prompt search."""
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
