"""Desk-scale spectral distillation (Stage 1) and text alignment (Stage 2) for satellite imagery."""

from .config import RunConfig, load_config
from .errors import SatdError

__version__ = "0.1.0"
__all__ = ["RunConfig", "SatdError", "load_config", "__version__"]
