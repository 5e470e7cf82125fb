"""Feature dumper writing DINOv2 / Stable Diffusion maps in the engine's tensor format."""

__version__ = "0.1.0"

from .backends import TorchBackend, WeightsUnavailable, default_backend
from .extract import (
    DINO_CHANNELS,
    SD_CHANNELS,
    ExtractResult,
    ExtractSpec,
    extract,
    fit_channel_projection,
    resize_and_center_crop,
    resize_grid,
)

__all__ = [
    "__version__",
    "DINO_CHANNELS",
    "SD_CHANNELS",
    "ExtractResult",
    "ExtractSpec",
    "TorchBackend",
    "WeightsUnavailable",
    "default_backend",
    "extract",
    "fit_channel_projection",
    "resize_and_center_crop",
    "resize_grid",
]
