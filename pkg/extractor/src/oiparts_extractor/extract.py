"""Batch feature extraction into the engine's tensor file format.

Per image, writes `<stem>_dino.npy` and `<stem>_sd.npy` as little-endian
float32 NPY v1.0 at the target grid resolution, plus one `manifest.json`
recording model identities, preprocessing, and any channel reduction.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import __version__
from .backends import default_backend

DINO_CHANNELS = 1024
SD_CHANNELS = 768
PROMPT_TEMPLATE = "a photo of {category}"


@dataclass(frozen=True)
class ExtractSpec:
    images: tuple[str, ...]
    category: str
    out_dir: str
    timestep: int = 100
    resolution: int = 60

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(str(p) for p in self.images))
        if not self.images:
            raise ValueError("at least one image path is required")
        if not self.category.strip():
            raise ValueError("category must be non-empty (it fills the text prompt)")
        if not 0 <= self.timestep < 1000:
            raise ValueError(f"timestep must be in [0, 1000), got {self.timestep}")
        if self.resolution < 1:
            raise ValueError(f"resolution must be positive, got {self.resolution}")

    @property
    def prompt(self) -> str:
        return PROMPT_TEMPLATE.format(category=self.category)


@dataclass(frozen=True)
class ExtractResult:
    manifest_path: Path
    outputs: tuple[dict, ...]
    skipped: tuple[str, ...]


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def resize_and_center_crop(image: np.ndarray, size: int) -> np.ndarray:
    """Aspect-preserving resize so the short side hits `size`, then center crop."""
    h, w = image.shape[:2]
    scale = size / min(h, w)
    new_w, new_h = max(size, round(w * scale)), max(size, round(h * scale))
    resized = np.asarray(
        Image.fromarray(image).resize((new_w, new_h), Image.Resampling.BICUBIC)
    )
    top = (new_h - size) // 2
    left = (new_w - size) // 2
    return resized[top : top + size, left : left + size]


def resize_grid(grid: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of an (h, w, c) feature grid (half-pixel centers)."""
    grid = np.asarray(grid, dtype=np.float64)

    def axis_weights(n_in: int, n_out: int) -> np.ndarray:
        w = np.zeros((n_out, n_in))
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.floor(src).astype(np.int64)
        t = src - lo
        rows = np.arange(n_out)
        np.add.at(w, (rows, np.clip(lo, 0, n_in - 1)), 1.0 - t)
        np.add.at(w, (rows, np.clip(lo + 1, 0, n_in - 1)), t)
        return w

    rows = axis_weights(grid.shape[0], size)
    cols = axis_weights(grid.shape[1], size)
    return np.einsum("ih,hwc,jw->ijc", rows, grid, cols, optimize=True)


def fit_channel_projection(samples: np.ndarray, target: int) -> tuple[np.ndarray, np.ndarray]:
    """PCA basis (mean, components) reducing `samples` (N, C) to `target` dims.

    Component signs are fixed so the largest-magnitude coefficient of each is
    positive, keeping the projection deterministic across BLAS builds.
    """
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / max(len(samples) - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:target]
    components = eigvecs[:, order]
    flips = np.sign(components[np.abs(components).argmax(axis=0), np.arange(target)])
    flips[flips == 0] = 1.0
    return mean, components * flips


def _save_float32(path: Path, grid: np.ndarray) -> None:
    np.save(path, np.ascontiguousarray(grid, dtype=np.float32))


def extract(spec: ExtractSpec, backend=None) -> ExtractResult:
    """Run the backend over every readable image and write feature files.

    Unreadable or non-image files are skipped with a warning so a stray
    sidecar in a dataset directory cannot kill a long batch.  When the raw
    SD activations are wider than the 768-channel target, a PCA fitted
    jointly over the whole batch reduces them; reference and query images
    must therefore be extracted in the same invocation to share a basis.
    """
    if backend is None:
        backend = default_backend()
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    loaded: list[tuple[str, np.ndarray]] = []
    skipped: list[str] = []
    for path in spec.images:
        try:
            loaded.append((path, load_rgb(path)))
        except (UnidentifiedImageError, OSError) as e:
            warnings.warn(f"skipping {path}: {e}", UserWarning, stacklevel=2)
            skipped.append(path)
    if not loaded:
        raise ValueError("no readable images in the batch")

    dino_grids = []
    sd_grids = []
    for _, image in loaded:
        dino_in = resize_and_center_crop(image, backend.dino_input_size)
        sd_in = resize_and_center_crop(image, backend.sd_input_size)
        dino_grids.append(resize_grid(backend.dino_features(dino_in), spec.resolution))
        sd_grids.append(
            resize_grid(backend.sd_features(sd_in, spec.prompt, spec.timestep), spec.resolution)
        )

    reduction = None
    raw_sd_channels = sd_grids[0].shape[2]
    if raw_sd_channels < SD_CHANNELS:
        raise ValueError(
            f"backend produced {raw_sd_channels} sd channels, "
            f"cannot widen to {SD_CHANNELS}"
        )
    if raw_sd_channels > SD_CHANNELS:
        samples = np.concatenate([g.reshape(-1, raw_sd_channels) for g in sd_grids])
        mean, components = fit_channel_projection(samples, SD_CHANNELS)
        sd_grids = [
            ((g.reshape(-1, raw_sd_channels) - mean) @ components).reshape(
                spec.resolution, spec.resolution, SD_CHANNELS
            )
            for g in sd_grids
        ]
        reduction = {
            "method": "pca",
            "fit": "joint over batch",
            "from_channels": int(raw_sd_channels),
            "to_channels": SD_CHANNELS,
        }

    outputs = []
    for (path, _), dino_grid, sd_grid in zip(loaded, dino_grids, sd_grids):
        stem = Path(path).stem
        dino_name = f"{stem}_dino.npy"
        sd_name = f"{stem}_sd.npy"
        _save_float32(out_dir / dino_name, dino_grid)
        _save_float32(out_dir / sd_name, sd_grid)
        outputs.append({"source": path, "dino": dino_name, "sd": sd_name})

    manifest = {
        "tool": "oiparts-extractor",
        "version": __version__,
        "category": spec.category,
        "prompt": spec.prompt,
        "timestep": spec.timestep,
        "resolution": spec.resolution,
        "models": backend.describe(),
        "preprocessing": {
            "policy": "aspect-preserving resize + center crop",
            "dino_input": backend.dino_input_size,
            "sd_input": backend.sd_input_size,
        },
        "channel_reduction": reduction,
        "images": outputs,
        "skipped": skipped,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return ExtractResult(manifest_path, tuple(outputs), tuple(skipped))
