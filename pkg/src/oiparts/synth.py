"""Seeded synthetic fixtures with known ground truth.

Each part owns a disjoint block of informative channels and a unit prototype
vector on that block; pixel features are the prototype of the owning part
plus Gaussian noise.  Distractor channels carry high-variance noise with no
class alignment in either image, so a correct selection procedure must never
pick them.  The query layout is a fixed cyclic shift of the reference layout,
which makes the query ground truth exact by construction.

All randomness comes from the counter-based Philox 4x64-10 generator with one
stream per purpose (key = seed * 2^16 + stream index), so a fixture is a pure
function of its spec and reproducible in any implementation of Philox.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .palette import colorize_labels
from .tensor_io import FeatureMap, ImageRGB, PartMaskSet

GENERATOR_NAME = "philox4x64-10"

_STREAM_LAYOUT = 0
_STREAM_SIGNS = 1
_STREAM_REF_NOISE = 2
_STREAM_QUERY_NOISE = 3
_STREAM_REF_DISTRACTOR = 4
_STREAM_QUERY_DISTRACTOR = 5

LAYOUTS = ("stripes", "rectangles", "voronoi")


@dataclass(frozen=True)
class SynthSpec:
    seed: int
    height: int
    width: int
    channels_per_source: dict[str, int] = field(
        default_factory=lambda: {"sd": 16, "dino": 16}
    )
    num_parts: int = 4
    layout: str = "stripes"
    prototype_separation: float = math.pi / 2
    noise_sigma: float = 0.0
    distractor_channels: int = 0

    def __post_init__(self):
        if self.num_parts < 2:
            raise ValidationError("fixtures need at least 2 parts")
        if self.layout not in LAYOUTS:
            raise ValidationError(f"unknown layout {self.layout!r}")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if self.height < 1 or self.width < 1:
            raise ValidationError("fixture dims must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise ValidationError("seed must fit in 64 bits")
        for source, d in self.channels_per_source.items():
            if self.distractor_channels >= d:
                raise ValidationError(
                    f"{self.distractor_channels} distractor channels leave no "
                    f"informative channels in source {source!r} (D={d})"
                )
        # disjoint-coordinate prototypes are pairwise orthogonal, so the
        # achievable minimum angle tops out at 90 degrees
        if self.prototype_separation > math.pi / 2 + 1e-12:
            raise ValidationError(
                f"minimum pairwise angle {self.prototype_separation:.4f} rad is "
                "not achievable with disjoint-coordinate prototypes (max pi/2)"
            )
        for source, d in self.channels_per_source.items():
            informative = d - self.distractor_channels
            if self.num_parts > informative:
                raise ValidationError(
                    f"{self.num_parts} parts need at least one informative "
                    f"channel each; source {source!r} has {informative}"
                )

@dataclass(frozen=True)
class Fixture:
    spec: SynthSpec
    part_names: tuple[str, ...]
    ref_features: dict[str, FeatureMap]
    query_features: dict[str, FeatureMap]
    ref_masks: PartMaskSet
    query_masks: PartMaskSet
    ref_labels: np.ndarray
    query_labels: np.ndarray
    ref_guide: ImageRGB
    query_guide: ImageRGB

def _stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed * 2 ** 16 + stream))

def _layout_labels(spec: SynthSpec) -> np.ndarray:
    h, w, parts = spec.height, spec.width, spec.num_parts
    if spec.layout == "stripes":
        rows = np.arange(h)
        labels = np.minimum(rows * parts // h, parts - 1)
        return np.broadcast_to(labels[:, None], (h, w)).copy()
    if spec.layout == "rectangles":
        per_side = int(math.ceil(math.sqrt(parts)))
        ys = np.minimum(np.arange(h) * per_side // h, per_side - 1)
        xs = np.minimum(np.arange(w) * per_side // w, per_side - 1)
        cells = ys[:, None] * per_side + xs[None, :]
        return (cells % parts).astype(np.int64)
    rng = _stream(spec.seed, _STREAM_LAYOUT)
    seeds_y = rng.uniform(0, h, size=parts)
    seeds_x = rng.uniform(0, w, size=parts)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dist = (ys[..., None] - seeds_y) ** 2 + (xs[..., None] - seeds_x) ** 2
    return dist.argmin(axis=-1)

def _ensure_all_parts(labels: np.ndarray, parts: int) -> np.ndarray:
    """Force every part to own at least one pixel (voronoi can starve one)."""
    present = np.bincount(labels.reshape(-1), minlength=parts)
    labels = labels.copy()
    flat = labels.reshape(-1)
    spare = 0
    for c in range(parts):
        if present[c] == 0:
            while present[flat[spare]] <= 1:
                spare += 1
            present[flat[spare]] -= 1
            flat[spare] = c
            present[c] = 1
    return labels

def _prototypes(spec: SynthSpec, source: str, rng: np.random.Generator) -> np.ndarray:
    d = spec.channels_per_source[source]
    informative = d - spec.distractor_channels
    blocks = np.array_split(np.arange(informative), spec.num_parts)
    protos = np.zeros((spec.num_parts, d))
    for c, block in enumerate(blocks):
        signs = rng.integers(0, 2, size=block.size) * 2 - 1
        protos[c, block] = signs / math.sqrt(block.size)
    return protos

def generate(spec: SynthSpec) -> Fixture:
    """Produce matched reference/query features, masks, and guide images."""
    labels_r = _ensure_all_parts(_layout_labels(spec), spec.num_parts)
    shift = (spec.height // 3, spec.width // 3)
    labels_q = np.roll(labels_r, shift, axis=(0, 1))
    part_names = tuple(["BG"] + [f"part{c}" for c in range(1, spec.num_parts)])

    signs_rng = _stream(spec.seed, _STREAM_SIGNS)
    protos = {
        source: _prototypes(spec, source, signs_rng)
        for source in sorted(spec.channels_per_source)
    }

    def build(labels, noise_stream, distractor_stream):
        noise_rng = _stream(spec.seed, noise_stream)
        distractor_rng = _stream(spec.seed, distractor_stream)
        # distractor spread sits one prototype-magnitude above the pixel noise
        # so its per-channel variance strictly dominates any class-conditional one
        distractor_sigma = math.sqrt(1.0 + spec.noise_sigma ** 2)
        maps = {}
        for source in sorted(spec.channels_per_source):
            d = spec.channels_per_source[source]
            informative = d - spec.distractor_channels
            data = protos[source][labels.reshape(-1)].reshape(
                spec.height, spec.width, d
            )
            if spec.noise_sigma > 0:
                data[:, :, :informative] += noise_rng.normal(
                    0.0, spec.noise_sigma, size=(spec.height, spec.width, informative)
                )
            if spec.distractor_channels:
                data[:, :, informative:] = distractor_rng.normal(
                    0.0, distractor_sigma,
                    size=(spec.height, spec.width, spec.distractor_channels),
                )
            maps[source] = FeatureMap(data.astype(np.float32), source)
        return maps

    ref_features = build(labels_r, _STREAM_REF_NOISE, _STREAM_REF_DISTRACTOR)
    query_features = build(labels_q, _STREAM_QUERY_NOISE, _STREAM_QUERY_DISTRACTOR)

    def one_hot(labels):
        planes = np.zeros((spec.num_parts, spec.height, spec.width), dtype=np.float32)
        for c in range(spec.num_parts):
            planes[c] = labels == c
        return PartMaskSet(planes, part_names)

    return Fixture(
        spec=spec,
        part_names=part_names,
        ref_features=ref_features,
        query_features=query_features,
        ref_masks=one_hot(labels_r),
        query_masks=one_hot(labels_q),
        ref_labels=labels_r.astype(np.uint8),
        query_labels=labels_q.astype(np.uint8),
        ref_guide=ImageRGB(colorize_labels(labels_r)),
        query_guide=ImageRGB(colorize_labels(labels_q)),
    )
