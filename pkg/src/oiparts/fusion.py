"""Per-pixel normalization and channel concatenation of the two feature sources."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor_io import FeatureMap


@dataclass(frozen=True)
class SourceSpan:
    """Half-open channel range [offset, offset + length) owned by one source."""

    source: str
    offset: int
    length: int


@dataclass(frozen=True)
class FusedFeature:
    """Concatenated feature map plus the layout mapping channels to sources.

    Every pixel's sub-vector within a span has unit L2 norm, except pixels
    whose source vector was all-zero, which stay all-zero.
    """

    map: FeatureMap
    channel_layout: tuple[SourceSpan, ...]

    def __post_init__(self):
        layout = tuple(self.channel_layout)
        if self.map.source != "fused":
            raise ValidationError("fused feature must be tagged source='fused'")
        pos = 0
        for span in layout:
            if span.offset != pos or span.length < 1:
                raise ValidationError("channel layout spans must tile [0, D) in order")
            pos += span.length
        if pos != self.map.channels:
            raise ValidationError(
                f"layout covers {pos} channels, map has {self.map.channels}"
            )
        for span in layout:
            sub = self.map.data[:, :, span.offset : span.offset + span.length]
            norms = np.linalg.norm(sub, axis=-1)
            off_unit = np.abs(norms - 1.0) > 1e-5
            if np.any(off_unit & (norms != 0.0)):
                raise ValidationError(
                    f"span {span.source!r} has pixels that are neither unit-norm nor zero"
                )
        object.__setattr__(self, "channel_layout", layout)

    def span(self, source: str) -> SourceSpan:
        for s in self.channel_layout:
            if s.source == source:
                return s
        raise ValidationError(f"no span for source {source!r}")

    def span_data(self, source: str) -> np.ndarray:
        s = self.span(source)
        return self.map.data[:, :, s.offset : s.offset + s.length]


def l2_normalize(f: FeatureMap) -> FeatureMap:
    """Scale each pixel's channel vector to unit L2 norm; zero vectors pass through."""
    norms = np.linalg.norm(f.data, axis=-1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return FeatureMap((f.data / safe).astype(np.float32), f.source)


def fuse(sd: FeatureMap, dino: FeatureMap) -> FusedFeature:
    """Normalize both sources per pixel and concatenate channels, sd span first.

    The channel order is fixed so selection records indexed against one fused
    map stay valid for any other built from the same source dimensions.
    """
    if sd.source == dino.source:
        raise ValidationError(f"both inputs are tagged source {sd.source!r}")
    if sd.source != "sd" or dino.source != "dino":
        raise ValidationError(
            f"expected sources ('sd', 'dino'), got ({sd.source!r}, {dino.source!r})"
        )
    if (sd.height, sd.width) != (dino.height, dino.width):
        raise ShapeError(
            f"spatial mismatch: sd {sd.height}x{sd.width} vs dino {dino.height}x{dino.width}"
        )
    sd_n = l2_normalize(sd)
    dino_n = l2_normalize(dino)
    data = np.concatenate([sd_n.data, dino_n.data], axis=-1)
    layout = (
        SourceSpan("sd", 0, sd.channels),
        SourceSpan("dino", sd.channels, dino.channels),
    )
    return FusedFeature(FeatureMap(data, "fused"), layout)
