"""Per-part discriminative channel selection.

For each part and each feature source independently: score every channel by
how tightly it clusters the part's pixels against the rest, take the best K,
and pick K itself by re-clustering the labeled example and scoring the result
against its own mask (a self-clustering IoU sweep).  The chosen channels are
frozen into a SelectionRecord that is computed once per labeled example and
reused for every query.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCenterWarning, ValidationError
from .fusion import FusedFeature
from .tensor_io import (
    METRICS,
    PartMaskSet,
    PartSelection,
    SelectionRecord,
    SourceSelection,
)

_HISTOGRAM_BINS = 32
_HISTOGRAM_EPS = 1e-9

# variance and cosine measure dispersion (smaller is tighter); kl and js
# measure separability between the in/out value distributions (larger is better)
LOWEST, HIGHEST = "lowest", "highest"
_METRIC_DIRECTION = {"variance": LOWEST, "cosine": LOWEST, "kl": HIGHEST, "js": HIGHEST}


@dataclass(frozen=True)
class ClassPixelSet:
    """Feature vectors of one part's pixels versus everything else."""

    part_index: int
    in_class: np.ndarray
    out_class: np.ndarray
    part_name: str = ""

    def __post_init__(self):
        in_arr = np.asarray(self.in_class, dtype=np.float64)
        out_arr = np.asarray(self.out_class, dtype=np.float64)
        if in_arr.ndim != 2 or out_arr.ndim != 2:
            raise ValidationError("pixel sets must be (N, D) matrices")
        if in_arr.shape[1] != out_arr.shape[1]:
            raise ValidationError(
                f"channel mismatch: in {in_arr.shape[1]} vs out {out_arr.shape[1]}"
            )
        object.__setattr__(self, "in_class", in_arr)
        object.__setattr__(self, "out_class", out_arr)

    @property
    def channels(self) -> int:
        return self.in_class.shape[1]

    def _label(self) -> str:
        return self.part_name or f"#{self.part_index}"


@dataclass(frozen=True)
class SweepResult:
    k_grid: tuple[int, ...]
    accuracies: tuple[float, ...]
    chosen_k: int
    channels: tuple[int, ...]


@dataclass(frozen=True)
class SelectionConfig:
    metric: str = "variance"
    k_grid: tuple[int, ...] | None = None  # None -> powers of two up to D, plus D

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValidationError(f"unknown selection metric {self.metric!r}")
        if self.k_grid is not None:
            object.__setattr__(self, "k_grid", tuple(int(k) for k in self.k_grid))


def default_k_grid(num_channels: int) -> tuple[int, ...]:
    """Powers of two up to the channel count, plus the full count."""
    ks = []
    k = 1
    while k <= num_channels:
        ks.append(k)
        k *= 2
    if ks[-1] != num_channels:
        ks.append(num_channels)
    return tuple(ks)


def metric_direction(metric: str) -> str:
    try:
        return _METRIC_DIRECTION[metric]
    except KeyError:
        raise ValidationError(f"unknown selection metric {metric!r}") from None


def _population_variance(values: np.ndarray) -> np.ndarray:
    # mean squared deviation with a 1/N factor, per channel
    return values.var(axis=0, ddof=0)


def _histogram_divergence(px: ClassPixelSet, kind: str) -> np.ndarray:
    scores = np.zeros(px.channels)
    for j in range(px.channels):
        a = px.in_class[:, j]
        b = px.out_class[:, j]
        lo = min(a.min(), b.min())
        hi = max(a.max(), b.max())
        if hi - lo < 1e-12:
            continue  # both distributions collapse into one bin
        edges = np.linspace(lo, hi, _HISTOGRAM_BINS + 1)
        p = np.histogram(a, bins=edges)[0].astype(np.float64) + _HISTOGRAM_EPS
        q = np.histogram(b, bins=edges)[0].astype(np.float64) + _HISTOGRAM_EPS
        p /= p.sum()
        q /= q.sum()
        if kind == "kl":
            scores[j] = float(np.sum(p * np.log(p / q)))
        else:
            m = 0.5 * (p + q)
            scores[j] = float(
                0.5 * np.sum(p * np.log(p / m)) + 0.5 * np.sum(q * np.log(q / m))
            )
    return scores


def _cosine_dispersion(px: ClassPixelSet) -> np.ndarray:
    # 1-D cosine against the channel mean degenerates to a sign test:
    # 1 - x*m/(|x||m|) is 0 when x agrees in sign with the mean, 2 when it
    # opposes it, and 1 when either is zero
    means = px.in_class.mean(axis=0)
    prod = px.in_class * means
    denom = np.abs(px.in_class) * np.abs(means)
    cos = np.divide(prod, denom, out=np.zeros_like(prod), where=denom != 0.0)
    return (1.0 - cos).mean(axis=0)


def channel_scores(px: ClassPixelSet, metric: str = "variance") -> np.ndarray:
    """Score every channel for part-discriminative power under the given metric.

    variance: per-channel population variance of the in-class set plus that of
    the out-class set; the K channels with the lowest scores are exactly the
    K-subset minimizing the summed intra-set dispersion, because the objective
    decomposes per channel.
    """
    if metric not in METRICS:
        raise ValidationError(f"unknown selection metric {metric!r}")
    if px.in_class.shape[0] == 0:
        raise ValidationError(f"part {px._label()} has no in-class pixels")
    if px.out_class.shape[0] == 0:
        raise ValidationError(f"part {px._label()} has no out-of-class pixels")
    if metric == "variance":
        return _population_variance(px.in_class) + _population_variance(px.out_class)
    if metric == "cosine":
        return _cosine_dispersion(px)
    return _histogram_divergence(px, metric)


def select_top_k(scores: np.ndarray, k: int, direction: str = LOWEST) -> tuple[int, ...]:
    """Indices of the k best channels, ascending; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValidationError("scores must be a flat per-channel vector")
    if direction not in (LOWEST, HIGHEST):
        raise ValidationError(f"direction must be 'lowest' or 'highest', got {direction!r}")
    if not 1 <= k <= scores.size:
        raise ValidationError(f"k={k} out of range for {scores.size} channels")
    keys = scores if direction == LOWEST else -scores
    order = np.argsort(keys, kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


def _cluster_in_mask(px: ClassPixelSet, channels: tuple[int, ...]) -> np.ndarray:
    """Assign all pixels to the in/out class centers restricted to `channels`.

    Returns a boolean vector over in-class pixels followed by out-class
    pixels: True where the pixel lands on the in-class center.  Centers are
    compared by cosine similarity (ties -> in-class); an all-zero center makes
    cosine meaningless, so that sweep point falls back to Euclidean distance.
    """
    idx = list(channels)
    sub_in = px.in_class[:, idx]
    sub_out = px.out_class[:, idx]
    center_in = sub_in.mean(axis=0)
    center_out = sub_out.mean(axis=0)
    both = np.vstack([sub_in, sub_out])
    if np.all(center_in == 0.0) or np.all(center_out == 0.0):
        warnings.warn(
            f"degenerate class center for part {px._label()} at k={len(idx)}; "
            "assigning by Euclidean distance",
            DegenerateCenterWarning,
            stacklevel=3,
        )
        d_in = np.linalg.norm(both - center_in, axis=1)
        d_out = np.linalg.norm(both - center_out, axis=1)
        return d_in <= d_out

    def _cos(vectors: np.ndarray, center: np.ndarray) -> np.ndarray:
        denom = np.linalg.norm(vectors, axis=1) * np.linalg.norm(center)
        dots = vectors @ center
        return np.divide(dots, denom, out=np.zeros_like(dots), where=denom != 0.0)

    return _cos(both, center_in) >= _cos(both, center_out)


def _clustering_iou(px: ClassPixelSet, channels: tuple[int, ...]) -> float:
    assigned_in = _cluster_in_mask(px, channels)
    n_in = px.in_class.shape[0]
    tp = int(assigned_in[:n_in].sum())
    fp = int(assigned_in[n_in:].sum())
    fn = n_in - tp
    return tp / (tp + fp + fn)


def sweep_k(
    px: ClassPixelSet,
    k_grid,
    metric: str = "variance",
) -> SweepResult:
    """Pick the channel-count K by self-clustering accuracy.

    For each candidate k: take the k best channels under `metric`, compute
    the two class centers on those channels, re-assign every pixel to the
    nearer center, and score the resulting binary mask against the reference
    partition by IoU.  The smallest k attaining the highest IoU wins.
    """
    grid = tuple(int(k) for k in k_grid)
    if not grid:
        raise ValidationError("k grid must be non-empty")
    for k in grid:
        if not 1 <= k <= px.channels:
            raise ValidationError(f"k={k} out of range for {px.channels} channels")
    scores = channel_scores(px, metric)
    direction = metric_direction(metric)
    accuracies = []
    chosen = {}
    for k in grid:
        channels = select_top_k(scores, k, direction)
        accuracies.append(_clustering_iou(px, channels))
        chosen[k] = channels
    best = max(accuracies)
    best_k = min(k for k, acc in zip(grid, accuracies) if acc == best)
    return SweepResult(
        k_grid=grid,
        accuracies=tuple(accuracies),
        chosen_k=best_k,
        channels=chosen[best_k],
    )


def class_pixel_sets(features: np.ndarray, masks: PartMaskSet) -> list[ClassPixelSet]:
    """Partition pixels into per-part in/out sets by soft-mask argmax."""
    data = np.asarray(features)
    if data.shape[:2] != (masks.height, masks.width):
        raise ValidationError(
            f"features {data.shape[:2]} do not match masks {(masks.height, masks.width)}"
        )
    flat = data.reshape(-1, data.shape[2])
    owner = masks.masks.reshape(masks.num_parts, -1).argmax(axis=0)
    sets = []
    for c, name in enumerate(masks.part_names):
        in_mask = owner == c
        sets.append(
            ClassPixelSet(
                part_index=c,
                in_class=flat[in_mask],
                out_class=flat[~in_mask],
                part_name=name,
            )
        )
    return sets


def select_for_example(
    fused_r: FusedFeature,
    masks_r: PartMaskSet,
    config: SelectionConfig = SelectionConfig(),
) -> SelectionRecord:
    """Run the channel-selection sweep per part and per source span.

    The masks must already be at feature resolution.  A part that owns no
    pixel at this resolution cannot be characterized; that is an error so the
    caller can decide to drop the part explicitly rather than silently.
    """
    fmap = fused_r.map
    if (masks_r.height, masks_r.width) != (fmap.height, fmap.width):
        raise ValidationError(
            f"masks {masks_r.height}x{masks_r.width} are not at feature "
            f"resolution {fmap.height}x{fmap.width}"
        )
    owner = masks_r.masks.reshape(masks_r.num_parts, -1).argmax(axis=0)
    for c, name in enumerate(masks_r.part_names):
        if not np.any(owner == c):
            raise ValidationError(
                f"part {name!r} has no pixels at feature resolution"
            )
    per_source_sets = {
        span.source: class_pixel_sets(fused_r.span_data(span.source), masks_r)
        for span in fused_r.channel_layout
    }
    parts = []
    for c, name in enumerate(masks_r.part_names):
        per_source = []
        for span in fused_r.channel_layout:
            px = per_source_sets[span.source][c]
            grid = config.k_grid or default_k_grid(span.length)
            sweep = sweep_k(px, grid, config.metric)
            per_source.append(
                SourceSelection(
                    source=span.source,
                    k=sweep.chosen_k,
                    channels=sweep.channels,
                    sweep_accuracy=sweep.accuracies[sweep.k_grid.index(sweep.chosen_k)],
                )
            )
        parts.append(PartSelection(name=name, per_source=tuple(per_source)))
    return SelectionRecord(metric=config.metric, parts=tuple(parts))
