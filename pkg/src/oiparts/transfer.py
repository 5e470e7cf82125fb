"""Similarity-weighted label transfer from the labeled example to the query.

Every query pixel gets a softmax distribution over all reference pixels
(cosine similarity scaled by 1/beta), and each part's query plane is the
expectation of that part's reference mask under the distribution.  Planes are
then bilinearly upsampled to image resolution and argmaxed into a label map.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .fusion import FusedFeature
from .tensor_io import PartMaskSet, SelectionRecord

_BLOCK_ROWS = 1024  # bounds the live similarity slab at block x H'W' floats


@dataclass(frozen=True)
class TransferConfig:
    beta: float = 0.1
    use_selection: bool = True
    upsample_to: tuple[int, int] | None = None  # None -> stay at feature resolution

    def __post_init__(self):
        if not self.beta > 0:
            raise ValidationError(f"beta must be positive, got {self.beta}")
        if self.upsample_to is not None:
            h, w = self.upsample_to
            object.__setattr__(self, "upsample_to", (int(h), int(w)))


@dataclass(frozen=True)
class ScoreField:
    """Per-part soft prediction planes, shape (C, H, W), values in [0, 1]."""

    planes: np.ndarray
    part_names: tuple[str, ...]

    def __post_init__(self):
        arr = np.asarray(self.planes)
        if arr.ndim != 3:
            raise ShapeError(f"score field must be rank 3 (C, H, W), got {arr.ndim}")
        if arr.dtype != np.float32:
            raise ShapeError(f"score field must be float32, got {arr.dtype}")
        if len(self.part_names) != arr.shape[0]:
            raise ShapeError(
                f"{len(self.part_names)} names for {arr.shape[0]} planes"
            )
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValidationError("score values must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "planes", arr)
        object.__setattr__(self, "part_names", tuple(self.part_names))

    @property
    def num_parts(self) -> int:
        return self.planes.shape[0]

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]


@dataclass(frozen=True)
class LabelMap:
    """Integer class index per pixel plus the part-name table."""

    labels: np.ndarray
    part_names: tuple[str, ...]

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2:
            raise ShapeError(f"label map must be rank 2, got rank {arr.ndim}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ShapeError(f"label map must be integer, got {arr.dtype}")
        if arr.size and int(arr.max()) >= len(self.part_names):
            raise ValidationError(
                f"label {int(arr.max())} out of range for {len(self.part_names)} parts"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)
        object.__setattr__(self, "part_names", tuple(self.part_names))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms == 0.0, 1.0, norms)


def similarity_weights(fq: np.ndarray, fr: np.ndarray, beta: float) -> np.ndarray:
    """Row-stochastic (Nq, Nr) weights: softmax over reference pixels of cosine/beta.

    Zero query or reference vectors contribute cosine 0.  Softmax subtracts
    the row max before exponentiating, and normalization runs in float64, so
    each row sums to 1 well within 1e-6 even for thousands of columns.
    """
    fq = np.asarray(fq, dtype=np.float32)
    fr = np.asarray(fr, dtype=np.float32)
    if fq.ndim != 2 or fr.ndim != 2:
        raise ShapeError("feature matrices must be (N, D)")
    if fq.shape[1] != fr.shape[1]:
        raise ShapeError(f"channel mismatch: query {fq.shape[1]} vs reference {fr.shape[1]}")
    if not beta > 0:
        raise ValidationError(f"beta must be positive, got {beta}")
    qn = _unit_rows(fq)
    rn = _unit_rows(fr).T
    out = np.empty((fq.shape[0], fr.shape[0]), dtype=np.float32)
    for start in range(0, fq.shape[0], _BLOCK_ROWS):
        stop = min(start + _BLOCK_ROWS, fq.shape[0])
        scaled = (qn[start:stop] @ rn).astype(np.float64) / beta
        scaled -= scaled.max(axis=1, keepdims=True)
        np.exp(scaled, out=scaled)
        scaled /= scaled.sum(axis=1, keepdims=True)
        out[start:stop] = scaled
    return out


def transfer_class(weights: np.ndarray, mask_plane: np.ndarray) -> np.ndarray:
    """Expected reference mask value per query pixel: weights @ mask.

    The mask may come flat or as an (h, w) plane; the result mirrors its
    shape, which assumes query and reference share the feature grid.
    """
    weights = np.asarray(weights)
    plane = np.asarray(mask_plane, dtype=np.float64)
    flat = plane.reshape(-1)
    if weights.ndim != 2 or weights.shape[1] != flat.size:
        raise ShapeError(
            f"weights {weights.shape} incompatible with mask of {flat.size} pixels"
        )
    row_sums = weights.sum(axis=1, dtype=np.float64)
    if row_sums.size and np.abs(row_sums - 1.0).max() > 1e-4:
        raise ValidationError("weight rows must sum to 1")
    out = weights.astype(np.float64) @ flat
    np.clip(out, 0.0, 1.0, out=out)
    out = out.astype(np.float32)
    if plane.ndim == 2:
        if weights.shape[0] != flat.size:
            raise ShapeError(
                "2-D output requires the query grid to match the mask grid"
            )
        return out.reshape(plane.shape)
    return out


def _gather_channels(sel: SelectionRecord, part_name: str, layout) -> list[int]:
    part = sel.part(part_name)
    indices: list[int] = []
    for span in layout:  # layout order keeps sd channels ahead of dino
        for entry in part.per_source:
            if entry.source != span.source:
                continue
            for c in entry.channels:
                if not 0 <= c < span.length:
                    raise ValidationError(
                        f"part {part_name!r}: channel {c} out of range for "
                        f"source {span.source!r} with {span.length} channels"
                    )
                indices.append(span.offset + c)
    if not indices:
        raise ValidationError(f"selection for part {part_name!r} is empty")
    return indices


def segment(
    fused_q: FusedFeature,
    fused_r: FusedFeature,
    masks_r: PartMaskSet,
    sel: SelectionRecord | None,
    cfg: TransferConfig,
    threads: int = 1,
) -> ScoreField:
    """Build the per-part score field for a query against one labeled example.

    With selection enabled each part sees only its own channels; otherwise a
    single all-channel weight matrix is shared by every part, making the
    result independent of the record contents.
    """
    if fused_q.channel_layout != fused_r.channel_layout:
        raise ShapeError("query and reference feature layouts differ")
    if (masks_r.height, masks_r.width) != (fused_r.map.height, fused_r.map.width):
        raise ValidationError(
            f"masks {masks_r.height}x{masks_r.width} are not at feature "
            f"resolution {fused_r.map.height}x{fused_r.map.width}"
        )
    if cfg.use_selection and sel is None:
        raise ValidationError("selection is enabled but no record was given")
    flat_q = fused_q.map.data.reshape(-1, fused_q.map.channels)
    flat_r = fused_r.map.data.reshape(-1, fused_r.map.channels)
    h_q, w_q = fused_q.map.height, fused_q.map.width
    planes = np.empty((masks_r.num_parts, h_q, w_q), dtype=np.float32)

    if not cfg.use_selection:
        weights = similarity_weights(flat_q, flat_r, cfg.beta)

        def run(c: int) -> np.ndarray:
            return transfer_class(weights, masks_r.masks[c].reshape(-1)).reshape(h_q, w_q)

    else:

        def run(c: int) -> np.ndarray:
            idx = _gather_channels(sel, masks_r.part_names[c], fused_r.channel_layout)
            w = similarity_weights(flat_q[:, idx], flat_r[:, idx], cfg.beta)
            return transfer_class(w, masks_r.masks[c].reshape(-1)).reshape(h_q, w_q)

    indices = range(masks_r.num_parts)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for c, plane in zip(indices, pool.map(run, indices)):
                planes[c] = plane
    else:
        for c in indices:
            planes[c] = run(c)
    return ScoreField(planes, masks_r.part_names)


def _lerp_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) bilinear weights: half-pixel centers, edges clamped."""
    w = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(src).astype(np.int64)
    t = src - lo
    lo_c = np.clip(lo, 0, n_in - 1)
    hi_c = np.clip(lo + 1, 0, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(w, (rows, lo_c), 1.0 - t)
    np.add.at(w, (rows, hi_c), t)
    return w


def bilinear_resize(plane: np.ndarray, height: int, width: int) -> np.ndarray:
    """Separable bilinear resize with sample centers at (i + 0.5) * scale - 0.5."""
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise ShapeError(f"expected a 2-D plane, got rank {plane.ndim}")
    rows = _lerp_weights(plane.shape[0], height)
    cols = _lerp_weights(plane.shape[1], width)
    return rows @ plane @ cols.T


def finalize(scores: ScoreField, cfg: TransferConfig) -> tuple[LabelMap, ScoreField]:
    """Upsample the score planes to the target size and argmax into labels.

    Argmax ties go to the lower class index.
    """
    target = cfg.upsample_to or (scores.height, scores.width)
    if target[0] < scores.height or target[1] < scores.width:
        raise ValidationError(
            f"upsample target {target} is below feature resolution "
            f"{(scores.height, scores.width)}"
        )
    up = np.empty((scores.num_parts, target[0], target[1]), dtype=np.float32)
    for c in range(scores.num_parts):
        resized = bilinear_resize(scores.planes[c], target[0], target[1])
        up[c] = np.clip(resized, 0.0, 1.0).astype(np.float32)
    field = ScoreField(up, scores.part_names)
    labels = argmax_labels(field)
    return labels, field


def argmax_labels(scores: ScoreField) -> LabelMap:
    labels = scores.planes.argmax(axis=0).astype(np.uint8)
    return LabelMap(labels, scores.part_names)
