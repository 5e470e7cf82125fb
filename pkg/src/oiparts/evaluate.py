"""Confusion-matrix accumulation and per-part IoU / mIoU reporting."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError


@dataclass
class ConfusionMatrix:
    """C x C integer counts; rows index ground truth, columns prediction."""

    counts: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.counts, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ShapeError(f"confusion matrix must be square, got {arr.shape}")
        if arr.size and arr.min() < 0:
            raise ValidationError("confusion counts must be non-negative")
        self.counts = arr

    @classmethod
    def empty(cls, num_parts: int) -> ConfusionMatrix:
        return cls(np.zeros((num_parts, num_parts), dtype=np.int64))

    @property
    def num_parts(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _label_array(labels) -> np.ndarray:
    arr = labels.labels if hasattr(labels, "labels") else np.asarray(labels)
    if arr.ndim != 2:
        raise ShapeError(f"label map must be rank 2, got rank {arr.ndim}")
    return arr.astype(np.int64)


def accumulate(cm: ConfusionMatrix, gt, pred) -> ConfusionMatrix:
    """Add one image's pixel counts into `cm` (mutated and returned)."""
    g = _label_array(gt)
    p = _label_array(pred)
    if g.shape != p.shape:
        raise ShapeError(f"ground truth {g.shape} vs prediction {p.shape}")
    c = cm.num_parts
    if g.size and (int(g.max()) >= c or int(p.max()) >= c):
        raise ShapeError(f"label values exceed the {c}-part confusion matrix")
    flat = g.reshape(-1) * c + p.reshape(-1)
    cm.counts += np.bincount(flat, minlength=c * c).reshape(c, c)
    return cm


@dataclass(frozen=True)
class PartIou:
    name: str
    iou: float | None  # None when the part never occurs in gt or prediction

    @property
    def included(self) -> bool:
        return self.iou is not None


@dataclass(frozen=True)
class IouReport:
    parts: tuple[PartIou, ...]
    miou: float | None

    def to_text(self) -> str:
        width = max(len(p.name) for p in self.parts)
        lines = [f"{'part'.ljust(width)}  iou"]
        for p in self.parts:
            value = f"{p.iou:.6f}" if p.included else "(excluded: never occurs)"
            lines.append(f"{p.name.ljust(width)}  {value}")
        miou = f"{self.miou:.6f}" if self.miou is not None else "n/a"
        lines.append(f"{'mIoU'.ljust(width)}  {miou}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        rows = ["part,iou"]
        for p in self.parts:
            rows.append(f"{p.name},{p.iou:.6f}" if p.included else f"{p.name},")
        rows.append(f"mIoU,{self.miou:.6f}" if self.miou is not None else "mIoU,")
        return "\n".join(rows) + "\n"

    def to_json(self) -> str:
        payload = {
            "parts": [
                {"name": p.name, "iou": p.iou, "included": p.included}
                for p in self.parts
            ],
            "excluded": [p.name for p in self.parts if not p.included],
            "miou": self.miou,
        }
        return json.dumps(payload, indent=2) + "\n"


def iou_report(cm: ConfusionMatrix, names) -> IouReport:
    """Per-part IoU plus the unweighted mean over parts that actually occur.

    A part absent from both ground truth and prediction has an undefined
    IoU; it is excluded from the mean and flagged instead of silently
    scoring 0, which would drag the mean down for no reason.
    """
    names = tuple(names)
    if len(names) != cm.num_parts:
        raise ShapeError(f"{len(names)} names for a {cm.num_parts}-part matrix")
    diag = np.diag(cm.counts)
    gt_totals = cm.counts.sum(axis=1)
    pred_totals = cm.counts.sum(axis=0)
    parts = []
    for c, name in enumerate(names):
        union = int(gt_totals[c] + pred_totals[c] - diag[c])
        parts.append(PartIou(name, float(diag[c]) / union if union else None))
    included = [p.iou for p in parts if p.included]
    miou = float(np.mean(included)) if included else None
    return IouReport(tuple(parts), miou)
