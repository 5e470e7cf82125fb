"""Bit-exact persistence for feature tensors, images, masks, and selection records.

Three codec-free containers cover everything that crosses a process boundary:

* NPY v1.0 for real tensors (little-endian float32, C order) and for label
  maps (uint8).  Writers emit a header padded to a 64-byte multiple, so a
  write -> read -> write cycle is byte-identical.
* Binary PPM (P6) / PGM (P5) with maxval 255 for images.
* JSON for part-name lists and channel-selection records.
"""

from __future__ import annotations

import ast
import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError, ThinPartWarning, ValidationError

SOURCES = ("sd", "dino", "fused")
METRICS = ("variance", "cosine", "kl", "js")

_NPY_MAGIC = b"\x93NUMPY"
_NPY_VERSION = b"\x01\x00"


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class FeatureMap:
    """A dense (H, W, D) float32 feature grid from one source."""

    data: np.ndarray
    source: str

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ShapeError(f"feature map must be rank 3, got rank {arr.ndim}")
        if arr.dtype != np.float32:
            raise ShapeError(f"feature map must be float32, got {arr.dtype}")
        if self.source not in SOURCES:
            raise ValidationError(f"unknown feature source {self.source!r}")
        _require_finite(arr, "feature map")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ImageRGB:
    """An 8-bit RGB image, shape (H, W, 3)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError(f"image must have shape (H, W, 3), got {arr.shape}")
        if arr.dtype != np.uint8:
            raise ShapeError(f"image must be uint8, got {arr.dtype}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class PartMaskSet:
    """Per-part mask planes, shape (C, H, W), class 0 being background.

    At full resolution the planes are one-hot; after :func:`downsample_mask`
    they are soft values in [0, 1] that still sum to 1 at every pixel.
    """

    masks: np.ndarray
    part_names: tuple[str, ...]

    def __post_init__(self):
        arr = np.asarray(self.masks)
        names = tuple(self.part_names)
        if arr.ndim != 3:
            raise ShapeError(f"mask set must be rank 3 (C, H, W), got rank {arr.ndim}")
        if arr.dtype != np.float32:
            raise ShapeError(f"mask planes must be float32, got {arr.dtype}")
        if len(names) != arr.shape[0]:
            raise ShapeError(
                f"{len(names)} part names for {arr.shape[0]} mask planes"
            )
        if any(not n for n in names):
            raise ValidationError("part names must be non-empty")
        if len(set(names)) != len(names):
            raise ValidationError("part names must be unique")
        if arr.size and (arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6):
            raise ValidationError("mask values must lie in [0, 1]")
        sums = arr.sum(axis=0, dtype=np.float64)
        if arr.size and np.abs(sums - 1.0).max() > 2e-6:
            raise ValidationError("mask planes must sum to 1 at every pixel")
        arr.setflags(write=False)
        object.__setattr__(self, "masks", arr)
        object.__setattr__(self, "part_names", names)

    @property
    def num_parts(self) -> int:
        return self.masks.shape[0]

    @property
    def height(self) -> int:
        return self.masks.shape[1]

    @property
    def width(self) -> int:
        return self.masks.shape[2]


@dataclass(frozen=True)
class SourceSelection:
    """Channels chosen for one part from one feature source."""

    source: str
    k: int
    channels: tuple[int, ...]
    sweep_accuracy: float

    def __post_init__(self):
        chans = tuple(int(c) for c in self.channels)
        if self.source not in SOURCES:
            raise ValidationError(f"unknown feature source {self.source!r}")
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if len(chans) != self.k:
            raise ValidationError(
                f"{len(chans)} channels recorded for k={self.k} ({self.source})"
            )
        if any(c < 0 for c in chans):
            raise ValidationError("channel indices must be non-negative")
        if any(a >= b for a, b in zip(chans, chans[1:])):
            raise ValidationError("channel indices must be strictly increasing")
        object.__setattr__(self, "channels", chans)


@dataclass(frozen=True)
class PartSelection:
    name: str
    per_source: tuple[SourceSelection, ...]

    def __post_init__(self):
        object.__setattr__(self, "per_source", tuple(self.per_source))


@dataclass(frozen=True)
class SelectionRecord:
    """Per-part, per-source channel choices plus the metric that produced them."""

    metric: str
    parts: tuple[PartSelection, ...]

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValidationError(f"unknown selection metric {self.metric!r}")
        object.__setattr__(self, "parts", tuple(self.parts))

    def part(self, name: str) -> PartSelection:
        for p in self.parts:
            if p.name == name:
                return p
        raise ValidationError(f"selection record has no entry for part {name!r}")


# ---------------------------------------------------------------------------
# NPY container


def _require_finite(arr: np.ndarray, what: str) -> None:
    if np.issubdtype(arr.dtype, np.floating):
        flat = arr.reshape(-1)
        bad = np.flatnonzero(~np.isfinite(flat))
        if bad.size:
            raise ValidationError(
                f"{what} contains a non-finite value at flat index {int(bad[0])}"
            )


def _npy_header(descr: str, shape: tuple[int, ...]) -> bytes:
    head = "{'descr': %r, 'fortran_order': False, 'shape': %s, }" % (descr, repr(shape))
    # pad so magic + version + length field + header is a 64-byte multiple
    raw = len(_NPY_MAGIC) + len(_NPY_VERSION) + 2 + len(head) + 1
    head = head + " " * (-raw % 64) + "\n"
    return _NPY_MAGIC + _NPY_VERSION + struct.pack("<H", len(head)) + head.encode("latin1")


def _write_npy(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    descr = {np.dtype(np.float32): "<f4", np.dtype(np.uint8): "|u1"}.get(arr.dtype)
    if descr is None:
        raise ShapeError(f"unsupported dtype for NPY writer: {arr.dtype}")
    try:
        with open(path, "wb") as fh:
            fh.write(_npy_header(descr, arr.shape))
            fh.write(arr.tobytes(order="C"))
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def _read_npy(path, descr: str, ranks: tuple[int, ...]) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e}") from e
    if len(blob) < 10 or blob[:6] != _NPY_MAGIC:
        raise FormatError(f"{path}: not an NPY file (bad magic)")
    if blob[6:8] != _NPY_VERSION:
        raise FormatError(f"{path}: unsupported NPY version {blob[6]}.{blob[7]}")
    (hlen,) = struct.unpack("<H", blob[8:10])
    if len(blob) < 10 + hlen:
        raise FormatError(f"{path}: truncated NPY header")
    try:
        meta = ast.literal_eval(blob[10 : 10 + hlen].decode("latin1"))
        file_descr = meta["descr"]
        fortran = meta["fortran_order"]
        shape = tuple(int(s) for s in meta["shape"])
    except (ValueError, SyntaxError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: malformed NPY header: {e}") from e
    if fortran:
        raise FormatError(f"{path}: Fortran-order arrays are not supported")
    if file_descr != descr:
        raise ShapeError(f"{path}: expected dtype {descr}, file holds {file_descr}")
    if len(shape) not in ranks:
        raise ShapeError(
            f"{path}: expected rank {' or '.join(map(str, ranks))}, got rank {len(shape)}"
        )
    dtype = np.dtype(descr)
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = blob[10 + hlen :]
    if len(payload) != count * dtype.itemsize:
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes, header promises {count * dtype.itemsize}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    _require_finite(arr, str(path))
    return arr.copy()


def read_tensor(path, source: str = "dino") -> FeatureMap:
    """Read a rank-3 float32 NPY file as a FeatureMap.

    The container does not record the feature source, so the caller tags it;
    the default suits single-source workflows.
    """
    return FeatureMap(_read_npy(path, "<f4", (3,)), source)


def read_plane(path) -> np.ndarray:
    """Read a rank-2 float32 NPY file (mask plane or score plane)."""
    return _read_npy(path, "<f4", (2,))


def read_labels(path) -> np.ndarray:
    """Read a rank-2 uint8 NPY file of class indices."""
    return _read_npy(path, "|u1", (2,))


def write_tensor(t, path) -> None:
    """Write a FeatureMap or a float array (rank 2 or 3) as float32 NPY."""
    if isinstance(t, FeatureMap):
        arr = t.data
    else:
        arr = np.asarray(t)
        if arr.ndim not in (2, 3):
            raise ShapeError(f"tensor writer takes rank 2 or 3, got rank {arr.ndim}")
        arr = arr.astype(np.float32, copy=False)
    _require_finite(arr, "tensor")
    _write_npy(path, arr)


def write_labels(labels: np.ndarray, path) -> None:
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ShapeError(f"label map must be rank 2, got rank {arr.ndim}")
    _write_npy(path, arr.astype(np.uint8, copy=False))


# ---------------------------------------------------------------------------
# PPM / PGM images


def _pnm_tokens(blob: bytes, count: int, path) -> tuple[list[int], int]:
    """Read `count` whitespace-separated ASCII integers, skipping # comments."""
    tokens: list[int] = []
    i = 0
    while len(tokens) < count:
        if i >= len(blob):
            raise FormatError(f"{path}: truncated header")
        c = blob[i : i + 1]
        if c == b"#":
            while i < len(blob) and blob[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        elif c.isdigit():
            j = i
            while j < len(blob) and blob[j : j + 1].isdigit():
                j += 1
            tokens.append(int(blob[i:j]))
            i = j
        else:
            raise FormatError(f"{path}: unexpected byte {c!r} in header")
    return tokens, i


def read_image(path) -> ImageRGB:
    """Decode a binary PPM (P6) or PGM (P5, replicated to RGB) image."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e}") from e
    magic = blob[:2]
    if magic not in (b"P6", b"P5"):
        raise FormatError(f"{path}: not a binary PPM/PGM (magic {magic!r})")
    (width, height, maxval), end = _pnm_tokens(blob[2:], 3, path)
    end += 2
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    if end >= len(blob) or not blob[end : end + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after header")
    payload = blob[end + 1 :]
    per_pixel = 3 if magic == b"P6" else 1
    expected = width * height * per_pixel
    if len(payload) < expected:
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes, header promises {expected}"
        )
    pixels = np.frombuffer(payload[:expected], dtype=np.uint8)
    if magic == b"P6":
        data = pixels.reshape(height, width, 3)
    else:
        data = np.repeat(pixels.reshape(height, width, 1), 3, axis=2)
    return ImageRGB(data.copy())


def write_image(img, path) -> None:
    """Write an ImageRGB (or uint8 (H, W, 3) array) as binary PPM."""
    arr = img.data if isinstance(img, ImageRGB) else np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ShapeError(f"PPM writer takes uint8 (H, W, 3), got {arr.dtype} {arr.shape}")
    header = f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(arr).tobytes())
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


# ---------------------------------------------------------------------------
# masks


def load_mask_set(label_path, names_path) -> PartMaskSet:
    """Combine a uint8 label map and a JSON name list into one-hot planes."""
    labels = read_labels(label_path)
    try:
        names = json.loads(Path(names_path).read_text())
    except OSError as e:
        raise OSError(f"cannot read {names_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{names_path}: invalid JSON: {e}") from e
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise FormatError(f"{names_path}: expected a JSON array of strings")
    num_parts = len(names)
    if labels.size and int(labels.max()) >= num_parts:
        raise ValidationError(
            f"label value {int(labels.max())} out of range for {num_parts} parts"
        )
    planes = np.zeros((num_parts, *labels.shape), dtype=np.float32)
    for c in range(num_parts):
        planes[c] = labels == c
    return PartMaskSet(planes, tuple(names))


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix averaging with fractional coverage."""
    scale = n_in / n_out
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        start = i * scale
        stop = (i + 1) * scale
        j0 = int(np.floor(start))
        j1 = min(int(np.ceil(stop)), n_in)
        for j in range(j0, j1):
            w[i, j] = min(stop, j + 1) - max(start, j)
    return w / scale


def downsample_mask(m: PartMaskSet, height: int, width: int) -> PartMaskSet:
    """Area-average every plane into an (height, width) grid.

    Each output cell is the coverage-weighted mean of the input cells it
    spans, so planes keep summing to 1 per pixel and each plane's global mean
    is preserved.  A part whose downsampled plane peaks below 0.5 has eroded
    badly enough to be unreliable; that raises ThinPartWarning, not an error.
    """
    if height < 1 or width < 1:
        raise ValidationError(f"target dims must be positive, got {height}x{width}")
    if height > m.height or width > m.width:
        raise ValidationError(
            f"target {height}x{width} exceeds source {m.height}x{m.width}"
        )
    rows = _area_weights(m.height, height)
    cols = _area_weights(m.width, width)
    out = np.einsum(
        "ih,chw,jw->cij", rows, m.masks.astype(np.float64), cols, optimize=True
    )
    out32 = out.astype(np.float32)
    for name, plane in zip(m.part_names, out32):
        if plane.max() < 0.5:
            warnings.warn(
                f"part {name!r} nearly vanished at {height}x{width} "
                f"(peak soft value {plane.max():.3f})",
                ThinPartWarning,
                stacklevel=2,
            )
    return PartMaskSet(out32, m.part_names)


# ---------------------------------------------------------------------------
# selection records


def save_selection(record: SelectionRecord, path) -> None:
    payload = {
        "metric": record.metric,
        "parts": [
            {
                "name": p.name,
                "per_source": [
                    {
                        "source": s.source,
                        "k": s.k,
                        "channels": list(s.channels),
                        "sweep_accuracy": float(s.sweep_accuracy),
                    }
                    for s in p.per_source
                ],
            }
            for p in record.parts
        ],
    }
    try:
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def load_selection(path) -> SelectionRecord:
    try:
        payload = json.loads(Path(path).read_text())
    except OSError as e:
        raise OSError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from e
    try:
        parts = tuple(
            PartSelection(
                name=p["name"],
                per_source=tuple(
                    SourceSelection(
                        source=s["source"],
                        k=int(s["k"]),
                        channels=tuple(int(c) for c in s["channels"]),
                        sweep_accuracy=float(s["sweep_accuracy"]),
                    )
                    for s in p["per_source"]
                ),
            )
            for p in payload["parts"]
        )
        return SelectionRecord(metric=payload["metric"], parts=parts)
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: selection record missing field: {e}") from e
