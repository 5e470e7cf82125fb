"""Edge-aware refinement of score planes with a bilateral-grid solver.

The refined plane x minimizes

    (lam / 2) * sum_ij W[i, j] * (x_i - x_j)^2  +  sum_i conf_i * (x_i - t_i)^2

over pixels, where W is a bistochastized bilateral affinity: pixels splat
onto a sparse 5-D grid (two spatial axes plus YUV guide color), grid values
are blurred with a [1, 2, 1] kernel applied sequentially along each of the
five axes, and results are sliced back per pixel.  W is never materialized;
conjugate gradients only needs the splat -> scale -> blur -> scale -> slice
matvec.  Everything runs in float64 with fixed reduction orders, so identical
inputs give bitwise identical output regardless of thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor_io import ImageRGB
from .transfer import ScoreField

_BLUR_DIAG = 2.0 ** 5  # center tap of the [1,2,1] kernel, once per grid axis


@dataclass(frozen=True)
class SolverConfig:
    sigma_spatial: float = 8.0
    sigma_luma: float = 8.0
    sigma_chroma: float = 8.0
    lam: float = 128.0
    cg_max_iters: int = 25
    cg_tol: float = 1e-5
    bistoch_iters: int = 10

    def __post_init__(self):
        for name in ("sigma_spatial", "sigma_luma", "sigma_chroma"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.lam < 0:
            raise ValidationError("lam must be >= 0")
        if not self.cg_tol > 0:
            raise ValidationError("cg_tol must be positive")
        if self.cg_max_iters < 1 or self.bistoch_iters < 0:
            raise ValidationError("iteration counts out of range")


@dataclass(frozen=True)
class SolveInfo:
    converged: bool
    iterations: int
    residual: float


def rgb_to_yuv(rgb: np.ndarray) -> np.ndarray:
    """BT.601 conversion with U/V offset to the 0..255 range."""
    r = rgb[..., 0].astype(np.float64)
    g = rgb[..., 1].astype(np.float64)
    b = rgb[..., 2].astype(np.float64)
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    v = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return np.stack([y, u, v], axis=-1)


class BilateralGrid:
    """Sparse 5-D grid tying pixels to (x, y, Y, U, V) vertices.

    Vertices are numbered in pixel scan order (the first pixel to land in a
    cell claims the next index), which keeps every downstream quantity
    reproducible.  Blurring embeds vertex values into the occupied cells plus
    their one-cell halo: a [1,2,1] pass moves mass at most one step per axis,
    so any mass that can return to a vertex never leaves that halo and the
    sparse filter agrees exactly with the same filter on a dense lattice.
    """

    def __init__(self, guide: ImageRGB, cfg: SolverConfig):
        h, w = guide.height, guide.width
        yuv = rgb_to_yuv(guide.data)
        xs, ys = np.meshgrid(np.arange(w), np.arange(h))
        coords = np.stack(
            [
                np.floor(xs.reshape(-1) / cfg.sigma_spatial),
                np.floor(ys.reshape(-1) / cfg.sigma_spatial),
                np.floor(yuv[..., 0].reshape(-1) / cfg.sigma_luma),
                np.floor(yuv[..., 1].reshape(-1) / cfg.sigma_chroma),
                np.floor(yuv[..., 2].reshape(-1) / cfg.sigma_chroma),
            ],
            axis=1,
        ).astype(np.int64)

        # encode 5-D cells as scalars; strides leave one spare bin per side
        # so halo keys cannot collide
        lo = coords.min(axis=0) - 1
        extent = coords.max(axis=0) + 1 - lo + 1
        strides = np.ones(5, dtype=np.int64)
        for d in range(3, -1, -1):
            strides[d] = strides[d + 1] * extent[d + 1]
        pixel_keys = (coords - lo) @ strides

        uniq_keys, first_idx, inverse = np.unique(
            pixel_keys, return_index=True, return_inverse=True
        )
        order = np.argsort(first_idx, kind="stable")
        rank = np.empty(order.size, dtype=np.int64)
        rank[order] = np.arange(order.size)

        self.height = h
        self.width = w
        self.num_vertices = int(order.size)
        self.vertex_of = rank[inverse.reshape(-1)].astype(np.int64)
        self.vertex_coords = coords[first_idx[order]]
        self.counts = np.bincount(
            self.vertex_of, minlength=self.num_vertices
        ).astype(np.float64)

        # occupied cells plus a 1-ring halo around clustered vertices, as
        # sorted scalar keys; an isolated vertex (nothing occupied in its 3^5
        # ring) can only exchange mass with itself, so it needs no halo
        offsets = np.array(list(product((-1, 0, 1), repeat=5)), dtype=np.int64)
        offset_keys = offsets @ strides
        clustered = np.zeros(uniq_keys.size, dtype=bool)
        nonzero_offsets = offset_keys[offset_keys != 0]
        for start in range(0, uniq_keys.size, 65536):
            block = uniq_keys[start : start + 65536]
            cand = block[:, None] + nonzero_offsets[None, :]
            pos = np.minimum(np.searchsorted(uniq_keys, cand), uniq_keys.size - 1)
            clustered[start : start + 65536] = (uniq_keys[pos] == cand).any(axis=1)
        cell_keys = np.unique(
            np.concatenate(
                [
                    uniq_keys,
                    (uniq_keys[clustered][:, None] + offset_keys[None, :]).reshape(-1),
                ]
            )
        )
        vertex_keys = uniq_keys[order]
        self._vertex_cell = np.searchsorted(cell_keys, vertex_keys)
        self._num_cells = int(cell_keys.size)

        def scatter_pair(delta: int) -> tuple[np.ndarray, np.ndarray]:
            want = cell_keys + delta
            pos = np.minimum(np.searchsorted(cell_keys, want), cell_keys.size - 1)
            ok = cell_keys[pos] == want
            return np.flatnonzero(ok), pos[ok]

        self._gather = [
            [scatter_pair(-int(strides[d])), scatter_pair(int(strides[d]))]
            for d in range(5)
        ]

        self.norm = self._bistochastize(cfg.bistoch_iters)
        # affinity row sums and diagonal, fixed once per grid
        scale = self.norm / self.counts
        self._scale = scale
        self._row_sum = (scale * self.blur(self.norm))[self.vertex_of]
        self._diag = (scale[self.vertex_of] ** 2) * _BLUR_DIAG

    def blur(self, values: np.ndarray) -> np.ndarray:
        """[1, 2, 1] filtered sequentially along each grid axis."""
        g = np.zeros(self._num_cells, dtype=np.float64)
        g[self._vertex_cell] = values
        for pairs in self._gather:
            acc = 2.0 * g
            for dst, src in pairs:
                acc[dst] += g[src]
            g = acc
        return g[self._vertex_cell]

    def splat(self, pixel_values: np.ndarray) -> np.ndarray:
        return np.bincount(
            self.vertex_of, weights=pixel_values, minlength=self.num_vertices
        )

    def slice(self, vertex_values: np.ndarray) -> np.ndarray:
        return vertex_values[self.vertex_of]

    def _bistochastize(self, iters: int) -> np.ndarray:
        n = np.sqrt(self.counts)
        for _ in range(iters):
            n = np.sqrt(n * self.counts / self.blur(n))
        return n

    def affinity_matvec(self, x: np.ndarray) -> np.ndarray:
        """W @ x through splat -> scale -> blur -> scale -> slice."""
        return self.slice(self._scale * self.blur(self._scale * self.splat(x)))

    @property
    def affinity_row_sums(self) -> np.ndarray:
        return self._row_sum

    @property
    def affinity_diag(self) -> np.ndarray:
        return self._diag


def build_grid(guide: ImageRGB, cfg: SolverConfig) -> BilateralGrid:
    return BilateralGrid(guide, cfg)


def _mean_per_vertex(grid: BilateralGrid, values: np.ndarray) -> np.ndarray:
    return grid.slice(grid.splat(values) / grid.counts)


def solve(
    grid: BilateralGrid,
    target: np.ndarray,
    confidence: np.ndarray,
    cfg: SolverConfig,
) -> tuple[np.ndarray, SolveInfo]:
    """Minimize the smoothing objective for one plane; returns (plane, info).

    Jacobi-preconditioned CG starts from the splatted target (each pixel at
    its vertex's mean target value) and stops when the relative residual
    drops below cg_tol or the iteration cap is hit.  The result is clamped
    to [0, 1] after solving.
    """
    t = np.asarray(target, dtype=np.float64)
    c = np.asarray(confidence, dtype=np.float64)
    if t.shape != (grid.height, grid.width) or c.shape != t.shape:
        raise ShapeError(
            f"target {t.shape} / confidence {c.shape} do not match the "
            f"{grid.height}x{grid.width} grid"
        )
    if not np.all(np.isfinite(t)) or not np.all(np.isfinite(c)):
        raise ValidationError("target and confidence must be finite")
    if c.min() < 0:
        raise ValidationError("confidence must be non-negative")
    t_flat = t.reshape(-1)
    c_flat = c.reshape(-1)

    if cfg.lam == 0.0:
        # pure data term: the minimizer is the target wherever it is pinned;
        # unconstrained pixels keep the initialization value
        x = np.where(c_flat > 0, t_flat, _mean_per_vertex(grid, t_flat))
        return (
            np.clip(x, 0.0, 1.0).reshape(t.shape),
            SolveInfo(converged=True, iterations=0, residual=0.0),
        )

    row = grid.affinity_row_sums
    lam = cfg.lam

    def matvec(x: np.ndarray) -> np.ndarray:
        return lam * (row * x - grid.affinity_matvec(x)) + c_flat * x

    diag = lam * (row - grid.affinity_diag) + c_flat
    diag = np.maximum(diag, 1e-12)
    b = c_flat * t_flat
    b_norm = max(float(np.linalg.norm(b)), 1e-30)

    x = _mean_per_vertex(grid, t_flat)
    r = b - matvec(x)
    rel = float(np.linalg.norm(r)) / b_norm
    info = SolveInfo(converged=rel < cfg.cg_tol, iterations=0, residual=rel)
    if not info.converged:
        z = r / diag
        p = z.copy()
        rz = float(r @ z)
        it = 0
        for it in range(1, cfg.cg_max_iters + 1):
            ap = matvec(p)
            pap = float(p @ ap)
            if pap <= 0.0:
                break
            alpha = rz / pap
            x = x + alpha * p
            r = r - alpha * ap
            rel = float(np.linalg.norm(r)) / b_norm
            if rel < cfg.cg_tol:
                info = SolveInfo(converged=True, iterations=it, residual=rel)
                break
            z = r / diag
            rz_next = float(r @ z)
            p = z + (rz_next / rz) * p
            rz = rz_next
        if not info.converged:
            info = SolveInfo(converged=False, iterations=it, residual=rel)
    return np.clip(x, 0.0, 1.0).reshape(t.shape), info


def refine_scores(
    scores: ScoreField,
    guide: ImageRGB,
    cfg: SolverConfig,
    threads: int = 1,
) -> tuple[ScoreField, tuple[SolveInfo, ...]]:
    """Solve each class plane against the guide with uniform confidence 1.

    Argmax over the refined planes gives the final label map; per-class
    solves are independent, so they parallelize without changing results.
    """
    if (scores.height, scores.width) != (guide.height, guide.width):
        raise ShapeError(
            f"scores {scores.height}x{scores.width} do not match guide "
            f"{guide.height}x{guide.width}"
        )
    grid = build_grid(guide, cfg)
    ones = np.ones((guide.height, guide.width), dtype=np.float64)

    def run(c: int) -> tuple[np.ndarray, SolveInfo]:
        return solve(grid, scores.planes[c], ones, cfg)

    out = np.empty_like(scores.planes)
    infos: list[SolveInfo | None] = [None] * scores.num_parts
    indices = range(scores.num_parts)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for c, (plane, info) in zip(indices, pool.map(run, indices)):
                out[c] = plane.astype(np.float32)
                infos[c] = info
    else:
        for c in indices:
            plane, info = run(c)
            out[c] = plane.astype(np.float32)
            infos[c] = info
    return ScoreField(out, scores.part_names), tuple(infos)
