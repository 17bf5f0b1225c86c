"""Multi-resolution hash grids over the [-1, 1]^3 region of interest.

Corner ``k`` of a voxel (0..7) sits at offset ``(k & 1, (k >> 1) & 1, (k >> 2) & 1)``
from the voxel's lower corner.  Voxels are half-open, ``[i, i + 1)``, except
that points on the upper ROI face belong to the last voxel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from ngprt.errors import DomainError, ShapeError

PRIMES = (1, 2654435761, 805459861)
ROI_TOL = 1e-5

CORNER_OFFSETS = np.array([[(k >> a) & 1 for a in range(3)] for k in range(8)], dtype=np.int64)


@dataclass
class HashLevel:
    resolution: int
    table_len: int
    feature_dim: int
    entries: np.ndarray

    def __post_init__(self) -> None:
        if self.entries.shape != (self.table_len, self.feature_dim):
            raise ShapeError(f"entries {self.entries.shape} != {(self.table_len, self.feature_dim)}")

    @classmethod
    def create(cls, resolution: int, max_table_len: int, feature_dim: int, dtype=np.float32) -> "HashLevel":
        table_len = min(max_table_len, (resolution + 1) ** 3)
        return cls(resolution, table_len, feature_dim, np.zeros((table_len, feature_dim), dtype=dtype))

    @property
    def addressing(self) -> str:
        return "direct" if (self.resolution + 1) ** 3 <= self.table_len else "hashed"


def hash_index(coord, level: HashLevel):
    """Table row of integer corner coordinates ``(..., 3)``."""
    c = np.asarray(coord, dtype=np.int64)
    if c.shape[-1] != 3:
        raise ShapeError("corner coordinates must have 3 components")
    if np.any(c < 0) or np.any(c > level.resolution):
        raise DomainError(f"corner outside [0, {level.resolution}]")
    out = _index(c, level.resolution, level.table_len)
    return int(out) if out.ndim == 0 else out


def _index(c: np.ndarray, resolution: int, table_len: int) -> np.ndarray:
    if (resolution + 1) ** 3 <= table_len:
        n = resolution + 1
        return c[..., 0] + n * (c[..., 1] + n * c[..., 2])
    u = c.astype(np.uint64)
    h = (u[..., 0] * np.uint64(PRIMES[0])) ^ (u[..., 1] * np.uint64(PRIMES[1])) ^ (u[..., 2] * np.uint64(PRIMES[2]))
    return (h % np.uint64(table_len)).astype(np.int64)


@dataclass
class InterpStencil:
    corners: np.ndarray  # (N, 8, 3) int64
    weights: np.ndarray  # (N, 8)


def check_roi(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != 3:
        raise ShapeError("points must have 3 components")
    if x.size and (np.max(np.abs(x)) > 1.0 + ROI_TOL or not np.all(np.isfinite(x))):
        raise DomainError("point outside the [-1, 1]^3 region of interest")
    return x


def stencil(x, resolution: int) -> InterpStencil:
    """Trilinear stencil of points ``(N, 3)`` (or a single point) on a grid."""
    x = check_roi(np.asarray(x))
    single = x.ndim == 1
    pts = x.reshape(-1, 3)
    u = (np.clip(pts, -1.0, 1.0) + 1.0) * (0.5 * resolution)
    base = np.minimum(np.floor(u), resolution - 1).astype(np.int64)
    frac = u - base
    corners = base[:, None, :] + CORNER_OFFSETS[None]
    sel = CORNER_OFFSETS[None].astype(bool)
    w = np.where(sel, frac[:, None, :], 1.0 - frac[:, None, :]).prod(axis=2)
    if single:
        return InterpStencil(corners[0], w[0])
    return InterpStencil(corners, w)


@numba.njit(cache=True, nogil=True)
def _rows_kernel(pts, res, table_len, direct, rows, weights):
    n1 = res + 1
    half = 0.5 * res
    tl = np.uint64(table_len)
    p1 = np.uint64(PRIMES[1])
    p2 = np.uint64(PRIMES[2])
    pow2 = table_len & (table_len - 1) == 0
    mask = np.uint64(table_len - 1)
    top = res - 1.0
    for i in range(pts.shape[0]):
        ux = (min(max(np.float64(pts[i, 0]), -1.0), 1.0) + 1.0) * half
        uy = (min(max(np.float64(pts[i, 1]), -1.0), 1.0) + 1.0) * half
        uz = (min(max(np.float64(pts[i, 2]), -1.0), 1.0) + 1.0) * half
        bx = min(np.floor(ux), top)
        by = min(np.floor(uy), top)
        bz = min(np.floor(uz), top)
        fx, fy, fz = ux - bx, uy - by, uz - bz
        ix, iy, iz = np.int64(bx), np.int64(by), np.int64(bz)
        for k in range(8):
            ox, oy, oz = k & 1, (k >> 1) & 1, (k >> 2) & 1
            weights[i, k] = (fx if ox else 1.0 - fx) * (fy if oy else 1.0 - fy) * (fz if oz else 1.0 - fz)
            cx, cy, cz = ix + ox, iy + oy, iz + oz
            if direct:
                rows[i, k] = cx + n1 * (cy + n1 * cz)
            else:
                h = np.uint64(cx) ^ (np.uint64(cy) * p1) ^ (np.uint64(cz) * p2)
                rows[i, k] = np.int64(h & mask) if pow2 else np.int64(h % tl)


def grid_rows(x: np.ndarray, resolution: int, table_len: int | None = None, dtype=None) -> tuple[np.ndarray, np.ndarray]:
    """Rows ``(N, 8)`` and trilinear weights ``(N, 8)`` of points on one grid.

    ``table_len=None`` returns the linear corner index on the ``resolution + 1``
    lattice (direct addressing without a table).  Same rule as :func:`stencil`.
    """
    pts = np.ascontiguousarray(check_roi(np.asarray(x)).reshape(-1, 3))
    direct = table_len is None or (resolution + 1) ** 3 <= table_len
    rows = np.empty((len(pts), 8), dtype=np.int64)
    w = np.empty((len(pts), 8), dtype=dtype or (pts.dtype if pts.dtype.kind == "f" else np.float64))
    _rows_kernel(pts, resolution, 1 if table_len is None else table_len, direct, rows, w)
    return rows, w


def stencil_rows(x: np.ndarray, level: HashLevel) -> tuple[np.ndarray, np.ndarray]:
    """Table rows ``(N, 8)`` and weights ``(N, 8)`` for points on one level."""
    return grid_rows(x, level.resolution, level.table_len)


@numba.njit(cache=True, nogil=True)
def gather_rows(table, rows, weights):
    n = rows.shape[0]
    k = rows.shape[1]
    c = table.shape[1]
    out = np.zeros((n, c), dtype=weights.dtype)
    for i in range(n):
        for j in range(k):
            r = rows[i, j]
            w = weights[i, j]
            for ch in range(c):
                out[i, ch] += w * table[r, ch]
    return out


@numba.njit(cache=True, nogil=True)
def scatter_rows(grad_table, rows, weights, upstream):
    n = rows.shape[0]
    k = rows.shape[1]
    c = grad_table.shape[1]
    for i in range(n):
        for j in range(k):
            r = rows[i, j]
            w = weights[i, j]
            for ch in range(c):
                grad_table[r, ch] += w * upstream[i, ch]


def interp_features(level: HashLevel, x) -> np.ndarray:
    x = np.asarray(x, dtype=level.entries.dtype)
    single = x.ndim == 1
    rows, w = stencil_rows(x.reshape(-1, 3), level)
    out = gather_rows(level.entries, rows, w)
    return out[0] if single else out


def interp_backward(level: HashLevel, x, upstream) -> np.ndarray:
    """Gradient of ``sum(upstream * interp_features(level, x))`` w.r.t. the table."""
    x = np.asarray(x, dtype=level.entries.dtype)
    rows, w = stencil_rows(x.reshape(-1, 3), level)
    grad = np.zeros_like(level.entries)
    scatter_rows(grad, rows, w, np.asarray(upstream, dtype=grad.dtype).reshape(len(rows), -1))
    return grad


class MultiLevelEncoding:
    """Implicit coarse hash levels (width 4) and explicit fine levels (width 8)."""

    COARSE_DIM = 4
    FINE_DIM = 8

    def __init__(
        self,
        coarse_resolutions: list[int],
        coarse_table_len: int,
        fine_resolutions: list[int],
        fine_table_len: int,
        coarse_resolution: int,
        dtype=np.float32,
    ):
        self.coarse_levels = [HashLevel.create(r, coarse_table_len, self.COARSE_DIM, dtype) for r in coarse_resolutions]
        self.fine_levels = [HashLevel.create(r, fine_table_len, self.FINE_DIM, dtype) for r in fine_resolutions]
        self.L_C = coarse_resolution

    @classmethod
    def from_config(cls, cfg, dtype=np.float32) -> "MultiLevelEncoding":
        return cls(
            cfg.coarse_resolutions,
            cfg.coarse_table_len,
            cfg.fine_level_resolutions,
            cfg.fine_table_len,
            cfg.coarse_resolution,
            dtype,
        )

    @property
    def L(self) -> int:
        return len(self.fine_levels)

    @property
    def coarse_width(self) -> int:
        return self.COARSE_DIM * len(self.coarse_levels)

    def init_tables(self, rng: np.random.Generator, scale: float = 1e-4) -> None:
        """Coarse tables uniform in [-scale, scale]; fine tables exactly zero."""
        for lvl in self.coarse_levels:
            lvl.entries[...] = rng.uniform(-scale, scale, size=lvl.entries.shape)
        for lvl in self.fine_levels:
            lvl.entries[...] = 0

    def register(self, tape) -> None:
        for k, lvl in enumerate(self.coarse_levels):
            tape.register(f"coarse{k}", lvl.entries)
        for k, lvl in enumerate(self.fine_levels):
            tape.register(f"fine{k}", lvl.entries)

    def rebind(self, tape) -> None:
        for k, lvl in enumerate(self.coarse_levels):
            lvl.entries = tape.params[f"coarse{k}"]
        for k, lvl in enumerate(self.fine_levels):
            lvl.entries = tape.params[f"fine{k}"]

    # coarse ---------------------------------------------------------------
    def encode_coarse(self, x: np.ndarray, with_cache: bool = False):
        x = np.asarray(x)
        pts = x.reshape(-1, 3)
        parts, cache = [], []
        for lvl in self.coarse_levels:
            rows, w = stencil_rows(pts, lvl)
            parts.append(gather_rows(lvl.entries, rows, w))
            cache.append((rows, w))
        out = np.concatenate(parts, axis=1)
        if x.ndim == 1:
            out = out[0]
        return (out, cache) if with_cache else out

    def coarse_backward(self, cache, upstream: np.ndarray, tape) -> None:
        for k, ((rows, w), lvl) in enumerate(zip(cache, self.coarse_levels)):
            g = np.ascontiguousarray(upstream[:, self.COARSE_DIM * k : self.COARSE_DIM * (k + 1)], dtype=lvl.entries.dtype)
            scatter_rows(tape.grads[f"coarse{k}"], rows, w, g)

    # fine -----------------------------------------------------------------
    def encode_fine(self, x: np.ndarray, with_cache: bool = False):
        """Per-level fine features, shape ``(N, L, 8)`` (or ``(L, 8)`` for one point)."""
        x = np.asarray(x)
        pts = x.reshape(-1, 3)
        parts, cache = [], []
        for lvl in self.fine_levels:
            rows, w = stencil_rows(pts, lvl)
            parts.append(gather_rows(lvl.entries, rows, w))
            cache.append((rows, w))
        out = np.stack(parts, axis=1)
        if x.ndim == 1:
            out = out[0]
        return (out, cache) if with_cache else out

    def fine_backward(self, cache, upstream: np.ndarray, tape) -> None:
        for k, ((rows, w), lvl) in enumerate(zip(cache, self.fine_levels)):
            g = np.ascontiguousarray(upstream[:, k, :], dtype=lvl.entries.dtype)
            scatter_rows(tape.grads[f"fine{k}"], rows, w, g)


def encode_coarse(enc: MultiLevelEncoding, x) -> np.ndarray:
    return enc.encode_coarse(x)


def encode_fine(enc: MultiLevelEncoding, x) -> np.ndarray:
    return enc.encode_fine(x)
