"""Empty-space skipping: occupancy pyramid, distance grid and ray marchers.

All grids cover the [-1, 1]^3 region of interest and are indexed ``[x, y, z]``.
Two marchers share one kernel: the baseline advances through empty space by
exiting the voxel of the level where the pyramid first reports "empty"; the
distance-grid marcher may instead jump ``v * G_p`` where ``G_p`` is the stored
conservative distance (in voxels) to the nearest occupied voxel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from ngprt.errors import DomainError, ShapeError
from ngprt.hashgrid import ROI_TOL

EXIT_EPS = 1e-6
DIST_MAX = 255


@dataclass
class OccupancyPyramid:
    """Bit grids from finest (index 0) to coarsest, each half the previous resolution."""

    levels: list[np.ndarray]

    def __post_init__(self) -> None:
        for a, b in zip(self.levels, self.levels[1:]):
            if b.shape[0] * 2 != a.shape[0]:
                raise ShapeError("pyramid levels must halve in resolution")

    @property
    def resolutions(self) -> list[int]:
        return [lvl.shape[0] for lvl in self.levels]

    @property
    def finest(self) -> np.ndarray:
        return self.levels[0]

    def packed(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Levels coarse-to-fine as one flat uint8 buffer plus resolutions and offsets."""
        order = self.levels[::-1]
        res = np.array([lvl.shape[0] for lvl in order], dtype=np.int64)
        off = np.zeros(len(order), dtype=np.int64)
        off[1:] = np.cumsum([lvl.size for lvl in order[:-1]])
        data = np.concatenate([lvl.astype(np.uint8).ravel() for lvl in order])
        return data, res, off


@dataclass
class DistanceGrid:
    values: np.ndarray  # (R, R, R) uint8

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def voxel_size(self) -> float:
        return 2.0 / self.resolution


@dataclass
class MarchState:
    """Per-ray counters of one marching pass."""

    t: float = 0.0
    marching_points: int = 0
    occupied_points: int = 0
    occ_grid_accesses: int = 0
    dist_grid_accesses: int = 0


@dataclass
class ProbeResult:
    occupied: bool
    exit_level: int | None  # resolution of the first empty level
    accesses: int


def downsample(bits: np.ndarray) -> np.ndarray:
    """OR-reduce a cubic bit grid by 2 along each axis."""
    r = bits.shape[0]
    if bits.shape != (r, r, r) or r % 2:
        raise ShapeError("expected an even cubic grid")
    h = r // 2
    return bits.reshape(h, 2, h, 2, h, 2).any(axis=(1, 3, 5))


def build_pyramid(fine_bits: np.ndarray, n_levels: int = 5) -> OccupancyPyramid:
    levels = [np.asarray(fine_bits, dtype=bool)]
    for _ in range(n_levels - 1):
        levels.append(downsample(levels[-1]))
    return OccupancyPyramid(levels)


@numba.njit(cache=True, nogil=True)
def _chessboard_transform(occ):
    """Exact Chebyshev distance (in voxels) to the nearest set voxel.

    Two raster passes over the 26-neighbourhood; for unit neighbour costs the
    chamfer recurrence is exact for the chessboard metric.
    """
    n = occ.shape[0]
    big = 1 << 20
    d = np.empty((n, n, n), dtype=np.int32)
    for x in range(n):
        for y in range(n):
            for z in range(n):
                d[x, y, z] = 0 if occ[x, y, z] else big
    # forward: neighbours preceding (x, y, z) in raster order
    for x in range(n):
        for y in range(n):
            for z in range(n):
                best = d[x, y, z]
                if best == 0:
                    continue
                for dx in range(-1, 1):
                    xx = x + dx
                    if xx < 0:
                        continue
                    for dy in range(-1, 2):
                        yy = y + dy
                        if yy < 0 or yy >= n:
                            continue
                        if dx == 0 and dy > 0:
                            break
                        for dz in range(-1, 2):
                            zz = z + dz
                            if zz < 0 or zz >= n:
                                continue
                            if dx == 0 and dy == 0 and dz >= 0:
                                break
                            v = d[xx, yy, zz] + 1
                            if v < best:
                                best = v
                d[x, y, z] = best
    # backward: mirror image
    for x in range(n - 1, -1, -1):
        for y in range(n - 1, -1, -1):
            for z in range(n - 1, -1, -1):
                best = d[x, y, z]
                if best == 0:
                    continue
                for dx in range(1, -1, -1):
                    xx = x + dx
                    if xx >= n:
                        continue
                    for dy in range(1, -2, -1):
                        yy = y + dy
                        if yy < 0 or yy >= n:
                            continue
                        if dx == 0 and dy < 0:
                            break
                        for dz in range(1, -2, -1):
                            zz = z + dz
                            if zz < 0 or zz >= n:
                                continue
                            if dx == 0 and dy == 0 and dz <= 0:
                                break
                            v = d[xx, yy, zz] + 1
                            if v < best:
                                best = v
                d[x, y, z] = best
    return d


def chebyshev_distance(occ: np.ndarray) -> np.ndarray:
    occ = np.ascontiguousarray(occ, dtype=np.bool_)
    if occ.ndim != 3 or len(set(occ.shape)) != 1:
        raise ShapeError("expected a cubic grid")
    return _chessboard_transform(occ)


def build_distance_grid(occ: np.ndarray) -> DistanceGrid:
    """``G = min(255, max(0, D - 1))`` with ``D`` the Chebyshev voxel distance."""
    d = chebyshev_distance(occ).astype(np.int64)
    g = np.clip(d - 1, 0, DIST_MAX).astype(np.uint8)
    return DistanceGrid(g)


# probing -----------------------------------------------------------------


@numba.njit(cache=True, inline="always")
def _cell(x, res):
    i = int(np.floor((x + 1.0) * 0.5 * res))
    if i < 0:
        return 0
    if i >= res:
        return res - 1
    return i


@numba.njit(cache=True, inline="always")
def _exit_distance(px, py, pz, dx, dy, dz, res):
    """Ray-parametric distance from p to the far face of its voxel at ``res``."""
    h = 2.0 / res
    best = np.inf
    for a in range(3):
        if a == 0:
            p, d = px, dx
        elif a == 1:
            p, d = py, dy
        else:
            p, d = pz, dz
        i = _cell(p, res)
        lo = -1.0 + i * h
        if d > 0:
            s = (lo + h - p) / d
        elif d < 0:
            s = (lo - p) / d
        else:
            continue
        if s < best:
            best = s
    if best < 0:
        best = 0.0
    return best


def _check_point(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (3,):
        raise ShapeError("expected a single 3D point")
    if np.max(np.abs(x)) > 1.0 + ROI_TOL:
        raise DomainError("point outside the region of interest")
    return x


def occupancy_probe(pyramid: OccupancyPyramid, x, state: MarchState | None = None) -> ProbeResult:
    """Coarse-to-fine probe; stops at the first level whose bit is 0."""
    x = _check_point(x)
    accesses = 0
    for lvl in pyramid.levels[::-1]:
        res = lvl.shape[0]
        idx = tuple(int(_cell(float(c), res)) for c in x)
        accesses += 1
        if not lvl[idx]:
            if state is not None:
                state.occ_grid_accesses += accesses
            return ProbeResult(False, res, accesses)
    if state is not None:
        state.occ_grid_accesses += accesses
    return ProbeResult(True, None, accesses)


def next_step(
    probe: ProbeResult,
    state: MarchState,
    ray,
    grid: DistanceGrid | None = None,
    max_step_rule: bool = False,
    eps: float = EXIT_EPS,
) -> float:
    """Step length after an empty probe at ``ray.origin + state.t * ray.dir``."""
    if probe.occupied:
        raise ValueError("next_step is only defined for empty probes")
    o = np.asarray(ray.origin, np.float64)
    d = np.asarray(ray.dir, np.float64)
    p = o + state.t * d
    s_occ = _exit_distance(p[0], p[1], p[2], d[0], d[1], d[2], probe.exit_level) + eps
    if grid is None or probe.exit_level >= grid.resolution:
        return float(s_occ)
    state.dist_grid_accesses += 1
    r = grid.resolution
    g = int(grid.values[_cell(p[0], r), _cell(p[1], r), _cell(p[2], r)])
    if g > 0:
        s = g * grid.voxel_size
        return float(max(s, s_occ)) if max_step_rule else float(s)
    return float(s_occ)


# marching ----------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _grow(buf, n):
    out = np.empty(max(2 * buf.shape[0], n), dtype=buf.dtype)
    out[: buf.shape[0]] = buf
    return out


@numba.njit(cache=True, nogil=True)
def _march_kernel(origins, dirs, tnear, tfar, data, res, off, dist, dist_res, voxel, step, eps, max_rule, use_dist):
    n_rays = origins.shape[0]
    nlev = res.shape[0]
    cap = max(16, n_rays * 8)
    ts = np.empty(cap, dtype=np.float64)
    steps = np.empty(cap, dtype=np.float64)
    occ = np.empty(cap, dtype=np.bool_)
    occ_acc = np.empty(cap, dtype=np.int32)
    dist_acc = np.empty(cap, dtype=np.int32)
    ray_off = np.zeros(n_rays + 1, dtype=np.int64)
    n = 0
    for r in range(n_rays):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        t = tnear[r]
        t1 = tfar[r]
        n_occ_acc = 0
        n_dist_acc = 0
        while t < t1:
            px = ox + t * dx
            py = oy + t * dy
            pz = oz + t * dz
            exit_res = 0
            for li in range(nlev):
                R = res[li]
                ix = _cell(px, R)
                iy = _cell(py, R)
                iz = _cell(pz, R)
                n_occ_acc += 1
                if data[off[li] + (ix * R + iy) * R + iz] == 0:
                    exit_res = R
                    break
            if n >= ts.shape[0]:
                ts = _grow(ts, n + 1)
                steps = _grow(steps, n + 1)
                occ = _grow(occ, n + 1)
                occ_acc = _grow(occ_acc, n + 1)
                dist_acc = _grow(dist_acc, n + 1)
            ts[n] = t
            if exit_res == 0:
                s = step
                occ[n] = True
            else:
                s_o = _exit_distance(px, py, pz, dx, dy, dz, exit_res) + eps
                s = s_o
                if use_dist and exit_res < dist_res:
                    n_dist_acc += 1
                    g = dist[(_cell(px, dist_res) * dist_res + _cell(py, dist_res)) * dist_res + _cell(pz, dist_res)]
                    if g > 0:
                        s = g * voxel
                        if max_rule and s_o > s:
                            s = s_o
                occ[n] = False
            steps[n] = s
            occ_acc[n] = n_occ_acc
            dist_acc[n] = n_dist_acc
            n += 1
            t += s
        ray_off[r + 1] = n
    return ts[:n], steps[:n], occ[:n], occ_acc[:n], dist_acc[:n], ray_off


@numba.njit(cache=True, nogil=True)
def _fixed_step_kernel(origins, dirs, tnear, tfar, grid, step, jitter):
    n_rays = origins.shape[0]
    R = grid.shape[0]
    cap = max(16, n_rays * 8)
    ts = np.empty(cap, dtype=np.float64)
    ray_off = np.zeros(n_rays + 1, dtype=np.int64)
    n = 0
    for r in range(n_rays):
        t = tnear[r] + jitter[r] * step
        while t < tfar[r]:
            px = origins[r, 0] + t * dirs[r, 0]
            py = origins[r, 1] + t * dirs[r, 1]
            pz = origins[r, 2] + t * dirs[r, 2]
            if grid[_cell(px, R), _cell(py, R), _cell(pz, R)]:
                if n >= ts.shape[0]:
                    ts = _grow(ts, n + 1)
                ts[n] = t
                n += 1
            t += step
        ray_off[r + 1] = n
    return ts[:n], ray_off


@dataclass
class MarchResult:
    """All marching points of a batch of rays, plus the occupied subset.

    ``points_*`` arrays cover every marching point; ``sample_*`` arrays the
    occupied ones (the samples handed to compositing).  Counters in
    ``points_occ_acc``/``points_dist_acc`` are cumulative per ray.
    """

    points_t: np.ndarray
    points_step: np.ndarray
    points_occupied: np.ndarray
    points_occ_acc: np.ndarray
    points_dist_acc: np.ndarray
    point_offsets: np.ndarray
    sample_t: np.ndarray = field(init=False)
    sample_delta: np.ndarray = field(init=False)
    sample_offsets: np.ndarray = field(init=False)
    sample_point_index: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        idx = np.flatnonzero(self.points_occupied)
        self.sample_point_index = idx
        self.sample_t = self.points_t[idx]
        self.sample_delta = self.points_step[idx]
        cum = np.concatenate([[0], np.cumsum(self.points_occupied, dtype=np.int64)])
        per_ray = cum[self.point_offsets[1:]] - cum[self.point_offsets[:-1]]
        self.sample_offsets = np.concatenate([[0], np.cumsum(per_ray)]).astype(np.int64)

    @property
    def n_rays(self) -> int:
        return len(self.point_offsets) - 1

    def counters(self, n_used: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Per-ray counter arrays, truncated at early termination when ``n_used`` is given.

        A ray that stops early is charged for marching points up to and
        including its last composited sample.
        """
        lo, hi = self.point_offsets[:-1], self.point_offsets[1:]
        s_lo = self.sample_offsets[:-1]
        n_occ = self.sample_offsets[1:] - s_lo
        last = hi - 1
        if n_used is not None:
            n_used = np.asarray(n_used, dtype=np.int64)
            cut = (n_used > 0) & (n_used < n_occ)
            last = last.copy()
            last[cut] = self.sample_point_index[s_lo[cut] + n_used[cut] - 1]
            n_occ = np.where(cut, n_used, n_occ)
        some = hi > lo
        safe = np.where(some, last, 0)
        pick = lambda a: np.where(some, a[safe], 0) if len(a) else np.zeros(len(lo), dtype=a.dtype)
        return dict(
            t=np.where(some, pick(self.points_t) + pick(self.points_step), 0.0),
            marching_points=np.where(some, last - lo + 1, 0),
            occupied_points=np.where(some, n_occ, 0),
            occ_grid_accesses=pick(self.points_occ_acc),
            dist_grid_accesses=pick(self.points_dist_acc),
        )

    def ray_states(self, n_used: np.ndarray | None = None) -> list[MarchState]:
        c = self.counters(n_used)
        return [
            MarchState(float(c["t"][r]), int(c["marching_points"][r]), int(c["occupied_points"][r]),
                       int(c["occ_grid_accesses"][r]), int(c["dist_grid_accesses"][r]))
            for r in range(self.n_rays)
        ]

    def skip_segments(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(ray, t0, t1)`` of every empty-space jump."""
        empty = np.flatnonzero(~self.points_occupied)
        ray = np.searchsorted(self.point_offsets, empty, side="right") - 1
        t0 = self.points_t[empty]
        return ray, t0, t0 + self.points_step[empty]


def march(
    origins,
    dirs,
    tnear,
    tfar,
    pyramid: OccupancyPyramid,
    grid: DistanceGrid | None,
    step: float,
    max_step_rule: bool = False,
    eps: float = EXIT_EPS,
) -> MarchResult:
    """March rays through the pyramid; pass ``grid=None`` for the baseline."""
    origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
    tnear = np.atleast_1d(np.asarray(tnear, dtype=np.float64))
    tfar = np.atleast_1d(np.asarray(tfar, dtype=np.float64))
    data, res, off = pyramid.packed_cache()
    if grid is None:
        dist, dist_res, voxel, use = np.zeros(1, np.uint8), 0, 0.0, False
    else:
        dist, dist_res, voxel, use = np.ascontiguousarray(grid.values).ravel(), grid.resolution, grid.voxel_size, True
    out = _march_kernel(origins, dirs, tnear, tfar, data, res, off, dist, dist_res, voxel, float(step), eps, max_step_rule, use)
    return MarchResult(*out)


def march_fixed(origins, dirs, tnear, tfar, grid: np.ndarray, step: float, jitter=None):
    """Training-time marcher: fixed steps, samples wherever the grid bit is set.

    Returns ``(t, offsets)``; every sample covers ``[t, t + step)``.
    """
    origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
    tnear = np.atleast_1d(np.asarray(tnear, dtype=np.float64))
    tfar = np.atleast_1d(np.asarray(tfar, dtype=np.float64))
    jitter = np.zeros(len(origins)) if jitter is None else np.asarray(jitter, dtype=np.float64)
    return _fixed_step_kernel(origins, dirs, tnear, tfar, np.ascontiguousarray(grid, dtype=np.bool_), float(step), jitter)


def _packed_cache(self):
    cached = getattr(self, "_packed", None)
    if cached is None or cached[0] is not self.levels[0]:
        cached = (self.levels[0], self.packed())
        self._packed = cached
    return cached[1]


OccupancyPyramid.packed_cache = _packed_cache


# DDA safety oracle ------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _dda_kernel(o, d, grid, t0, t1, tol, out, only_first):
    """Visit voxels pierced by ``o + t d`` for ``t in (t0, t1)``; record occupied ones.

    A voxel counts when the segment spends more than ``tol`` inside it.
    Returns the number of voxels written to ``out``.
    """
    R = grid.shape[0]
    h = 2.0 / R
    if not t1 > t0:
        return 0
    px = o[0] + t0 * d[0]
    py = o[1] + t0 * d[1]
    pz = o[2] + t0 * d[2]
    idx = np.empty(3, dtype=np.int64)
    stepv = np.empty(3, dtype=np.int64)
    tmax = np.empty(3, dtype=np.float64)
    tdelta = np.empty(3, dtype=np.float64)
    p = (px, py, pz)
    for a in range(3):
        pa = p[a]
        i = int(np.floor((pa + 1.0) / h))
        if i < 0:
            i = 0
        if i >= R:
            i = R - 1
        idx[a] = i
        if d[a] > 0:
            stepv[a] = 1
            tmax[a] = t0 + (-1.0 + (i + 1) * h - pa) / d[a]
            tdelta[a] = h / d[a]
        elif d[a] < 0:
            stepv[a] = -1
            tmax[a] = t0 + (-1.0 + i * h - pa) / d[a]
            tdelta[a] = -h / d[a]
        else:
            stepv[a] = 0
            tmax[a] = np.inf
            tdelta[a] = np.inf
    count = 0
    t_enter = t0
    while t_enter < t1:
        a = 0
        if tmax[1] < tmax[a]:
            a = 1
        if tmax[2] < tmax[a]:
            a = 2
        t_exit = tmax[a]
        seg = min(t_exit, t1) - max(t_enter, t0)
        if seg > tol and grid[idx[0], idx[1], idx[2]]:
            if count < out.shape[0]:
                out[count, 0] = idx[0]
                out[count, 1] = idx[1]
                out[count, 2] = idx[2]
            count += 1
            if only_first:
                return count
        idx[a] += stepv[a]
        if idx[a] < 0 or idx[a] >= R:
            break
        t_enter = t_exit
        tmax[a] += tdelta[a]
    return count


def dda_oracle(ray, occ: np.ndarray, t0: float, t1: float, tol: float = 0.0) -> list[tuple[int, int, int]]:
    """Occupied voxels of ``occ`` that the open segment ``(t0, t1)`` passes through."""
    occ = np.ascontiguousarray(occ, dtype=np.bool_)
    o = np.asarray(ray.origin, dtype=np.float64)
    d = np.asarray(ray.dir, dtype=np.float64)
    cap = 4 * occ.shape[0] + 8
    out = np.zeros((cap, 3), dtype=np.int64)
    n = _dda_kernel(o, d, occ, float(t0), float(t1), float(tol), out, False)
    return [tuple(int(v) for v in row) for row in out[: min(n, cap)]]


@numba.njit(cache=True, nogil=True)
def _count_violations(origins, dirs, ray, t0, t1, grid, tol):
    out = np.zeros((1, 3), dtype=np.int64)
    bad = 0
    for k in range(ray.shape[0]):
        r = ray[k]
        if _dda_kernel(origins[r], dirs[r], grid, t0[k] + tol, t1[k] - tol, 0.0, out, True) > 0:
            bad += 1
    return bad


def count_skip_violations(origins, dirs, result: MarchResult, occ: np.ndarray, tol: float = 2 * EXIT_EPS) -> tuple[int, int]:
    """Number of empty-space jumps that cross an occupied voxel, and the number checked."""
    ray, t0, t1 = result.skip_segments()
    bad = _count_violations(
        np.ascontiguousarray(origins, np.float64),
        np.ascontiguousarray(dirs, np.float64),
        ray.astype(np.int64),
        t0,
        t1,
        np.ascontiguousarray(occ, dtype=np.bool_),
        float(tol),
    )
    return int(bad), len(ray)
