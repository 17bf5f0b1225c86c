import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ngprt.occupancy import (
    DistanceGrid,
    MarchState,
    OccupancyPyramid,
    ProbeResult,
    build_distance_grid,
    build_pyramid,
    chebyshev_distance,
    count_skip_violations,
    dda_oracle,
    downsample,
    march,
    march_fixed,
    next_step,
    occupancy_probe,
)
from ngprt.render import Ray
from ngprt.scene import roi_span

from conftest import unit_dirs


def brute_or(bits, factor):
    r = bits.shape[0] // factor
    out = np.zeros((r, r, r), dtype=bool)
    for i, j, k in np.argwhere(bits):
        out[i // factor, j // factor, k // factor] = True
    return out


def brute_chebyshev(occ):
    pts = np.argwhere(occ)
    idx = np.indices(occ.shape).reshape(3, -1).T
    if len(pts) == 0:
        return np.full(occ.shape, np.iinfo(np.int32).max)
    d = np.full(len(idx), np.iinfo(np.int64).max)
    for s in range(0, len(pts), 256):
        d = np.minimum(d, np.abs(idx[:, None, :] - pts[None, s : s + 256]).max(axis=2).min(axis=1))
    return d.reshape(occ.shape)


def manual_pyramid(res=512, n_levels=5, fill=False):
    return OccupancyPyramid([np.full((res >> k,) * 3, fill, dtype=bool) for k in range(n_levels)])


def cell(x, res):
    return tuple(int(np.clip(np.floor((c + 1) * 0.5 * res), 0, res - 1)) for c in x)


class TestPyramid:
    def test_all_zero(self):
        p = build_pyramid(np.zeros((64, 64, 64), dtype=bool))
        assert p.resolutions == [64, 32, 16, 8, 4]
        assert not any(l.any() for l in p.levels)

    def test_single_origin_bit(self):
        bits = np.zeros((64, 64, 64), dtype=bool)
        bits[0, 0, 0] = True
        for lvl in build_pyramid(bits).levels:
            assert lvl.sum() == 1 and lvl[0, 0, 0]

    def test_matches_brute_force(self, rng):
        bits = rng.random((32, 32, 32)) < 0.01
        p = build_pyramid(bits, 5)
        for k, lvl in enumerate(p.levels):
            np.testing.assert_array_equal(lvl, brute_or(bits, 1 << k))

    def test_rejects_odd(self):
        with pytest.raises(Exception):
            downsample(np.zeros((3, 3, 3), dtype=bool))


class TestDistanceGrid:
    def test_occupied_voxel_is_zero(self, rng):
        occ = rng.random((16, 16, 16)) < 0.05
        assert np.all(build_distance_grid(occ).values[occ] == 0)

    def test_single_voxel_examples_at_256(self):
        occ = np.zeros((256, 256, 256), dtype=bool)
        occ[128, 128, 128] = True
        d = chebyshev_distance(occ)
        g = build_distance_grid(occ).values
        assert d[133, 128, 128] == 5 and g[133, 128, 128] == 4
        assert d[129, 128, 128] == 1 and g[129, 128, 128] == 0
        assert g[128, 128, 128] == 0
        assert g.dtype == np.uint8

    def test_saturates_at_255(self):
        g = build_distance_grid(np.zeros((4, 4, 4), dtype=bool)).values
        assert np.all(g == 255)

    def test_matches_brute_force(self, rng):
        for _ in range(3):
            occ = rng.random((24, 24, 24)) < 0.003
            ref = np.clip(brute_chebyshev(occ) - 1, 0, 255)
            np.testing.assert_array_equal(build_distance_grid(occ).values, ref)

    def test_conservative(self, rng):
        occ = rng.random((20, 20, 20)) < 0.01
        g = build_distance_grid(occ).values.astype(int)
        pts = np.argwhere(occ)
        # no occupied voxel lies within Chebyshev radius G of any voxel
        for p in np.argwhere(g > 0)[::7]:
            assert np.abs(pts - p).max(axis=1).min() > g[tuple(p)]


class TestProbe:
    def test_all_empty(self):
        r = occupancy_probe(manual_pyramid(), np.zeros(3))
        assert r == ProbeResult(False, 32, 1)

    def test_fully_occupied(self):
        state = MarchState()
        r = occupancy_probe(manual_pyramid(fill=True), np.array([0.3, -0.2, 0.9]), state)
        assert r.occupied and r.accesses == 5 and state.occ_grid_accesses == 5

    def test_coarse_levels_only(self):
        x = np.array([0.11, -0.52, 0.73])
        p = manual_pyramid()
        for lvl in p.levels[2:]:  # 128, 64, 32
            lvl[cell(x, lvl.shape[0])] = True
        r = occupancy_probe(p, x)
        assert r == ProbeResult(False, 256, 4)


class TestNextStep:
    def setup_method(self):
        self.ray = Ray(np.array([0.013, 0.017, 0.021]), np.array([1.0, 0.0, 0.0]), 0.0, 1.0)
        values = np.zeros((256, 256, 256), dtype=np.uint8)
        values[cell(self.ray.origin, 256)] = 10
        self.grid = DistanceGrid(values)

    def test_finest_exit_skips_grid(self):
        state = MarchState()
        s = next_step(ProbeResult(False, 512, 5), state, self.ray, self.grid)
        assert state.dist_grid_accesses == 0
        expected = (-1 + (cell(self.ray.origin, 512)[0] + 1) * 2 / 512) - 0.013
        assert s == pytest.approx(expected, abs=2e-6)

    def test_distance_jump(self):
        state = MarchState()
        s = next_step(ProbeResult(False, 64, 3), state, self.ray, self.grid)
        assert s == pytest.approx(0.078125, abs=1e-15)
        assert state.dist_grid_accesses == 1

    def test_zero_distance_falls_back(self):
        self.grid.values[...] = 0
        state = MarchState()
        s = next_step(ProbeResult(False, 64, 3), state, self.ray, self.grid)
        expected = (-1 + (cell(self.ray.origin, 64)[0] + 1) * 2 / 64) - 0.013
        assert s == pytest.approx(expected, abs=2e-6)

    def test_max_step_rule(self):
        self.grid.values[...] = 1
        s_plain = next_step(ProbeResult(False, 32, 1), MarchState(), self.ray, self.grid)
        s_max = next_step(ProbeResult(False, 32, 1), MarchState(), self.ray, self.grid, max_step_rule=True)
        assert s_plain == pytest.approx(2 / 256)
        assert s_max > s_plain

    def test_occupied_probe_rejected(self):
        with pytest.raises(ValueError):
            next_step(ProbeResult(True, None, 5), MarchState(), self.ray)


class TestMarch:
    def test_empty_scene(self, rng):
        p = build_pyramid(np.zeros((64, 64, 64), dtype=bool))
        o = rng.uniform(-3, 3, (50, 3))
        d = -o / np.linalg.norm(o, axis=1, keepdims=True)
        tn, tf, _ = roi_span(o, d)
        mr = march(o, d, tn, tf, p, None, 2 * np.sqrt(3) / 64)
        c = mr.counters()
        assert len(mr.sample_t) == 0
        assert np.all(c["occupied_points"] == 0)
        np.testing.assert_array_equal(c["marching_points"], np.diff(mr.point_offsets))
        assert np.all(c["marching_points"] >= 1)

    def test_fully_occupied_spacing(self):
        p = manual_pyramid(fill=True)
        step = 2 * np.sqrt(3) / 512
        o = np.array([[-3.0, 0.1, 0.2]])
        d = np.array([[1.0, 0.0, 0.0]])
        tn, tf, _ = roi_span(o, d)
        mr = march(o, d, tn, tf, p, build_distance_grid(downsample(p.finest)), step)
        np.testing.assert_allclose(np.diff(mr.sample_t), step, rtol=0, atol=1e-12)
        assert mr.counters()["occupied_points"][0] == len(mr.sample_t) == int(np.ceil(2 / step))

    def test_distance_grid_keeps_occupied_samples(self, rng):
        occ = np.zeros((64, 64, 64), dtype=bool)
        occ[20:24, 30:40, 10:50] = True
        p = build_pyramid(occ)
        grid = build_distance_grid(downsample(occ))
        o = 3 * unit_dirs(rng, 300)
        d = unit_dirs(rng, 300)
        tn, tf, hit = roi_span(o, d)
        o, d, tn, tf = o[hit], d[hit], tn[hit], tf[hit]
        a = march(o, d, tn, tf, p, None, 2 * np.sqrt(3) / 64).counters()
        b = march(o, d, tn, tf, p, grid, 2 * np.sqrt(3) / 64).counters()
        assert b["marching_points"].sum() <= a["marching_points"].sum()
        assert abs(int(b["occupied_points"].sum()) - int(a["occupied_points"].sum())) <= 0.02 * a["occupied_points"].sum()

    def test_counters_truncate_at_early_stop(self):
        p = manual_pyramid(64, fill=True)
        o, d = np.array([[-3.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]])
        tn, tf, _ = roi_span(o, d)
        mr = march(o, d, tn, tf, p, None, 0.0625)
        full = mr.counters()
        cut = mr.counters(np.array([5]))
        assert full["occupied_points"][0] == 32
        assert cut["occupied_points"][0] == 5 and cut["marching_points"][0] == 5
        states = mr.ray_states(np.array([5]))
        assert states[0].occupied_points == 5

    def test_skip_safety_random_grids(self, rng):
        bad = checked = 0
        for _ in range(5):
            occ = rng.random((64, 64, 64)) < 0.003
            p = build_pyramid(occ)
            grid = build_distance_grid(downsample(occ))
            o = rng.uniform(-1, 1, (300, 3))
            d = unit_dirs(rng, 300)
            tn, tf, _ = roi_span(o, d)
            mr = march(o, d, tn, tf, p, grid, 2 * np.sqrt(3) / 64)
            b, c = count_skip_violations(o, d, mr, occ)
            bad += b
            checked += c
        assert checked > 1000 and bad == 0

    def test_march_fixed(self):
        grid = np.zeros((8, 8, 8), dtype=bool)
        grid[4:, :, :] = True
        t, off = march_fixed(np.array([[-1.0, 0.1, 0.1]]), np.array([[1.0, 0.0, 0.0]]), [0.0], [2.0], grid, 0.1)
        assert off.tolist() == [0, len(t)]
        assert np.all(t >= 1.0 - 1e-12)
        np.testing.assert_allclose(np.diff(t), 0.1)


class TestDDA:
    def setup_method(self):
        self.occ = np.ones((8, 8, 8), dtype=bool)

    def test_inside_one_voxel(self):
        ray = Ray(np.array([-0.9, -0.9, -0.9]), np.array([1.0, 0.0, 0.0]), 0, 1)
        assert dda_oracle(ray, self.occ, 0.0, 0.05) == [(0, 0, 0)]

    def test_axis_segment_four_voxels(self):
        ray = Ray(np.array([-0.9, 0.1, 0.1]), np.array([1.0, 0.0, 0.0]), 0, 1)
        hits = dda_oracle(ray, self.occ, 0.0, 4 * 0.25)
        assert 4 <= len(hits) <= 5
        assert [h[0] for h in hits] == list(range(len(hits)))
        assert all(h[1:] == (4, 4) for h in hits)

    def test_degenerate(self):
        ray = Ray(np.array([0.1, 0.1, 0.1]), np.array([1.0, 0.0, 0.0]), 0, 1)
        assert dda_oracle(ray, self.occ, 0.3, 0.3) == []

    def test_only_occupied_reported(self):
        occ = np.zeros((8, 8, 8), dtype=bool)
        occ[5, 4, 4] = True
        ray = Ray(np.array([-1.0, 0.1, 0.1]), np.array([1.0, 0.0, 0.0]), 0, 2)
        assert dda_oracle(ray, occ, 0.0, 2.0) == [(5, 4, 4)]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_agrees_with_dense_sampling(self, seed):
        rng = np.random.default_rng(seed)
        occ = rng.random((8, 8, 8)) < 0.1
        o = rng.uniform(-1, 1, 3)
        d = unit_dirs(rng, 1)[0]
        t1 = 0.8
        ray = Ray(o, d, 0.0, t1)
        ts = np.linspace(0, t1, 4001)[1:-1]
        pts = o + ts[:, None] * d
        inside = np.all(np.abs(pts) < 1, axis=1)
        idx = np.clip(np.floor((pts[inside] + 1) * 4).astype(int), 0, 7)
        sampled = {tuple(v) for v in idx if occ[tuple(v)]}
        found = set(dda_oracle(ray, occ, 0.0, t1))
        assert sampled <= found
