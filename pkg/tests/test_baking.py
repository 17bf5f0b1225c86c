import copy

import numpy as np
import pytest

from ngprt.bake import (
    build_render_assets,
    bake,
    coarse_decode,
    evaluate_corner,
    header_echo,
    live_scene,
    load_baked,
    render_rays,
    report_params,
    retained_corners,
    save_baked,
)
from ngprt.config import full_config
from ngprt.errors import BakeError, DomainError, LoadError
from ngprt.model import NGPRTModel, corner_linear, corner_positions
from ngprt.occupancy import downsample
from ngprt.scene import frame_rays
from ngprt.train import train_loop

from conftest import small_desk_config


@pytest.fixture(scope="module")
def trained(tiny_dataset):
    return train_loop(small_desk_config(), tiny_dataset, iterations=30).model


@pytest.fixture(scope="module")
def baked(trained):
    return bake(trained)


def points_in_occupied_voxels(occ, rng, n):
    idx = np.argwhere(occ)
    pick = idx[rng.integers(0, len(idx), n)]
    return (pick + rng.uniform(0, 1, (n, 3))) * (2.0 / occ.shape[0]) - 1.0


class TestEvaluateCorner:
    def test_zero_model(self):
        m = NGPRTModel(small_desk_config())
        for _, v in m.tape:
            v[...] = 0
        out = evaluate_corner(m, (3, 7, 11))
        assert out.shape == (12,)
        np.testing.assert_array_equal(out, 0)

    def test_width(self):
        assert evaluate_corner(NGPRTModel(small_desk_config()), (0, 0, 0)).shape == (8 + 2 * 2,)

    def test_off_lattice(self):
        m = NGPRTModel(small_desk_config())
        with pytest.raises(DomainError):
            evaluate_corner(m, (0, 17, 0))
        with pytest.raises(DomainError):
            evaluate_corner(m, (-1, 0, 0))

    def test_matches_training_path(self, trained):
        c = np.array([5, 9, 2])
        lin = corner_linear(c[None], trained.L_C)
        np.testing.assert_array_equal(
            evaluate_corner(trained, c), trained.eval_corners(lin, np.float64)[0].astype(np.float32)
        )

    def test_matches_independent_recompute(self, trained, rng):
        for c in rng.integers(0, trained.L_C + 1, (10, 3)):
            pos = corner_positions(c[None], trained.L_C)
            feats = trained.enc.encode_coarse(pos).astype(np.float64)
            w0, w1 = (w.astype(np.float64) for w in trained.aux.weights)
            b0, b1 = (b.astype(np.float64) for b in trained.aux.biases)
            ref = np.maximum(feats @ w0 + b0, 0) @ w1 + b1
            np.testing.assert_allclose(evaluate_corner(trained, c), ref[0], rtol=1e-6, atol=1e-7)


class TestCoarseDecode:
    def test_on_corner(self, trained):
        c = np.array([4, 8, 12])
        x = corner_positions(c[None], trained.L_C)[0]
        f, a = coarse_decode(trained, x)
        row = evaluate_corner(trained, c)
        np.testing.assert_allclose(f, row[:8], atol=1e-7)
        np.testing.assert_allclose(a, 1 / (1 + np.exp(-row[8:].astype(np.float64))), atol=1e-7)

    def test_constant_field(self, baked, rng):
        b = copy.copy(baked)
        n = (b.L_C + 1) ** 3
        b.corner_ids = np.arange(n)
        b.corner_data = np.tile(np.arange(12, dtype=np.float32) - 4, (n, 1))
        f, a = coarse_decode(b, rng.uniform(-1, 1, (200, 3)))
        np.testing.assert_allclose(f, np.broadcast_to(np.arange(8) - 4.0, (200, 8)), atol=1e-6)
        np.testing.assert_allclose(a, np.broadcast_to(1 / (1 + np.exp(-np.arange(4, 8.0))), (200, 4)), atol=1e-6)

    def test_outside_roi(self, trained):
        with pytest.raises(DomainError):
            coarse_decode(trained, np.array([0.0, 1.2, 0.0]))

    def test_live_and_baked_agree_in_occupied_space(self, trained, baked, rng):
        occ, _, _ = build_render_assets(trained)
        x = points_in_occupied_voxels(occ, rng, 10_000)
        fl, al = coarse_decode(trained, x)
        fb, ab = coarse_decode(baked, x)
        assert np.max(np.abs(fl - fb)) <= 1e-6
        assert np.max(np.abs(al - ab)) <= 1e-6


class TestBake:
    def test_all_empty(self):
        m = NGPRTModel(small_desk_config())
        m.train_grid[:] = False
        b = bake(m)
        assert len(b.corner_ids) == 0 and b.corner_fraction == 0.0
        assert not any(lvl.any() for lvl in b.pyramid.levels)
        assert np.all(b.grid.values == 255)

    def test_non_finite_model(self):
        m = NGPRTModel(small_desk_config())
        m.aux.weights[0][0, 0] = np.nan
        with pytest.raises(BakeError):
            bake(m)

    def test_slab_corner_fraction(self):
        cfg = small_desk_config()
        m = NGPRTModel(cfg)
        R = cfg.grid_resolution
        lo, hi = 12, 18
        m.train_grid[:] = False
        m.train_grid[:, :, lo:hi] = True
        b = bake(m, cull=False)
        # dilated slab thickness in coarse voxels, plus one plane of corners
        thickness = (hi - lo + 2) * 2.0 / R
        expected = (thickness * cfg.coarse_resolution / 2 + 1) / (cfg.coarse_resolution + 1)
        assert expected / 2 <= b.corner_fraction <= 2 * expected

    def test_retained_corners_touch_occupied_voxels(self):
        occ = np.zeros((8, 8, 8), bool)
        occ[2, 3, 4] = True
        ids = retained_corners(occ, 8)
        assert len(ids) == 8
        assert set(ids) == set(corner_linear(np.array([[2 + i, 3 + j, 4 + k] for i in (0, 1) for j in (0, 1) for k in (0, 1)]), 8))

    def test_fine_tables_and_psi_copied(self, trained, baked):
        for a, b in zip(baked.enc.fine_levels, trained.enc.fine_levels):
            np.testing.assert_array_equal(a.entries, b.entries.astype(np.float32))
        for a, b in zip(baked.psi.weights, trained.psi.weights):
            np.testing.assert_array_equal(a, b.astype(np.float32))

    def test_distance_zero_set_is_downsampled_occupancy(self, trained, baked):
        occ, _, _ = build_render_assets(trained)
        np.testing.assert_array_equal(baked.grid.values == 0, downsample(occ))

    def test_default_zero_corners_match_explicit_zeros(self, baked, tiny_dataset):
        dense = copy.copy(baked)
        extra = np.setdiff1d(np.arange((baked.L_C + 1) ** 3), baked.corner_ids)[::3]
        dense.corner_ids = np.concatenate([baked.corner_ids, extra])
        dense.corner_data = np.concatenate([baked.corner_data, np.zeros((len(extra), baked.corner_data.shape[1]), np.float32)])
        order = np.argsort(dense.corner_ids)
        dense.corner_ids, dense.corner_data = dense.corner_ids[order], dense.corner_data[order]
        r = frame_rays(tiny_dataset, 0)
        a = render_rays(baked, r["origins"], r["dirs"], r["tnear"], r["tfar"])
        b = render_rays(dense, r["origins"], r["dirs"], r["tnear"], r["tfar"])
        np.testing.assert_array_equal(a.rgb, b.rgb)

    def test_render_parity(self, trained, baked, tiny_dataset):
        live = live_scene(trained, baked)
        for k in range(len(tiny_dataset.frames)):
            r = frame_rays(tiny_dataset, k)
            a = render_rays(live, r["origins"], r["dirs"], r["tnear"], r["tfar"], mode="bake")
            b = render_rays(baked, r["origins"], r["dirs"], r["tnear"], r["tfar"])
            assert np.max(np.abs(a.rgb - b.rgb)) <= 1e-5

    def test_level_decomposition_sums_to_full(self, baked, tiny_dataset):
        r = frame_rays(tiny_dataset, 1)
        args = (r["origins"], r["dirs"], r["tnear"], r["tfar"])
        full = render_rays(baked, *args, early_stop=None)
        parts = [render_rays(baked, *args, keep_level=k, early_stop=None) for k in range(baked.L + 1)]
        np.testing.assert_allclose(sum(p.C_d for p in parts), full.C_d, atol=1e-5)
        np.testing.assert_allclose(sum(p.F for p in parts), full.F, atol=1e-5)


class TestReportParams:
    def test_nominal(self):
        p = report_params(full_config())
        assert round(p["total"] / 1e6, 2) == 99.32
        assert round(p["comparator"] / 1e6, 1) == 122.1

    def test_sparsity_zero(self):
        p = report_params(full_config(), sparsity=0.0)
        assert p["total"] == 8 * 2 * 2**22

    def test_measured(self, baked, trained):
        p = report_params(trained.cfg, baked.corner_fraction)
        assert p["coarse"] == pytest.approx(12 * baked.corner_fraction * trained.L_C**3)


class TestFileFormat:
    def test_round_trip_byte_identical(self, baked, tmp_path):
        save_baked(baked, tmp_path / "a.ngrt")
        save_baked(load_baked(tmp_path / "a.ngrt"), tmp_path / "b.ngrt")
        assert (tmp_path / "a.ngrt").read_bytes() == (tmp_path / "b.ngrt").read_bytes()

    def test_loaded_scene_renders_identically(self, baked, tmp_path, tiny_dataset):
        save_baked(baked, tmp_path / "a.ngrt")
        loaded = load_baked(tmp_path / "a.ngrt")
        r = frame_rays(tiny_dataset, 2)
        a = render_rays(baked, r["origins"], r["dirs"], r["tnear"], r["tfar"])
        b = render_rays(loaded, r["origins"], r["dirs"], r["tnear"], r["tfar"])
        np.testing.assert_array_equal(a.rgb, b.rgb)

    def test_corrupt_payload_byte(self, baked, tmp_path):
        p = tmp_path / "a.ngrt"
        save_baked(baked, p)
        buf = bytearray(p.read_bytes())
        buf[len(buf) // 2] ^= 0xFF
        p.write_bytes(bytes(buf))
        with pytest.raises(LoadError, match="checksum") as exc:
            load_baked(p)
        assert exc.value.offset > 0

    def test_truncated(self, baked, tmp_path):
        p = tmp_path / "a.ngrt"
        save_baked(baked, p)
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(LoadError, match="truncated"):
            load_baked(p)

    def test_bad_magic_and_version(self, baked, tmp_path):
        p = tmp_path / "a.ngrt"
        save_baked(baked, p)
        buf = bytearray(p.read_bytes())
        p.write_bytes(b"XXXX" + bytes(buf[4:]))
        with pytest.raises(LoadError, match="magic"):
            load_baked(p)
        buf[4] = 9
        p.write_bytes(bytes(buf))
        with pytest.raises(LoadError, match="version"):
            load_baked(p)

    def test_header_echo_matches_config(self, baked, trained, tmp_path):
        p = tmp_path / "a.ngrt"
        save_baked(baked, p)
        h = header_echo(p)
        cfg = trained.cfg
        assert h["version"] == 1
        assert h["L_C"] == cfg.coarse_resolution
        assert h["L"] == cfg.n_fine_levels
        assert h["fine_resolutions"] == list(cfg.fine_level_resolutions)
        assert h["table_lens"] == [lvl.table_len for lvl in trained.enc.coarse_levels + trained.enc.fine_levels]
        assert h["fusion_mode"] == cfg.fusion_mode

    def test_bake_deterministic(self, trained, tmp_path):
        save_baked(bake(trained), tmp_path / "a.ngrt")
        save_baked(bake(trained), tmp_path / "b.ngrt")
        assert (tmp_path / "a.ngrt").read_bytes() == (tmp_path / "b.ngrt").read_bytes()
