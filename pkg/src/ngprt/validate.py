"""Fast self-checks of the pipeline's invariants against independent oracles.

Each check returns ``(ok, detail)``.  They use small sizes so the whole
suite runs in well under a minute; the test suite covers the same ground at
full size.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from ngprt.config import desk_config
from ngprt.fusion import FusionMode, Fuser, count_macs
from ngprt.nn import grad_check, sh_encode


def _sh_addition():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(100, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    y = sh_encode(d) ** 2
    spread = max(np.ptp(y[:, l * l : (l + 1) ** 2].sum(axis=1)) for l in range(4))
    return spread < 1e-6, f"max per-degree spread {spread:.2e}"


def _grad_check():
    from ngprt.config import Config
    from ngprt.model import NGPRTModel, RayBatch

    worst = 0.0
    for mode in ("SEPARATE_ATT_V", "SHARED_ATT_INV", "MLP"):
        cfg = Config(
            coarse_resolution=8, n_coarse_levels=3, coarse_base_resolution=2, coarse_table_len=64,
            fine_table_len=128, fine_resolutions=[16, 32], grid_resolution=16, hidden_width=8,
            fusion_mode=mode, dtype="float64",
        )
        rng = np.random.default_rng(1)
        model = NGPRTModel(cfg, rng)
        for _, v in model.tape:
            v[...] = rng.normal(0.0, 0.3, v.shape)
        o = rng.uniform(-0.5, 0.5, (4, 3))
        d = rng.normal(size=(4, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        t = np.concatenate([np.arange(4) * 0.1 for _ in range(4)])
        batch = RayBatch(o, d, rng.uniform(0, 1, (4, 3)), t, np.full(16, 0.1), np.arange(0, 17, 4))

        def fn(backward):
            loss, _, cache = model.forward(batch, 0.3)
            if backward:
                model.backward(batch, cache)
            return loss, model.kink_pattern(batch, cache)

        worst = max(worst, grad_check(fn, model.tape, max_components=16))
    return worst < 1e-4, f"max relative error {worst:.2e}"


def _distance_transform():
    from ngprt.occupancy import build_distance_grid

    rng = np.random.default_rng(2)
    occ = rng.random((16, 16, 16)) < 0.01
    g = build_distance_grid(occ).values.astype(int)
    pts = np.argwhere(occ)
    idx = np.indices(occ.shape).reshape(3, -1).T
    if len(pts):
        cheb = np.abs(idx[:, None, :] - pts[None]).max(axis=2).min(axis=1)
        ref = np.clip(cheb - 1, 0, 255).reshape(occ.shape)
    else:
        ref = np.full(occ.shape, 255)
    bad = int(np.sum(g != ref))
    return bad == 0, f"{bad} mismatched voxels"


def _skip_safety():
    from ngprt.occupancy import build_distance_grid, build_pyramid, count_skip_violations, downsample, march
    from ngprt.scene import roi_span

    rng = np.random.default_rng(3)
    bad = checked = 0
    for _ in range(5):
        occ = rng.random((64, 64, 64)) < 0.002
        pyr = build_pyramid(occ, 5)
        grid = build_distance_grid(downsample(occ))
        o = rng.uniform(-1, 1, (200, 3))
        d = rng.normal(size=(200, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        tn, tf, _ = roi_span(o, d)
        mr = march(o, d, tn, tf, pyr, grid, 2 * np.sqrt(3) / 64)
        b, c = count_skip_violations(o, d, mr, occ)
        bad += b
        checked += c
    return bad == 0, f"{bad} unsafe skips of {checked}"


def _compositing():
    from ngprt.render import composite

    rng = np.random.default_rng(4)
    n = 64
    off = np.arange(0, 64 * n + 1, 64)
    acc = composite(rng.normal(0, 2, 64 * n), rng.normal(size=(64 * n, 3)), rng.normal(size=(64 * n, 4)), rng.uniform(0.01, 0.1, 64 * n), off)
    s = np.add.reduceat(acc.weights, off[:-1]) + acc.final_T
    err = float(np.abs(s - 1).max())
    ok = err < 1e-5 and acc.weights.min() >= 0
    return ok, f"max |sum w + T - 1| = {err:.1e}"


def _fusion_collapse():
    rng = np.random.default_rng(5)
    coarse = rng.normal(size=(1000, 8)).astype(np.float32)
    fine = rng.normal(size=(1000, 2, 8)).astype(np.float32)
    a = np.ones((1000, 4), dtype=np.float32)
    x = Fuser.create(FusionMode.SEPARATE_ATT_V, 2).fuse(coarse, fine, a)
    y = Fuser.create(FusionMode.SUM, 2).fuse(coarse, fine)
    ratio = count_macs(FusionMode.SEPARATE_ATT_V, 2) / count_macs(FusionMode.MLP, 2, [24, 64, 12])
    return bool(np.array_equal(x, y)) and ratio < 0.1, f"bitwise equal, MAC ratio {ratio:.4f}"


def _baked_roundtrip():
    from ngprt.bake import bake, load_baked, save_baked
    from ngprt.model import NGPRTModel

    cfg = desk_config(coarse_resolution=16, coarse_base_resolution=4, grid_resolution=32, fine_table_len=2**12, coarse_table_len=2**12)
    model = NGPRTModel(cfg, np.random.default_rng(6))
    model.train_grid[:] = False
    model.train_grid[10:20, 10:20, 12:16] = True
    scene = bake(model)
    with tempfile.TemporaryDirectory() as tmp:
        p1, p2 = Path(tmp) / "a.ngrt", Path(tmp) / "b.ngrt"
        save_baked(scene, p1)
        save_baked(load_baked(p1), p2)
        same = p1.read_bytes() == p2.read_bytes()
    return same, "save/load/save byte-identical" if same else "round trip differs"


def _param_formula():
    from ngprt.bake import report_params
    from ngprt.config import full_config

    r = report_params(full_config())
    ok = round(r["total"] / 1e6, 2) == 99.32 and round(r["comparator"] / 1e6, 1) == 122.1
    return ok, f"{r['total'] / 1e6:.2f} M vs comparator {r['comparator'] / 1e6:.1f} M"


CHECKS = {
    "sh_addition": _sh_addition,
    "grad_check": _grad_check,
    "distance_transform": _distance_transform,
    "skip_safety": _skip_safety,
    "compositing": _compositing,
    "fusion_collapse": _fusion_collapse,
    "baked_roundtrip": _baked_roundtrip,
    "param_formula": _param_formula,
}


def run_all(report=print) -> bool:
    ok_all = True
    for name, check in CHECKS.items():
        try:
            ok, detail = check()
        except Exception as exc:  # a crash is a failure, not an abort
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= bool(ok)
        report(f"{'PASS' if ok else 'FAIL'}  {name:20s} {detail}")
    return ok_all
