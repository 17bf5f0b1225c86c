"""Paired marcher benchmark on analytic scenes.

Both marchers see the same rays over the same occupancy pyramid; samples
are shaded from the analytic scene directly so the comparison isolates
marching.  Counters are charged up to early termination.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from ngprt.occupancy import build_distance_grid, build_pyramid, downsample, march
from ngprt.render import EARLY_STOP_T, composite
from ngprt.scene import SynthScene, get_scene, psnr, roi_span

BENCH_FIELDS = ("scene", "marcher", "rays", "mean_marching", "mean_occupied", "mean_occ_accesses", "mean_dist_accesses", "ms_per_frame")


@dataclass
class BenchReport:
    rows: list[dict]
    rgb: dict[str, np.ndarray]

    def row(self, marcher: str) -> dict:
        return next(r for r in self.rows if r["marcher"] == marcher)

    @property
    def marching_reduction(self) -> float:
        base = self.row("occupancy")["mean_marching"]
        return 1.0 - self.row("distance")["mean_marching"] / base

    @property
    def occupied_change(self) -> float:
        base = self.row("occupancy")["mean_occupied"]
        return abs(self.row("distance")["mean_occupied"] - base) / max(base, 1e-12)

    @property
    def render_psnr(self) -> float:
        return psnr(self.rgb["occupancy"], self.rgb["distance"])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{r[k]:.6g}" if isinstance(r[k], float) else r[k]) for k in BENCH_FIELDS})


def bench_rays(n: int, rng: np.random.Generator, radius: float = 3.0):
    """Rays from random points on a sphere towards random targets near the centre."""
    origins, dirs, tn, tf = [], [], [], []
    have = 0
    while have < n:
        m = 2 * (n - have) + 16
        v = rng.normal(size=(m, 3))
        eye = radius * v / np.linalg.norm(v, axis=1, keepdims=True)
        target = rng.uniform(-0.6, 0.6, size=(m, 3))
        d = target - eye
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        tnear, tfar, hit = roi_span(eye, d)
        origins.append(eye[hit])
        dirs.append(d[hit])
        tn.append(tnear[hit])
        tf.append(tfar[hit])
        have += int(hit.sum())
    cat = lambda a: np.concatenate(a)[:n]
    return cat(origins), cat(dirs), cat(tn), cat(tf)


def shade_analytic(scene: SynthScene, o, d, mr, early_stop: float = EARLY_STOP_T):
    """Composite analytic density/colour at marched samples; returns ``(rgb, n_used)``."""
    ray = np.repeat(np.arange(len(o)), np.diff(mr.sample_offsets))
    x = o[ray] + mr.sample_t[:, None] * d[ray]
    sigma, col = scene.query(x, d[ray])
    pre = np.log(np.maximum(sigma, 1e-300))
    acc = composite(pre, col, np.zeros((len(x), 4)), mr.sample_delta, mr.sample_offsets, early_stop=early_stop)
    return acc.C_d, acc.n_used


def run_bench(scene_name: str = "synth_slab", n_rays: int = 1000, seed: int = 0, resolution: int = 512, levels: int = 5, repeats: int = 3) -> BenchReport:
    scene = get_scene(scene_name)
    occ = scene.voxelize(resolution)
    pyramid = build_pyramid(occ, levels)
    grid = build_distance_grid(downsample(occ))
    step = 2.0 * np.sqrt(3.0) / resolution
    o, d, tn, tf = bench_rays(n_rays, np.random.default_rng(seed))
    rows, rgbs = [], {}
    for name, g in (("occupancy", None), ("distance", grid)):
        march(o[:1], d[:1], tn[:1], tf[:1], pyramid, g, step)  # compile outside the timing
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            mr = march(o, d, tn, tf, pyramid, g, step)
            rgb, used = shade_analytic(scene, o, d, mr)
            best = min(best, time.perf_counter() - t0)
        c = mr.counters(used)
        rgbs[name] = rgb
        rows.append(
            dict(
                scene=scene_name,
                marcher=name,
                rays=len(o),
                mean_marching=float(c["marching_points"].mean()),
                mean_occupied=float(c["occupied_points"].mean()),
                mean_occ_accesses=float(c["occ_grid_accesses"].mean()),
                mean_dist_accesses=float(c["dist_grid_accesses"].mean()),
                ms_per_frame=1000.0 * best,
            )
        )
    return BenchReport(rows, rgbs)
