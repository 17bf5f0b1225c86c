"""Optimisation: schedules, Adam, the step-size tuner, occupancy upkeep and the loop."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from ngprt.config import Config
from ngprt.errors import ConfigError, LoadError, TrainingError
from ngprt.model import NGPRTModel, RayBatch
from ngprt.occupancy import march_fixed
from ngprt.scene import PosedDataset, generate_rays

CHECKPOINT_VERSION = 1


# schedules ------------------------------------------------------------------


def lr_at(cfg: Config, it: int) -> float:
    """Linear warm-up to ``cfg.lr`` then linear decay to zero at ``cfg.iterations``."""
    warm = cfg.lr_warmup_iters
    if it < warm:
        return cfg.lr * it / warm
    span = cfg.iterations - warm
    if span <= 0:
        return cfg.lr if it <= warm else 0.0
    return cfg.lr * max(0.0, (cfg.iterations - it) / span)


def eta_at(cfg: Config, it: int) -> float:
    if cfg.eta_warmup_iters <= 0:
        return cfg.eta
    return cfg.eta * min(1.0, it / cfg.eta_warmup_iters)


# Adam -------------------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _count_nonfinite(g):
    bad = 0
    for i in range(g.shape[0]):
        if not np.isfinite(g[i]):
            bad += 1
    return bad


@numba.njit(cache=True, nogil=True, fastmath=True, error_model="numpy")
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, c1, c2, clear):
    # arithmetic in the parameter dtype, and no zero-division check, so float32 tables vectorise
    t = p.dtype.type
    step = t(lr / c1)
    inv_c2 = t(1.0 / c2)
    b1_, b2_, eps_, one = t(b1), t(b2), t(eps), t(1.0)
    for i in range(p.shape[0]):
        gi = g[i]
        mi = b1_ * m[i] + (one - b1_) * gi
        vi = b2_ * v[i] + (one - b2_) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= step * mi / (np.sqrt(vi * inv_c2) + eps_)
        if clear:
            g[i] = 0


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: Config) -> "OptimState":
        return cls(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def adam_step(state: OptimState, tape, lr: float, clear_grads: bool = False) -> None:
    """One bias-corrected Adam update of every parameter on ``tape`` in place.

    ``clear_grads`` zeroes each gradient as it is consumed, saving a separate
    pass over the tables before the next step.
    """
    for name, g in tape.grads.items():
        bad = _count_nonfinite(g.reshape(-1))
        if bad:
            raise TrainingError(f"non-finite gradient in {name!r} ({bad} entries) at step {state.step + 1}")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for name, p in tape:
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        _adam_kernel(
            p.reshape(-1), tape.grads[name].reshape(-1), state.m[name].reshape(-1), state.v[name].reshape(-1),
            lr, state.beta1, state.beta2, state.eps, c1, c2, clear_grads,
        )


# step-size tuner ------------------------------------------------------------------


@dataclass
class StepTuner:
    gamma: float = 1.0
    gamma_min: float = 0.2217
    kappa: float = 0.001
    n_min: float = 3.0

    @classmethod
    def from_config(cls, cfg: Config) -> "StepTuner":
        return cls(cfg.gamma_init, cfg.gamma_min, cfg.kappa, cfg.n_min)

    def update(self, n_batch_mean: float) -> float:
        if n_batch_mean < 0:
            raise ValueError("mean sample count must be non-negative")
        if n_batch_mean >= self.n_min:
            self.gamma = min(1.0, (1.0 + self.kappa) * self.gamma)
        else:
            self.gamma = max(self.gamma_min, (1.0 - self.kappa) * self.gamma)
        return self.gamma


def autotune_gamma(tuner: StepTuner, n_batch_mean: float) -> float:
    return tuner.update(n_batch_mean)


# training occupancy ------------------------------------------------------------------


def update_occupancy(model, rng: np.random.Generator, decay: float = 0.95, threshold: float = 0.005, n_slabs: int = 8):
    """Refresh one z-slab (1/``n_slabs`` of the voxels) of the training grid.

    ``model`` provides ``density(points)``, ``density_cache``, ``train_grid``,
    ``occ_calls`` and ``cfg.base_step``.  Voxels of the visited slab take
    ``max(decay * d, sigma)`` at a jittered point inside them; on the first
    visit the cache (initially infinite) is replaced by ``sigma``.  A voxel is
    occupied when a base step through density ``d`` has opacity above
    ``threshold``, so voxels not yet visited stay occupied.
    """
    grid = model.train_grid
    R = grid.shape[0]
    k = model.occ_calls % n_slabs
    z0, z1 = (k * R) // n_slabs, ((k + 1) * R) // n_slabs
    idx = np.stack(np.meshgrid(np.arange(R), np.arange(R), np.arange(z0, z1), indexing="ij"), axis=-1).reshape(-1, 3)
    pts = (idx + rng.uniform(0.0, 1.0, idx.shape)) * (2.0 / R) - 1.0
    sigma = model.density(np.clip(pts, -1.0, 1.0)).reshape(R, R, z1 - z0).astype(np.float32)
    cache = model.density_cache
    old = cache[:, :, z0:z1]
    cache[:, :, z0:z1] = np.where(np.isfinite(old), np.maximum(np.float32(decay) * old, sigma), sigma)
    grid[:, :, z0:z1] = 1.0 - np.exp(-cache[:, :, z0:z1].astype(np.float64) * model.cfg.base_step) > threshold
    model.occ_calls += 1
    return grid


def occupancy_due(cfg: Config, it: int) -> bool:
    if it < cfg.occ_warmup_iters:
        return it % cfg.occ_warmup_every == 0
    return it % cfg.occ_update_every == 0


# batches -------------------------------------------------------------------------------


@dataclass
class RayPool:
    """Every training pixel as a ray that meets the ROI."""

    origins: np.ndarray
    dirs: np.ndarray
    tnear: np.ndarray
    tfar: np.ndarray
    rgb: np.ndarray

    @classmethod
    def from_dataset(cls, ds: PosedDataset, split: str = "train") -> "RayPool":
        parts = []
        for k in ds.split(split):
            img = ds.frames[k].image
            if img is None:
                raise ConfigError(f"frame {k} has no image")
            r = generate_rays(ds, k, ds.pixel_grid())
            hit = r["hit"]
            parts.append((r["origins"][hit], r["dirs"][hit], r["tnear"][hit], r["tfar"][hit], img.reshape(-1, 3)[hit]))
        if not parts or sum(len(p[0]) for p in parts) == 0:
            raise ConfigError("dataset has no training rays")
        cols = [np.concatenate(c) for c in zip(*parts)]
        return cls(*cols[:4], cols[4].astype(np.float64))

    def __len__(self) -> int:
        return len(self.origins)


@dataclass
class TrainBatch:
    batch: RayBatch
    n_mean: float
    step: float


def collect_batch(pool: RayPool, grid: np.ndarray, step: float, rng: np.random.Generator, ray_cap: int, sample_cap: int) -> TrainBatch:
    """Random rays marched at fixed ``step`` through ``grid``, within both caps."""
    if len(pool) == 0:
        raise ConfigError("empty dataset")
    idx = rng.integers(0, len(pool), ray_cap)
    jitter = rng.uniform(0.0, 1.0, ray_cap)
    o, d = pool.origins[idx], pool.dirs[idx]
    t, offsets = march_fixed(o, d, pool.tnear[idx], pool.tfar[idx], grid, step, jitter)
    # keep the longest prefix of rays whose samples fit under the cap
    n_rays = int(np.searchsorted(offsets, sample_cap, side="right")) - 1
    n_rays = max(0, min(n_rays, ray_cap))
    offsets = offsets[: n_rays + 1]
    t = t[: offsets[-1]]
    rb = RayBatch(o[:n_rays], d[:n_rays], pool.rgb[idx[:n_rays]], t, np.full(len(t), step), offsets)
    n_mean = rb.n_samples / n_rays if n_rays else 0.0
    return TrainBatch(rb, n_mean, step)


# checkpoints -------------------------------------------------------------------------------


def save_checkpoint(path, model: NGPRTModel, opt: OptimState, tuner: StepTuner, it: int) -> None:
    arrays = {f"param/{k}": v for k, v in model.tape}
    arrays.update({f"adam_m/{k}": v for k, v in opt.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in opt.v.items()})
    meta = dict(
        version=CHECKPOINT_VERSION,
        iteration=it,
        adam_step=opt.step,
        gamma=tuner.gamma,
        occ_calls=model.occ_calls,
        config=model.cfg.to_dict(),
    )
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    arrays["train_grid"] = model.train_grid
    arrays["density_cache"] = model.density_cache
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[NGPRTModel, OptimState, StepTuner, int]:
    try:
        data = np.load(path)
        meta = json.loads(bytes(data["meta"]).decode())
    except (OSError, ValueError, KeyError) as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise LoadError(f"checkpoint version {meta.get('version')} is not supported")
    cfg = Config.from_dict(meta["config"])
    model = NGPRTModel(cfg)
    for name, value in model.tape:
        value[...] = data[f"param/{name}"]
    model.train_grid[...] = data["train_grid"]
    model.density_cache[...] = data["density_cache"]
    model.occ_calls = meta["occ_calls"]
    opt = OptimState.from_config(cfg)
    opt.step = meta["adam_step"]
    for key in data.files:
        if key.startswith("adam_m/"):
            opt.m[key[7:]] = data[key].copy()
        elif key.startswith("adam_v/"):
            opt.v[key[7:]] = data[key].copy()
    tuner = StepTuner.from_config(cfg)
    tuner.gamma = meta["gamma"]
    return model, opt, tuner, meta["iteration"]


# the loop ------------------------------------------------------------------------------------

LOG_FIELDS = ("iter", "loss", "psnr", "gamma", "n_mean", "lr", "eta")


def _batch_psnr(rgb, gt) -> float:
    mse = float(np.mean((rgb - gt) ** 2)) if len(rgb) else 0.0
    return 99.0 if mse <= 0 else min(99.0, -10.0 * np.log10(mse))


class Trainer:
    """Holds everything that evolves during training; :meth:`step` runs one iteration."""

    def __init__(self, cfg: Config, dataset: PosedDataset | RayPool, model: NGPRTModel | None = None):
        self.cfg = cfg
        self.pool = dataset if isinstance(dataset, RayPool) else RayPool.from_dataset(dataset)
        self.model = model if model is not None else NGPRTModel(cfg, np.random.default_rng([cfg.seed, 0]))
        # after this, each Adam step leaves the gradients cleared for the next
        self.model.tape.zero_grad()
        self.opt = OptimState.from_config(cfg)
        self.tuner = StepTuner.from_config(cfg)
        self.batch_rng = np.random.default_rng([cfg.seed, 1])
        self.occ_rng = np.random.default_rng([cfg.seed, 2])
        self.iteration = 0
        self.log: list[dict] = []

    def step(self) -> dict:
        cfg, model = self.cfg, self.model
        it = self.iteration
        if occupancy_due(cfg, it):
            update_occupancy(model, self.occ_rng, cfg.occ_decay, cfg.occ_alpha_threshold)
        tb = collect_batch(self.pool, model.train_grid, self.tuner.gamma * cfg.base_step, self.batch_rng, cfg.ray_cap, cfg.sample_cap)
        eta = eta_at(cfg, it)
        lr = lr_at(cfg, it)
        loss, rgb, cache = model.forward(tb.batch, eta)
        if not np.isfinite(loss):
            raise TrainingError(f"loss became {loss} at iteration {it}")
        model.backward(tb.batch, cache)
        adam_step(self.opt, model.tape, lr, clear_grads=True)
        self.tuner.update(tb.n_mean)
        self.iteration += 1
        row = dict(iter=it, loss=loss, psnr=_batch_psnr(rgb, tb.batch.rgb), gamma=self.tuner.gamma, n_mean=tb.n_mean, lr=lr, eta=eta)
        self.log.append(row)
        return row

    def checkpoint(self, path) -> None:
        save_checkpoint(path, self.model, self.opt, self.tuner, self.iteration)


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.9g}" if isinstance(r[k], float) else r[k]) for k in LOG_FIELDS})


def train_loop(cfg: Config, dataset, out_dir=None, iterations: int | None = None, progress=None) -> Trainer:
    """Run ``iterations`` (default ``cfg.iterations``) steps; writes log and checkpoints to ``out_dir``.

    On a non-finite loss or gradient the parameters are still those of the
    last completed step; they are saved as ``last_good.npz`` before the
    error propagates.
    """
    trainer = Trainer(cfg, dataset)
    n = cfg.iterations if iterations is None else iterations
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        for _ in range(n):
            row = trainer.step()
            it = trainer.iteration
            if out is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                trainer.checkpoint(out / f"ckpt_{it:06d}.npz")
            if progress is not None and (it % cfg.log_every == 0 or it == n):
                progress(row, time.perf_counter() - t0)
    except TrainingError:
        if out is not None:
            trainer.checkpoint(out / "last_good.npz")
            write_log(trainer.log, out / "train_log.csv")
        raise
    if out is not None:
        trainer.checkpoint(out / "checkpoint.npz")
        write_log(trainer.log, out / "train_log.csv")
    return trainer
