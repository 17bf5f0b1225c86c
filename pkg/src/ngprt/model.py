"""The trainable model: auxiliary coarse decoder, explicit fine tables, fusion and shading.

Coarse features are never evaluated at sample points directly.  The
auxiliary network is evaluated at the corners of the ``L_C`` grid that
enclose each sample and the results are trilinearly interpolated, which is
exactly what rendering from the baked grid does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ngprt.config import Config
from ngprt.errors import DomainError, ShapeError
from ngprt.fusion import Fuser, FusionMode, level_masked_fine
from ngprt.hashgrid import MultiLevelEncoding, gather_rows, grid_rows, scatter_rows
from ngprt.losses import distortion_loss, huber_grad, huber_loss
from ngprt.nn import SH_DIM, GradTape, TinyMLP, activate_density, activate_sigmoid
from ngprt.render import composite, composite_backward, shade, shade_backward


def corner_linear(corners: np.ndarray, L_C: int) -> np.ndarray:
    n = L_C + 1
    c = np.asarray(corners, dtype=np.int64)
    return c[..., 0] + n * (c[..., 1] + n * c[..., 2])


def corner_coords(lin: np.ndarray, L_C: int) -> np.ndarray:
    n = L_C + 1
    lin = np.asarray(lin, dtype=np.int64)
    return np.stack([lin % n, (lin // n) % n, lin // (n * n)], axis=-1)


def corner_positions(corners: np.ndarray, L_C: int, dtype=np.float64) -> np.ndarray:
    return (np.asarray(corners, dtype=np.float64) * (2.0 / L_C) - 1.0).astype(dtype)


@dataclass
class CornerStencil:
    """Samples expressed against the unique ``L_C`` corners they touch."""

    unique: np.ndarray  # (U,) linear corner ids, sorted
    inverse: np.ndarray  # (N, 8) indices into ``unique``
    weights: np.ndarray  # (N, 8)


DENSE_CORNER_LIMIT = 1 << 24


def corner_stencil(x: np.ndarray, L_C: int) -> CornerStencil:
    lin, w = grid_rows(x.reshape(-1, 3), L_C)
    n_corners = (L_C + 1) ** 3
    if n_corners <= DENSE_CORNER_LIMIT:
        # bucket marking beats sorting when the lattice is small
        mark = np.zeros(n_corners, dtype=bool)
        mark[lin.ravel()] = True
        uniq = np.flatnonzero(mark)
        pos = np.empty(n_corners, dtype=np.int64)
        pos[uniq] = np.arange(len(uniq))
        inv = pos[lin]
    else:
        uniq, inv = np.unique(lin.ravel(), return_inverse=True)
        inv = inv.reshape(lin.shape).astype(np.int64)
    return CornerStencil(uniq, inv, w)


def interpolate_corners(rows: np.ndarray, cs: CornerStencil) -> np.ndarray:
    """Trilinear blend of per-corner rows; shared by live and baked decoding."""
    return gather_rows(rows, cs.inverse, cs.weights)


def split_decoded(raw: np.ndarray, L: int) -> tuple[np.ndarray, np.ndarray]:
    """Coarse deferred feature and post-sigmoid attention from a decoded row."""
    if raw.shape[-1] != 8 + 2 * L:
        raise ShapeError(f"decoded rows must be {8 + 2 * L} wide")
    return raw[..., :8], activate_sigmoid(raw[..., 8:])


class NGPRTModel:
    def __init__(self, cfg: Config, rng: np.random.Generator | None = None, dtype=None):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        dtype = np.dtype(dtype or cfg.dtype)
        self.dtype = dtype
        self.L = cfg.n_fine_levels
        self.L_C = cfg.coarse_resolution
        self.tape = GradTape()
        self.enc = MultiLevelEncoding.from_config(cfg, dtype)
        self.enc.init_tables(rng)
        self.enc.register(self.tape)
        h = cfg.hidden_width
        self.aux = TinyMLP.init([self.enc.coarse_width, h, cfg.decoder_width], rng, dtype, name="aux_mlp").register(self.tape)
        self.psi = TinyMLP.init([3 + 4 + SH_DIM, h, h, 3], rng, dtype, name="psi").register(self.tape)
        self.fuser = Fuser.create(cfg.fusion_mode, self.L, rng, dtype, hidden=h)
        self.fuser.register(self.tape)
        g = cfg.grid_resolution
        self.train_grid = np.ones((g, g, g), dtype=bool)
        self.density_cache = np.full((g, g, g), np.inf, dtype=np.float32)
        self.occ_calls = 0

    # -- parameter plumbing ------------------------------------------------
    def rebind(self) -> None:
        self.enc.rebind(self.tape)
        self.aux.rebind(self.tape)
        self.psi.rebind(self.tape)
        self.fuser.rebind(self.tape)

    def astype(self, dtype) -> "NGPRTModel":
        self.tape.astype(dtype)
        self.dtype = np.dtype(dtype)
        self.rebind()
        return self

    @property
    def fusion_mode(self) -> FusionMode:
        return self.fuser.mode

    # -- coarse decode -----------------------------------------------------
    def eval_corners(self, lin: np.ndarray, dtype=None, with_cache: bool = False):
        """Auxiliary decoder output (pre-activation) at linear corner ids."""
        dtype = np.dtype(dtype or self.dtype)
        pos = corner_positions(corner_coords(lin, self.L_C), self.L_C, dtype)
        feats, enc_cache = self.enc.encode_coarse(pos, with_cache=True)
        if dtype != self.dtype:
            mlp = TinyMLP(self.aux.layer_widths, [w.astype(dtype) for w in self.aux.weights], [b.astype(dtype) for b in self.aux.biases])
        else:
            mlp = self.aux
        out, acts = mlp.forward(feats.astype(dtype, copy=False))
        if with_cache:
            return out, (enc_cache, acts)
        return out

    def corner_rows(self, lin: np.ndarray) -> np.ndarray:
        """Render-precision corner rows: evaluated in float64, stored as float32."""
        return self.eval_corners(lin, np.float64).astype(np.float32)

    # -- full forward ------------------------------------------------------
    def forward(self, batch: "RayBatch", eta: float = 0.0, need_grad: bool = True):
        """Loss, predictions and a cache for :meth:`backward`."""
        x = batch.positions.astype(self.dtype)
        cs = corner_stencil(x, self.L_C)
        rows, corner_cache = self.eval_corners(cs.unique, with_cache=True)
        raw = interpolate_corners(rows, cs)
        coarse, att = split_decoded(raw, self.L)
        fine, fine_cache = self.enc.encode_fine(x, with_cache=True)
        fused, fuse_cache = self.fuser.fuse(coarse, fine, att, with_cache=True)
        acc = composite(fused[:, 0], fused[:, 1:4], fused[:, 4:8], batch.delta, batch.offsets)
        has = np.diff(batch.offsets) > 0
        rgb = np.zeros((batch.n_rays, 3))
        shade_cache = None
        if np.any(has):
            rgb_h, acts = shade(acc.C_d[has], acc.F[has], batch.dirs[has], self.psi, with_cache=True)
            rgb[has] = rgb_h
            shade_cache = (rgb_h, acts)
        color = huber_loss(rgb, batch.rgb, self.cfg.huber_delta)
        dist = distortion_loss(acc.weights, batch.t, batch.delta, batch.offsets, with_grad=need_grad)
        dist_loss, dist_grad = dist if need_grad else (dist, None)
        per_ray = color + eta * dist_loss
        loss = float(per_ray.mean()) if batch.n_rays else 0.0
        cache = dict(
            x=x, cs=cs, rows=rows, corner_cache=corner_cache, att=att, fine=fine, fine_cache=fine_cache,
            fused=fused, fuse_cache=fuse_cache, acc=acc, has=has, shade_cache=shade_cache,
            rgb=rgb, dist_grad=dist_grad, eta=eta,
        )
        return loss, rgb, cache

    def backward(self, batch: "RayBatch", cache) -> None:
        """Accumulate gradients of the mean per-ray loss into ``self.tape``."""
        n_rays = max(batch.n_rays, 1)
        has = cache["has"]
        dt = self.dtype
        d_C = np.zeros((batch.n_rays, 3))
        d_F = np.zeros((batch.n_rays, 4))
        if cache["shade_cache"] is not None:
            rgb_h, acts = cache["shade_cache"]
            d_rgb = huber_grad(cache["rgb"][has], batch.rgb[has], self.cfg.huber_delta) / n_rays
            dc, df = shade_backward(rgb_h, acts, self.psi, d_rgb.astype(dt), self.tape)
            d_C[has] = dc
            d_F[has] = df
        d_w = cache["dist_grad"] * (cache["eta"] / n_rays) if cache["dist_grad"] is not None else None
        fused = cache["fused"]
        d_sigma, d_color = composite_backward(fused[:, 0], fused[:, 1:8], batch.delta, batch.offsets, cache["acc"], d_C, d_F, d_w)
        d_fused = np.concatenate([d_sigma[:, None], d_color], axis=1).astype(dt)
        d_coarse, d_fine, d_att = self.fuser.backward(cache["fine"], cache["att"], cache["fuse_cache"], d_fused, self.tape)
        self.enc.fine_backward(cache["fine_cache"], d_fine, self.tape)
        d_raw = np.zeros((len(d_fused), 8 + 2 * self.L), dtype=dt)
        d_raw[:, :8] = d_coarse
        if d_att is not None:
            a = cache["att"]
            d_raw[:, 8:] = d_att * a * (1 - a)
        cs = cache["cs"]
        d_rows = np.zeros_like(cache["rows"])
        scatter_rows(d_rows, cs.inverse, cs.weights, d_raw)
        enc_cache, acts = cache["corner_cache"]
        d_feat = self.aux.backward(acts, d_rows, self.tape)
        self.enc.coarse_backward(enc_cache, d_feat, self.tape)

    def kink_pattern(self, batch: "RayBatch", cache) -> np.ndarray:
        """Every branch decision of a forward pass, for kink-aware gradient checks."""
        parts = [acts[k] > 0 for acts in self._mlp_acts(cache) for k in range(1, len(acts) - 1)]
        parts.append(np.abs(cache["fused"][:, 0]) <= 15.0)
        r = np.abs(cache["rgb"] - batch.rgb)
        parts.append(r <= self.cfg.huber_delta)
        return np.concatenate([p.ravel() for p in parts])

    @staticmethod
    def _mlp_acts(cache):
        out = [cache["corner_cache"][1]]
        if cache["shade_cache"] is not None:
            out.append(cache["shade_cache"][1])
        kind, data = cache["fuse_cache"]
        if kind == "mlp":
            out.append(data)
        return out

    # -- point queries -----------------------------------------------------
    def density(self, x: np.ndarray) -> np.ndarray:
        """Fused density at points (used by occupancy maintenance and culling)."""
        x = np.asarray(x, dtype=self.dtype).reshape(-1, 3)
        cs = corner_stencil(x, self.L_C)
        raw = interpolate_corners(self.eval_corners(cs.unique), cs)
        coarse, att = split_decoded(raw, self.L)
        fine = self.enc.encode_fine(x)
        fused = self.fuser.fuse(coarse, fine, att)
        return activate_density(fused[:, 0].astype(np.float64))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for _, v in self.tape)


@dataclass
class RayBatch:
    """Packed samples of a set of rays plus per-ray targets."""

    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3)
    rgb: np.ndarray  # (R, 3) ground truth
    t: np.ndarray  # (N,)
    delta: np.ndarray  # (N,)
    offsets: np.ndarray  # (R + 1,)

    def __post_init__(self) -> None:
        ray = np.repeat(np.arange(self.n_rays), np.diff(self.offsets))
        self.ray_index = ray
        pos = self.origins[ray] + self.t[:, None] * self.dirs[ray]
        if pos.size and np.max(np.abs(pos)) > 1.0 + 1e-5:
            raise DomainError("batch sample outside the region of interest")
        self.positions = np.clip(pos, -1.0, 1.0)

    @property
    def n_rays(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_samples(self) -> int:
        return int(self.offsets[-1])


# render-time evaluation ---------------------------------------------------


def fused_features(source, x: np.ndarray, keep_level: int | None = None) -> np.ndarray:
    """Fused deferred features at points from a live model or a baked scene.

    ``source`` provides ``corner_rows``, ``L``, ``L_C``, ``enc`` (only its fine
    levels are used) and ``fuser``.  ``keep_level`` produces the per-level
    decomposition: colour from a single fine level (coarse colour removed), or
    coarse colour only for ``keep_level = 0``.  Densities are never masked.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    cs = corner_stencil(x, source.L_C)
    raw = interpolate_corners(source.corner_rows(cs.unique), cs)
    coarse, att = split_decoded(raw, source.L)
    fine = source.enc.encode_fine(x)
    if keep_level is not None:
        if source.fuser.mode is FusionMode.MLP:
            raise ValueError("level decomposition needs a linear fusion mode")
        fine = level_masked_fine(fine, keep_level)
        if keep_level > 0:
            coarse = coarse.copy()
            coarse[:, 1:] = 0
    return source.fuser.fuse(coarse, fine, att)
