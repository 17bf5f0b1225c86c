"""Deferred volume rendering over packed ray samples.

Samples of many rays are stored back to back; ``offsets`` (length ``R + 1``)
delimits ray ``r`` as ``offsets[r]:offsets[r + 1]``.  Compositing accumulates
pre-sigmoid diffuse colour and the specular feature front to back, then a
single view-dependent network evaluation per ray produces the pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from ngprt.errors import OrderingError, ShapeError
from ngprt.nn import TinyMLP, activate_density, activate_sigmoid, density_grad, sh_encode

EARLY_STOP_T = 2e-3


@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray
    t_near: float
    t_far: float


@dataclass
class RaySample:
    t: float
    delta: float
    feature: np.ndarray  # fused 8-wide deferred feature


@dataclass
class RayAccumulation:
    C_d: np.ndarray  # (R, 3)
    F: np.ndarray  # (R, 4)
    weights: np.ndarray  # (N,)
    transmittance: np.ndarray  # (N,) T before each sample
    final_T: np.ndarray  # (R,)
    n_used: np.ndarray  # (R,) samples composited before early stop


def alpha(sigma, delta):
    return 1.0 - np.exp(-np.asarray(sigma) * np.asarray(delta))


@numba.njit(cache=True, nogil=True)
def _composite_kernel(sigma, delta, color, offsets, stop_T):
    n_rays = offsets.shape[0] - 1
    width = color.shape[1]
    acc = np.zeros((n_rays, width), dtype=np.float64)
    weights = np.zeros(sigma.shape[0], dtype=np.float64)
    trans = np.zeros(sigma.shape[0], dtype=np.float64)
    final_T = np.ones(n_rays, dtype=np.float64)
    n_used = np.zeros(n_rays, dtype=np.int64)
    for r in range(n_rays):
        T = 1.0
        for i in range(offsets[r], offsets[r + 1]):
            if T < stop_T:
                break
            a = 1.0 - np.exp(-sigma[i] * delta[i])
            w = a * T
            trans[i] = T
            weights[i] = w
            for c in range(width):
                acc[r, c] += w * color[i, c]
            T = T * (1.0 - a)
            n_used[r] += 1
        final_T[r] = T
    return acc, weights, trans, final_T, n_used


@numba.njit(cache=True, nogil=True)
def _composite_backward_kernel(sigma, delta, color, offsets, weights, trans, d_acc, d_w):
    """Gradients w.r.t. density (post-activation) and per-sample colour."""
    n = sigma.shape[0]
    width = color.shape[1]
    d_sigma = np.zeros(n, dtype=np.float64)
    d_color = np.zeros((n, width), dtype=np.float64)
    for r in range(offsets.shape[0] - 1):
        lo = offsets[r]
        hi = offsets[r + 1]
        suffix = 0.0  # sum_{j > i} w_j g_j
        for i in range(hi - 1, lo - 1, -1):
            g = d_w[i]
            for c in range(width):
                g += d_acc[r, c] * color[i, c]
                d_color[i, c] = weights[i] * d_acc[r, c]
            t_next = trans[i] * np.exp(-sigma[i] * delta[i])
            d_sigma[i] = delta[i] * (t_next * g - suffix)
            suffix += weights[i] * g
    return d_sigma, d_color


def _check_order(t: np.ndarray, offsets: np.ndarray) -> None:
    if len(t) < 2:
        return
    bad = np.diff(t) < 0
    # differences that straddle a ray boundary are allowed to go backwards
    starts = offsets[1:-1] - 1
    starts = starts[(starts >= 0) & (starts < len(bad))]
    bad[starts] = False
    if np.any(bad):
        raise OrderingError("samples must be ordered by t within each ray")


def composite(sigma_pre, c_d, v_s, delta, offsets=None, t=None, early_stop: float | None = None) -> RayAccumulation:
    """Front-to-back compositing; ``early_stop`` is a transmittance threshold.

    Density activation is applied here.  With ``early_stop`` set, a ray stops
    before the first sample whose incoming transmittance is below it.
    """
    sigma_pre = np.asarray(sigma_pre, dtype=np.float64).reshape(-1)
    n = sigma_pre.shape[0]
    offsets = np.array([0, n], dtype=np.int64) if offsets is None else np.asarray(offsets, dtype=np.int64)
    if offsets[-1] != n:
        raise ShapeError("offsets do not cover the samples")
    if t is not None:
        _check_order(np.asarray(t, dtype=np.float64), offsets)
    color = np.concatenate([np.asarray(c_d, np.float64).reshape(n, 3), np.asarray(v_s, np.float64).reshape(n, 4)], axis=1)
    sigma = activate_density(sigma_pre)
    stop = -1.0 if early_stop is None else float(early_stop)
    acc, w, trans, final_T, used = _composite_kernel(sigma, np.asarray(delta, np.float64).reshape(-1), color, offsets, stop)
    return RayAccumulation(acc[:, :3], acc[:, 3:], w, trans, final_T, used)


def composite_samples(samples: list[RaySample], early_stop: float | None = None) -> RayAccumulation:
    """Single-ray convenience wrapper over :func:`composite`."""
    if not samples:
        f = np.zeros((0, 8))
        return composite(f[:, 0], f[:, 1:4], f[:, 4:], np.zeros(0), t=np.zeros(0), early_stop=early_stop)
    f = np.stack([s.feature for s in samples])
    t = np.array([s.t for s in samples])
    d = np.array([s.delta for s in samples])
    return composite(f[:, 0], f[:, 1:4], f[:, 4:8], d, t=t, early_stop=early_stop)


def composite_backward(sigma_pre, features_color, delta, offsets, acc: RayAccumulation, d_C, d_F, d_weights=None):
    """Gradients of a loss w.r.t. ``sigma_pre (N,)`` and colour channels ``(N, 7)``.

    ``d_weights`` carries any direct dependence of the loss on the compositing
    weights (the distortion regulariser).
    """
    sigma_pre = np.asarray(sigma_pre, dtype=np.float64)
    sigma = activate_density(sigma_pre)
    d_acc = np.concatenate([d_C, d_F], axis=1).astype(np.float64)
    d_w = np.zeros_like(sigma) if d_weights is None else np.asarray(d_weights, np.float64)
    d_sigma, d_color = _composite_backward_kernel(
        sigma, np.asarray(delta, np.float64), np.asarray(features_color, np.float64), offsets, acc.weights, acc.transmittance, d_acc, d_w
    )
    return d_sigma * density_grad(sigma_pre, sigma), d_color


# shading -----------------------------------------------------------------


def shade(C_d, F, dirs, mlp_psi: TinyMLP, with_cache: bool = False):
    """``sigmoid(C_d + psi([C_d, F, SH(d)]))`` for ``R`` rays."""
    C_d = np.atleast_2d(C_d)
    F = np.atleast_2d(F)
    dirs = np.atleast_2d(dirs)
    dtype = mlp_psi.weights[0].dtype
    inp = np.concatenate([C_d, F, sh_encode(dirs)], axis=1).astype(dtype)
    if inp.shape[1] != mlp_psi.layer_widths[0]:
        raise ShapeError(f"view network expects {mlp_psi.layer_widths[0]} inputs, got {inp.shape[1]}")
    res, acts = mlp_psi.forward(inp)
    pre = C_d.astype(dtype) + res
    rgb = activate_sigmoid(pre)
    if with_cache:
        return rgb, acts
    return rgb


def shade_backward(rgb, acts, mlp_psi: TinyMLP, d_rgb, tape=None):
    """Return ``(d_C_d, d_F)`` and accumulate the view network's gradients."""
    d_pre = (d_rgb * rgb * (1.0 - rgb)).astype(rgb.dtype)
    d_in = mlp_psi.backward(acts, d_pre, tape)
    return d_pre + d_in[:, :3], d_in[:, 3:7]
