"""Photometric and distortion losses with their gradients."""

from __future__ import annotations

import numba
import numpy as np


def huber_loss(pred, gt, delta: float = 0.1):
    """Huber penalty per channel, summed over the last axis."""
    r = np.abs(np.asarray(pred, np.float64) - np.asarray(gt, np.float64))
    quad = 0.5 * r * r
    lin = delta * r - 0.5 * delta * delta
    return np.where(r <= delta, quad, lin).sum(axis=-1)


def huber_grad(pred, gt, delta: float = 0.1):
    r = np.asarray(pred, np.float64) - np.asarray(gt, np.float64)
    return np.clip(r, -delta, delta)


@numba.njit(cache=True, nogil=True)
def _distortion_kernel(w, t, delta, offsets, want_grad):
    n_rays = offsets.shape[0] - 1
    loss = np.zeros(n_rays, dtype=np.float64)
    grad = np.zeros(w.shape[0], dtype=np.float64)
    for r in range(n_rays):
        lo = offsets[r]
        hi = offsets[r + 1]
        # pairwise term via prefix sums over midpoints (sorted along the ray)
        w_before = 0.0
        wm_before = 0.0
        pair = 0.0
        self_term = 0.0
        for i in range(lo, hi):
            m = t[i] + 0.5 * delta[i]
            pair += w[i] * (m * w_before - wm_before)
            w_before += w[i]
            wm_before += w[i] * m
            self_term += w[i] * w[i] * delta[i]
        loss[r] = 2.0 * pair + self_term / 3.0
        if want_grad:
            w_total = w_before
            wm_total = wm_before
            w_acc = 0.0
            wm_acc = 0.0
            for i in range(lo, hi):
                m = t[i] + 0.5 * delta[i]
                below = m * w_acc - wm_acc
                above = (wm_total - wm_acc - w[i] * m) - m * (w_total - w_acc - w[i])
                grad[i] = 2.0 * (below + above) + 2.0 * w[i] * delta[i] / 3.0
                w_acc += w[i]
                wm_acc += w[i] * m
    return loss, grad


def distortion_loss(weights, t, delta, offsets=None, with_grad: bool = False):
    """Per-ray distortion regulariser over intervals ``[t_i, t_i + delta_i]``.

    ``sum_ij w_i w_j |m_i - m_j| + 1/3 sum_i w_i^2 delta_i`` with midpoints
    ``m_i``; sample positions are treated as constants.
    """
    w = np.asarray(weights, np.float64).reshape(-1)
    t = np.asarray(t, np.float64).reshape(-1)
    d = np.asarray(delta, np.float64).reshape(-1)
    offsets = np.array([0, len(w)], dtype=np.int64) if offsets is None else np.asarray(offsets, np.int64)
    loss, grad = _distortion_kernel(w, t, d, offsets, with_grad)
    return (loss, grad) if with_grad else loss
