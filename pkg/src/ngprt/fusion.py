"""Fusing coarse and fine deferred features.

A deferred feature is an 8-wide row: pre-activation density, three
pre-sigmoid diffuse channels and a 4-wide specular feature.  Attention
parameters for ``L`` fine levels are stored interleaved as
``[w1, b1, w2, b2, ...]`` where ``w`` weighs density and ``b`` weighs colour.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ngprt.errors import ShapeError
from ngprt.nn import GradTape, TinyMLP, activate_sigmoid

FEATURE_DIM = 8
COLOR_CHANNELS = slice(1, 8)


class FusionMode(enum.IntEnum):
    """Aggregation variants; the integer value is the on-disk tag."""

    SUM = 0
    SHARED_ATT_INV = 1
    SEPARATE_ATT_INV = 2
    SHARED_ATT_V = 3
    SEPARATE_ATT_V = 4
    MLP = 5

    @property
    def is_attention(self) -> bool:
        return self not in (FusionMode.SUM, FusionMode.MLP)

    @property
    def is_invariant(self) -> bool:
        return self in (FusionMode.SHARED_ATT_INV, FusionMode.SEPARATE_ATT_INV)

    @property
    def is_shared(self) -> bool:
        return self in (FusionMode.SHARED_ATT_INV, FusionMode.SHARED_ATT_V)


class DeferredFeature(NamedTuple):
    sigma_pre: np.ndarray
    c_d: np.ndarray
    v_s: np.ndarray

    @classmethod
    def from_array(cls, f: np.ndarray) -> "DeferredFeature":
        f = np.asarray(f)
        if f.shape[-1] != FEATURE_DIM:
            raise ShapeError(f"deferred features are {FEATURE_DIM} wide, got {f.shape[-1]}")
        return cls(f[..., 0], f[..., 1:4], f[..., 4:8])

    def to_array(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.sigma_pre)[..., None], self.c_d, self.v_s], axis=-1)


@dataclass
class AttentionParams:
    omega: np.ndarray  # (..., L)
    beta: np.ndarray  # (..., L)

    @classmethod
    def from_interleaved(cls, a: np.ndarray) -> "AttentionParams":
        a = np.asarray(a)
        return cls(a[..., 0::2], a[..., 1::2])

    def interleaved(self) -> np.ndarray:
        out = np.empty(self.omega.shape[:-1] + (2 * self.omega.shape[-1],), dtype=np.result_type(self.omega))
        out[..., 0::2] = self.omega
        out[..., 1::2] = self.beta
        return out


@dataclass
class Fuser:
    """A fusion mode plus whatever global parameters it owns."""

    mode: FusionMode
    L: int
    inv_logits: np.ndarray | None = None
    mlp: TinyMLP | None = None

    @classmethod
    def create(cls, mode, L: int, rng: np.random.Generator | None = None, dtype=np.float32, hidden: int = 64) -> "Fuser":
        mode = FusionMode[mode] if isinstance(mode, str) else FusionMode(mode)
        inv = np.zeros(2 * L, dtype=dtype) if mode.is_invariant else None
        mlp = None
        if mode is FusionMode.MLP:
            rng = rng if rng is not None else np.random.default_rng(0)
            mlp = TinyMLP.init([FEATURE_DIM * L, hidden, FEATURE_DIM], rng, dtype, name="fusion_mlp")
        return cls(mode, L, inv, mlp)

    def register(self, tape: GradTape) -> None:
        if self.inv_logits is not None:
            tape.register("attention_logits", self.inv_logits)
        if self.mlp is not None:
            self.mlp.register(tape)

    def rebind(self, tape: GradTape) -> None:
        if self.inv_logits is not None:
            self.inv_logits = tape.params["attention_logits"]
        if self.mlp is not None:
            self.mlp.rebind(tape)

    # ------------------------------------------------------------------
    def level_weights(self, a: np.ndarray | None, n: int, dtype) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample density and colour weights, each ``(n, L)``."""
        if self.mode is FusionMode.SUM:
            ones = np.ones((n, self.L), dtype=dtype)
            return ones, ones
        if self.mode.is_invariant:
            src = np.broadcast_to(activate_sigmoid(self.inv_logits).astype(dtype), (n, 2 * self.L))
        else:
            if a is None or a.shape != (n, 2 * self.L):
                raise ShapeError(f"attention must be ({n}, {2 * self.L})")
            src = a
        omega = src[:, 0::2]
        beta = omega if self.mode.is_shared else src[:, 1::2]
        return omega, beta

    def fuse(self, coarse: np.ndarray, fine: np.ndarray, a: np.ndarray | None = None, with_cache: bool = False):
        """``coarse + Att(fine; a)`` for ``coarse (N, 8)`` and ``fine (N, L, 8)``."""
        coarse = np.asarray(coarse)
        fine = np.asarray(fine)
        if fine.ndim != 3 or fine.shape[1] != self.L or fine.shape[2] != FEATURE_DIM:
            raise ShapeError(f"fine features must be (N, {self.L}, 8), got {fine.shape}")
        if coarse.shape != (fine.shape[0], FEATURE_DIM):
            raise ShapeError(f"coarse features must be ({fine.shape[0]}, 8), got {coarse.shape}")
        n = fine.shape[0]
        if self.mode is FusionMode.MLP:
            fine_hat, acts = self.mlp.forward(fine.reshape(n, -1))
            out = coarse + fine_hat
            return (out, ("mlp", acts)) if with_cache else out
        omega, beta = self.level_weights(a, n, fine.dtype)
        wt = np.empty_like(fine)
        wt[:, :, 0] = omega
        wt[:, :, 1:] = beta[:, :, None]
        out = coarse + (wt * fine).sum(axis=1)
        return (out, ("att", wt)) if with_cache else out

    def backward(self, fine: np.ndarray, a: np.ndarray | None, cache, g: np.ndarray, tape: GradTape | None = None):
        """Return ``(d_coarse, d_fine, d_a)``; global parameters accumulate into ``tape``."""
        kind, data = cache
        n = fine.shape[0]
        if kind == "mlp":
            d_fine = self.mlp.backward(data, g, tape).reshape(fine.shape)
            return g, d_fine, None
        wt = data
        d_fine = g[:, None, :] * wt
        prod = g[:, None, :] * fine
        d_omega = prod[:, :, 0]
        d_beta = prod[:, :, 1:].sum(axis=2)
        if self.mode is FusionMode.SUM:
            return g, d_fine, None
        if self.mode.is_shared:
            d_omega = d_omega + d_beta
            d_beta = np.zeros_like(d_beta)
        d_a = np.empty((n, 2 * self.L), dtype=g.dtype)
        d_a[:, 0::2] = d_omega
        d_a[:, 1::2] = d_beta
        if self.mode.is_invariant:
            s = activate_sigmoid(self.inv_logits)
            if tape is not None:
                tape.accumulate("attention_logits", (d_a.sum(axis=0) * s * (1 - s)).astype(self.inv_logits.dtype))
            return g, d_fine, None
        return g, d_fine, d_a


def fuse(coarse, fine, a, mode, L: int | None = None, inv_logits=None, mlp=None) -> np.ndarray:
    """Functional form of :meth:`Fuser.fuse` for single samples or batches."""
    coarse = np.asarray(coarse)
    fine = np.asarray(fine)
    single = coarse.ndim == 1
    if single:
        coarse, fine = coarse[None], fine[None]
        a = None if a is None else np.asarray(a)[None]
    L = fine.shape[1] if L is None else L
    if fine.shape[1] != L:
        raise ShapeError(f"expected {L} fine levels, got {fine.shape[1]}")
    mode = FusionMode[mode] if isinstance(mode, str) else FusionMode(mode)
    fuser = Fuser(mode, L, inv_logits=inv_logits, mlp=mlp)
    if mode.is_invariant and inv_logits is None:
        fuser.inv_logits = np.zeros(2 * L, dtype=fine.dtype)
    out = fuser.fuse(coarse, fine, a)
    return out[0] if single else out


def count_macs(mode, L: int, mlp_widths: list[int] | None = None) -> int:
    """Multiply-accumulates per sample spent aggregating the fine levels.

    Attention variants and SUM cost one MAC per channel per level.  For the
    MLP mode the widths default to the fusion network ``8L -> 64 -> 8``; pass
    e.g. ``[24, 64, 8 + 2L]`` to count an Instant-NGP style decoder instead.
    """
    mode = FusionMode[mode] if isinstance(mode, str) else FusionMode(mode)
    if mode is FusionMode.MLP:
        widths = mlp_widths if mlp_widths is not None else [FEATURE_DIM * L, 64, FEATURE_DIM]
        return int(sum(a * b for a, b in zip(widths, widths[1:])))
    return FEATURE_DIM * L


def level_masked_fine(fine: np.ndarray, keep_level: int) -> np.ndarray:
    """Zero the colour channels of every fine level except ``keep_level`` (1-based).

    ``keep_level = 0`` zeroes the colour of all fine levels.  Densities stay.
    """
    fine = np.asarray(fine)
    L = fine.shape[-2]
    if not 0 <= keep_level <= L:
        raise ValueError(f"keep_level must be in [1, {L}] (or 0 for coarse only), got {keep_level}")
    out = fine.copy()
    for lvl in range(L):
        if lvl + 1 != keep_level:
            out[..., lvl, COLOR_CHANNELS] = 0
    return out
