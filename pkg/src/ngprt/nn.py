"""Small dense networks with hand-written backprop, activations and SH encoding.

Everything operates on batches: an input of shape ``(N, D)`` produces an
output of shape ``(N, D_out)``.  One-dimensional inputs are treated as a batch
of one and squeezed back on the way out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from ngprt.errors import NormalizationError, ShapeError

DENSITY_CLAMP = 15.0


class GradTape:
    """Registry of named parameter arrays and their accumulated gradients.

    Parameters are updated in place by the optimiser, so modules that keep a
    reference to an array registered here always see current values.
    """

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def register(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        g = self.grads[name]
        if g.shape != np.shape(grad):
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(grad)}, expected {g.shape}")
        g += grad

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def names(self) -> list[str]:
        return list(self.params)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def astype(self, dtype) -> "GradTape":
        """Cast every parameter in place (the arrays are replaced, names kept)."""
        for name in list(self.params):
            self.params[name] = self.params[name].astype(dtype)
            self.grads[name] = np.zeros_like(self.params[name])
        return self


@dataclass
class TinyMLP:
    """Fully connected network with ReLU hidden layers and a linear output.

    Weights are stored as ``(in, out)`` so a forward layer is ``x @ W + b``.
    """

    layer_widths: list[int]
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)
    hidden_activation: str = "relu"
    name: str = "mlp"

    def __post_init__(self) -> None:
        if len(self.layer_widths) < 2:
            raise ShapeError("an MLP needs at least an input and an output width")
        if not self.weights:
            self.weights = [np.zeros((a, b)) for a, b in zip(self.layer_widths, self.layer_widths[1:])]
            self.biases = [np.zeros(b) for b in self.layer_widths[1:]]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_widths[k], self.layer_widths[k + 1])
            if w.shape != shape or b.shape != (shape[1],):
                raise ShapeError(f"layer {k} has weight {w.shape}/bias {b.shape}, expected {shape}")

    @classmethod
    def init(cls, widths: list[int], rng: np.random.Generator, dtype=np.float32, name: str = "mlp") -> "TinyMLP":
        """He-uniform weights, zero biases."""
        weights, biases = [], []
        for a, b in zip(widths, widths[1:]):
            bound = np.sqrt(6.0 / a)
            weights.append(rng.uniform(-bound, bound, size=(a, b)).astype(dtype))
            biases.append(np.zeros(b, dtype=dtype))
        return cls(list(widths), weights, biases, name=name)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def register(self, tape: GradTape) -> "TinyMLP":
        for k in range(self.n_layers):
            tape.register(f"{self.name}.w{k}", self.weights[k])
            tape.register(f"{self.name}.b{k}", self.biases[k])
        return self

    def rebind(self, tape: GradTape) -> "TinyMLP":
        """Point the layer arrays at the tape's (possibly recast) arrays."""
        for k in range(self.n_layers):
            self.weights[k] = tape.params[f"{self.name}.w{k}"]
            self.biases[k] = tape.params[f"{self.name}.b{k}"]
        return self

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Return the output and the per-layer inputs needed by ``backward``."""
        if x.shape[-1] != self.layer_widths[0]:
            raise ShapeError(f"{self.name}: input width {x.shape[-1]} != {self.layer_widths[0]}")
        acts = [x]
        h = x
        last = self.n_layers - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            # in-place updates avoid a fresh allocation per op on large batches
            h = h @ w
            h += b
            if k < last:
                np.maximum(h, 0, out=h)
            acts.append(h)
        return h, acts

    def backward(self, acts: list[np.ndarray], dout: np.ndarray, tape: GradTape | None = None) -> np.ndarray:
        """Propagate ``dout`` back to the input; parameter grads go to ``tape``."""
        g = dout
        for k in range(self.n_layers - 1, -1, -1):
            if k < self.n_layers - 1:
                # g is a fresh matmul result here, never the caller's array
                g *= acts[k + 1] > 0
            if tape is not None:
                tape.accumulate(f"{self.name}.w{k}", acts[k].T @ g)
                tape.accumulate(f"{self.name}.b{k}", g.sum(axis=0))
            g = g @ self.weights[k].T
        return g


def mlp_forward(mlp: TinyMLP, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    squeeze = x.ndim == 1
    out, _ = mlp.forward(x[None] if squeeze else x)
    return out[0] if squeeze else out


# activations -------------------------------------------------------------


def activate_density(pre):
    """Exponential density with the pre-activation clamped to [-15, 15]."""
    return np.exp(np.clip(pre, -DENSITY_CLAMP, DENSITY_CLAMP))


def density_grad(pre, sigma=None):
    """d sigma / d pre: the clamped exponential inside the window, zero outside."""
    if sigma is None:
        sigma = activate_density(pre)
    return np.where(np.abs(pre) <= DENSITY_CLAMP, sigma, 0.0).astype(np.result_type(sigma))


def activate_sigmoid(pre):
    pre = np.asarray(pre)
    # split on sign so neither branch overflows
    out = np.empty_like(pre, dtype=np.result_type(pre, np.float32))
    pos = pre >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-pre[pos]))
    e = np.exp(pre[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else out[()]


# spherical harmonics -----------------------------------------------------

SH_DEGREE = 4
SH_DIM = SH_DEGREE**2

# Real SH, (l, m) lexicographic with m = -l..l.  Frozen: baked files rely on it.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sh_encode(dirs: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Degree-4 real spherical harmonics of unit directions, shape ``(..., 16)``."""
    d = np.asarray(dirs, dtype=np.float64)
    if d.shape[-1] != 3:
        raise ShapeError("directions must have 3 components")
    norms = np.linalg.norm(d, axis=-1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise NormalizationError(f"direction norm off by {np.max(np.abs(norms - 1.0)):.3g}")
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty(d.shape[:-1] + (SH_DIM,), dtype=np.float64)
    out[..., 0] = SH_C0
    out[..., 1] = -SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = -SH_C1 * x
    out[..., 4] = SH_C2[0] * x * y
    out[..., 5] = SH_C2[1] * y * z
    out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[..., 7] = SH_C2[3] * x * z
    out[..., 8] = SH_C2[4] * (xx - yy)
    out[..., 9] = SH_C3[0] * y * (3 * xx - yy)
    out[..., 10] = SH_C3[1] * x * y * z
    out[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
    out[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    out[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
    out[..., 14] = SH_C3[5] * z * (xx - yy)
    out[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


# gradient checking -------------------------------------------------------


def _split(result):
    if isinstance(result, tuple):
        return float(result[0]), np.asarray(result[1])
    return float(result), None


def grad_check(
    fn: Callable[[bool], float],
    params: GradTape,
    step: float = 1e-4,
    max_components: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
    per_group: bool = False,
    kink_shrink: float = 1e-2,
):
    """Compare backprop gradients with central finite differences.

    ``fn(backward)`` evaluates the scalar loss at the current parameter values;
    with ``backward=True`` it must also accumulate gradients into ``params``.
    It may return ``(loss, pattern)`` where ``pattern`` is an array describing
    every piecewise branch taken (ReLU masks, clamps).  If perturbing a
    component changes the pattern, the difference quotient straddles a kink and
    that component is re-measured with ``step * kink_shrink``.

    If ``max_components`` is set, each parameter group is checked on a random
    subset of that many components.  Returns the maximum relative error
    ``|a - n| / max(|a|, |n|, floor)``, or a dict of per-group maxima when
    ``per_group`` is true.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    params.zero_grad()
    base, pattern = _split(fn(True))
    if not np.isfinite(base):
        raise FloatingPointError(f"loss is not finite: {base}")
    analytic = {k: g.copy() for k, g in params.grads.items()}

    def central(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        fp, pp = _split(fn(False))
        flat[i] = orig - h
        fm, pm = _split(fn(False))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"loss is not finite at perturbation {h}")
        crossed = pattern is not None and not (np.array_equal(pp, pattern) and np.array_equal(pm, pattern))
        return (fp - fm) / (2.0 * h), crossed

    errors: dict[str, float] = {}
    for name, value in params:
        flat = value.reshape(-1)
        n = flat.size
        if max_components is not None and n > max_components:
            idx = rng.choice(n, size=max_components, replace=False)
        else:
            idx = np.arange(n)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in idx:
            num, crossed = central(flat, i, step)
            if crossed:
                num, _ = central(flat, i, step * kink_shrink)
            a = float(a_flat[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        errors[name] = worst
    if per_group:
        return errors
    return max(errors.values()) if errors else 0.0
