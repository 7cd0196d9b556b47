"""Minimal dense real-array math: stable reductions, MLP passes, Adam.

Arrays are numpy float64 throughout ("RealArray" in the docs below means
a C-order float64 ndarray). No autodiff tape: the MLP backward pass is
written out explicitly and is exact reverse-mode.

Row-exact evaluation
--------------------
Sampler chains must be bitwise independent of how they are batched, so
the default affine kernel accumulates input columns in a fixed order
with elementwise ops only; each output row then depends solely on its
own input row, for any batch size. Training paths pass ``row_exact=False``
to use BLAS matmul instead, which is considerably faster at large widths
but makes no cross-batch bit-reproducibility promise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .rng import standard_normal, stream

__all__ = [
    "LEAKY_SLOPE",
    "MlpParams",
    "MlpGrads",
    "AdamState",
    "logsumexp",
    "logsumexp_rows",
    "sigmoid",
    "mlp_init",
    "mlp_forward",
    "mlp_vjp",
    "adam_init",
    "adam_step",
]

# Negative slope of the leaky rectifier. Fixed by decision; the reference
# architecture names LeakyReLU without a slope.
LEAKY_SLOPE = 0.01


# ==== stable reductions ====


def logsumexp(v: np.ndarray) -> float:
    """log(sum(exp(v))) for a rank-1 vector, shifted by the max so that
    large entries cannot overflow."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"logsumexp expects a non-empty rank-1 array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("logsumexp input must be finite")
    m = float(np.max(v))
    return m + float(np.log(np.sum(np.exp(v - m))))


def logsumexp_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise logsumexp for (B, m) arrays; same max-shift scheme."""
    m = np.max(a, axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=1, keepdims=True)))[:, 0]


def sigmoid(a: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic, elementwise."""
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ==== MLP ====


@dataclass(frozen=True)
class MlpParams:
    """Weights of a fully-connected net with leaky-rectifier hidden layers.

    ``weights[i]`` has shape (layer_dims[i], layer_dims[i+1]); the last
    layer is affine only (no activation).
    """

    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    negative_slope: float = LEAKY_SLOPE


@dataclass(frozen=True)
class MlpGrads:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]


def mlp_init(layer_dims: list[int] | tuple[int, ...], seed: int) -> MlpParams:
    """Fan-in-scaled Gaussian weights (gain for the leaky rectifier), zero biases.

    Weight variance is 2 / (fan_in * (1 + slope^2)); deterministic given seed.
    """
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError(f"layer_dims needs >= 2 positive entries, got {layer_dims}")
    weights = []
    biases = []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        gen = stream(seed, "mlp-init", i)
        std = float(np.sqrt(2.0 / (d_in * (1.0 + LEAKY_SLOPE**2))))
        weights.append(standard_normal(gen, (d_in, d_out)) * std)
        biases.append(np.zeros(d_out, dtype=np.float64))
    return MlpParams(dims, tuple(weights), tuple(biases))


def _leaky(a: np.ndarray, slope: float) -> np.ndarray:
    return np.where(a > 0.0, a, slope * a)


def _affine(x: np.ndarray, w: np.ndarray, b: np.ndarray, row_exact: bool) -> np.ndarray:
    if not row_exact:
        return x @ w + b
    # fixed-order column accumulation; every op elementwise, so row i of the
    # result is a pure function of row i of x regardless of batch size
    out = np.tile(b, (x.shape[0], 1))
    for k in range(w.shape[0]):
        out += x[:, k : k + 1] * w[k]
    return out


def _affine_input_grad(delta: np.ndarray, w: np.ndarray, row_exact: bool) -> np.ndarray:
    if not row_exact:
        return delta @ w.T
    out = np.zeros((delta.shape[0], w.shape[0]), dtype=np.float64)
    for o in range(w.shape[1]):
        out += delta[:, o : o + 1] * w[:, o]
    return out


def _check_input(p: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.layer_dims[0]:
        raise ValueError(
            f"input shape {x.shape} incompatible with first layer width {p.layer_dims[0]}"
        )
    return x


def mlp_forward(p: MlpParams, x: np.ndarray, *, row_exact: bool = True) -> np.ndarray:
    """Forward pass on a (B, d_in) batch -> (B, d_out)."""
    a = _check_input(p, x)
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        a = _affine(a, w, b, row_exact)
        if i != last:
            a = _leaky(a, p.negative_slope)
    return a


def mlp_vjp(
    p: MlpParams, x: np.ndarray, cotangent: np.ndarray, *, row_exact: bool = True
) -> tuple[MlpGrads, np.ndarray]:
    """Gradients of <cotangent, mlp_forward(p, x)> w.r.t. params and input.

    ``cotangent`` is (B, d_out); parameter gradients are summed over the
    batch, the input gradient is returned per row (B, d_in).
    """
    x = _check_input(p, x)
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != (x.shape[0], p.layer_dims[-1]):
        raise ValueError(
            f"cotangent shape {cot.shape} != (batch {x.shape[0]}, out {p.layer_dims[-1]})"
        )
    last = len(p.weights) - 1
    # forward, caching pre-activations
    acts = [x]
    pre = []
    a = x
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = _affine(a, w, b, row_exact)
        pre.append(z)
        a = _leaky(z, p.negative_slope) if i != last else z
        acts.append(a)
    # backward
    gw: list[np.ndarray] = [np.empty(0)] * len(p.weights)
    gb: list[np.ndarray] = [np.empty(0)] * len(p.weights)
    delta = cot
    for i in range(last, -1, -1):
        if i != last:
            delta = delta * np.where(pre[i] > 0.0, 1.0, p.negative_slope)
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        delta = _affine_input_grad(delta, p.weights[i], row_exact)
    return MlpGrads(tuple(gw), tuple(gb)), delta


# ==== Adam ====


@dataclass(frozen=True)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: list[np.ndarray] | tuple[np.ndarray, ...], lr: float) -> AdamState:
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    zeros = tuple(np.zeros_like(a) for a in params)
    return AdamState(zeros, tuple(np.zeros_like(a) for a in params), 0, float(lr))


def adam_step(
    state: AdamState,
    params: tuple[np.ndarray, ...] | list[np.ndarray],
    grads: tuple[np.ndarray, ...] | list[np.ndarray],
    *,
    lr: float | None = None,
) -> tuple[tuple[np.ndarray, ...], AdamState]:
    """One bias-corrected Adam update. Pure: returns fresh params and state.

    ``lr`` overrides the state's base rate for this step (staircase schedules).
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("params/grads length mismatch with optimizer state")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient in adam_step")
    rate = state.lr if lr is None else float(lr)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m = tuple(b1 * m + (1 - b1) * g for m, g in zip(state.m, grads))
    new_v = tuple(b2 * v + (1 - b2) * g * g for v, g in zip(state.v, grads))
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params = tuple(
        p - rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        for p, m, v in zip(params, new_m, new_v)
    )
    return new_params, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)
