"""Dense-math substrate for the depth head.

The op set is deliberately small: exactly what the rotation/fusion MLPs, the
depth table, and the losses need. Each op returns ``(output, backward)`` where
``backward`` maps the upstream gradient to the input gradient and accumulates
into every ``Param`` the op touched. Training runs in float32; verification
(``grad_check``) runs the same ops in float64. All ops preserve the dtype of
their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GELU_COEF = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715
LAYER_NORM_EPS = 1e-5
NORM_TOLERANCE = 1e-12


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class ParameterError(ValueError):
    """A scalar argument is outside its legal range."""


class DegenerateVectorError(ValueError):
    """A row with (near-)zero norm has no direction to normalize."""


class EvaluationError(RuntimeError):
    """A checked function produced a non-finite value."""


class Param:
    """A learnable array paired with an accumulated gradient of the same shape."""

    __slots__ = ("value", "grad", "trainable", "name")

    def __init__(self, value: np.ndarray, trainable: bool = True, name: str = ""):
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.name = name

    def reset_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:  # pragma: no cover
        return f"Param({self.name or 'unnamed'}, shape={self.value.shape})"


def zero_grads(params) -> None:
    for p in params:
        p.reset_grad()


def affine(x: np.ndarray, weight: Param, bias: Param):
    """y = x @ weight + bias, bias broadcast per row."""
    if x.ndim != 2 or weight.value.ndim != 2 or x.shape[1] != weight.value.shape[0]:
        raise ShapeError(
            f"affine: x {x.shape} incompatible with weight {weight.value.shape}"
        )
    if bias.value.shape != (weight.value.shape[1],):
        raise ShapeError(f"affine: bias {bias.value.shape} vs out dim {weight.value.shape[1]}")
    y = x @ weight.value + bias.value

    def backward(dy: np.ndarray) -> np.ndarray:
        weight.grad += x.T @ dy
        bias.grad += dy.sum(axis=0)
        return dy @ weight.value.T

    return y, backward


def layer_norm(x: np.ndarray, gain: Param, shift: Param, eps: float = LAYER_NORM_EPS):
    """Per-row normalization with population variance, then gain/shift."""
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"layer_norm: expected N x D with D >= 1, got {x.shape}")
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = xhat * gain.value + shift.value

    def backward(dy: np.ndarray) -> np.ndarray:
        gain.grad += (dy * xhat).sum(axis=0)
        shift.grad += dy.sum(axis=0)
        dxhat = dy * gain.value
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        return (dxhat - m1 - xhat * m2) * inv_std

    return y, backward


def gelu(x: np.ndarray):
    """Tanh-approximation GELU, elementwise."""
    inner = GELU_COEF * (x + GELU_CUBIC * x * x * x)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def backward(dy: np.ndarray) -> np.ndarray:
        sech2 = 1.0 - t * t
        d_inner = GELU_COEF * (1.0 + 3.0 * GELU_CUBIC * x * x)
        return dy * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner)

    return y, backward


def dropout(x: np.ndarray, rate: float, mode: str, rng: np.random.Generator | None = None):
    """Inverted dropout: train mode zeroes entries with probability ``rate``
    and scales survivors by 1/(1-rate); eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x, lambda dy: dy
    if rng is None:
        raise ParameterError("dropout in train mode needs a seeded generator")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) * (1.0 / (1.0 - rate))
    y = x * mask

    def backward(dy: np.ndarray) -> np.ndarray:
        return dy * mask

    return y, backward


def l2_normalize(x: np.ndarray):
    """Divide each row by its Euclidean norm; gradient flows through the norm."""
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if np.any(norm <= NORM_TOLERANCE):
        raise DegenerateVectorError("l2_normalize: row with near-zero norm")
    y = x / norm

    def backward(dy: np.ndarray) -> np.ndarray:
        return (dy - y * (y * dy).sum(axis=1, keepdims=True)) / norm

    return y, backward


def softmax_rows(x: np.ndarray):
    """Row-wise softmax, shifted by the row max for stability."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(dy: np.ndarray) -> np.ndarray:
        return p * (dy - (dy * p).sum(axis=1, keepdims=True))

    return p, backward


@dataclass
class AdamWState:
    """Per-parameter optimizer state with decoupled weight decay."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_param(cls, param: Param, lr: float, weight_decay: float = 0.0) -> "AdamWState":
        return cls(
            m=np.zeros_like(param.value),
            v=np.zeros_like(param.value),
            lr=lr,
            weight_decay=weight_decay,
        )


def adamw_step(param: Param, state: AdamWState) -> None:
    """One AdamW update in place. The gradient is left untouched."""
    if state.m.shape != param.value.shape:
        raise ShapeError(
            f"adamw_step: state shape {state.m.shape} vs param {param.value.shape}"
        )
    if state.lr < 0.0:
        raise ParameterError(f"adamw_step: negative learning rate {state.lr}")
    g = param.grad
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    param.value -= state.lr * (m_hat / (np.sqrt(v_hat) + state.eps))
    if state.weight_decay != 0.0:
        param.value -= state.lr * state.weight_decay * param.value


def grad_check(f, params, h: float = 1e-6) -> float:
    """Compare ``f``'s analytic gradients against central differences.

    ``f`` takes no arguments, returns a scalar loss, and accumulates gradients
    into ``params``. It must be deterministic (fix any dropout mask via the
    generator it owns). Returns the max of |a - n| / max(|a|, |n|, 1e-8) over
    every coordinate of every param.

    The loss value is differenced in whatever precision ``f`` returns; run the
    whole chain in extended precision (longdouble params and inputs) to push
    the difference noise floor below the tolerances this check is used with.
    """
    if h <= 0.0:
        raise ParameterError(f"grad_check: step must be positive, got {h}")
    zero_grads(params)
    loss = f()
    if not np.isfinite(loss):
        raise EvaluationError(f"grad_check: non-finite loss {loss}")
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            kept = flat[i]
            flat[i] = kept + h
            lo_hi = f()
            flat[i] = kept - h
            lo_lo = f()
            flat[i] = kept
            if not (np.isfinite(lo_hi) and np.isfinite(lo_lo)):
                raise EvaluationError("grad_check: non-finite loss during perturbation")
            numeric = (lo_hi - lo_lo) / (2.0 * h)
            err = float(abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-8))
            if err > worst:
                worst = err
    return worst
