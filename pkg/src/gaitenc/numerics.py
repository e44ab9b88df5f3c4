"""Dense numerics with hand-written forward/backward passes.

Everything works on float64 numpy arrays with a leading batch axis: a
"vector" argument of length n is accepted either as shape ``(n,)`` or as a
batch ``(B, n)``; outputs keep the batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
FORGET_BIAS = 1.0
CLIP_NORM = 5.0


class NumericalError(FloatingPointError):
    """Raised when a computation produces NaN or Inf."""


def check_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    # a single reduction; an overflowing sum of finite values is also treated as a blow-up
    if not np.isfinite(np.sum(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    return x[None, :] if x.ndim == 1 else x


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------

@dataclass
class LstmCellParams:
    """Gate-stacked LSTM weights, gate order (input, forget, candidate, output).

    ``W`` is ``(4k, input_dim)``, ``U`` is ``(4k, k)``, ``b`` is ``(4k,)``.
    """

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        k4 = self.U.shape[0]
        if k4 % 4 or self.U.shape != (k4, k4 // 4):
            raise ValueError(f"recurrent weights must be (4k, k), got {self.U.shape}")
        if self.W.ndim != 2 or self.W.shape[0] != k4 or self.b.shape != (k4,):
            raise ValueError("input weights / biases inconsistent with hidden size")

    @property
    def hidden_dim(self) -> int:
        return self.U.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, hidden_dim: int) -> "LstmCellParams":
        k = hidden_dim
        W = glorot_uniform(rng, 4 * k, input_dim)
        U = glorot_uniform(rng, 4 * k, k)
        b = np.zeros(4 * k)
        b[k:2 * k] = FORGET_BIAS
        return cls(W, U, b)

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "LstmCellParams":
        k = hidden_dim
        return cls(np.zeros((4 * k, input_dim)), np.zeros((4 * k, k)), np.zeros(4 * k))

    def zeros_like(self) -> "LstmCellParams":
        return LstmCellParams(np.zeros_like(self.W), np.zeros_like(self.U), np.zeros_like(self.b))

    def tensors(self) -> list[np.ndarray]:
        return [self.W, self.U, self.b]


@dataclass
class LstmState:
    hidden: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, batch: int, hidden_dim: int) -> "LstmState":
        return cls(np.zeros((batch, hidden_dim)), np.zeros((batch, hidden_dim)))

    def copy(self) -> "LstmState":
        return LstmState(self.hidden.copy(), self.cell.copy())


@dataclass
class LstmCache:
    params: LstmCellParams
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray


@lru_cache(maxsize=32)
def _gate_scale(k: int) -> np.ndarray:
    scale = np.full(4 * k, 0.5)
    scale[2 * k:3 * k] = 1.0
    scale.flags.writeable = False
    return scale


def lstm_cell_forward(params: LstmCellParams, x, prev: LstmState,
                      check: bool = True) -> tuple[LstmState, LstmCache]:
    """One LSTM step. ``check=False`` skips validation (callers unrolling many steps)."""
    k = params.hidden_dim
    if check:
        x = _as_batch(x)
        h_prev = _as_batch(prev.hidden)
        c_prev = _as_batch(prev.cell)
        if x.shape[1] != params.input_dim:
            raise ValueError(f"input has width {x.shape[1]}, cell expects {params.input_dim}")
        if h_prev.shape[1] != k or c_prev.shape[1] != k:
            raise ValueError(f"previous state must have width {k}")
    else:
        h_prev, c_prev = prev.hidden, prev.cell

    z = x @ params.W.T + h_prev @ params.U.T + params.b
    # one tanh for all gates: sigmoid(z) = 0.5 * (1 + tanh(z / 2)), halving is exact
    y = np.tanh(z * _gate_scale(k))
    s = 0.5 * (1.0 + y)
    i, f, g, o = s[:, :k], s[:, k:2 * k], y[:, 2 * k:3 * k], s[:, 3 * k:]
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    if check:
        check_finite(c, "LSTM cell state")
    return LstmState(h, c), LstmCache(params, x, h_prev, c_prev, i, f, g, o, tanh_c)


def lstm_cell_backward(cache: LstmCache, d_hidden, d_cell=None):
    """Reverse-mode pass for :func:`lstm_cell_forward`.

    Returns ``(grad_params, grad_input, grad_prev_state)``.
    """
    if not isinstance(cache, LstmCache):
        raise TypeError("lstm_cell_backward needs the cache from lstm_cell_forward")
    dh = _as_batch(d_hidden)
    dc = np.zeros_like(dh) if d_cell is None else _as_batch(d_cell)
    if dh.shape != cache.i.shape or dc.shape != cache.i.shape:
        raise ValueError("upstream gradient shape does not match the cached forward pass")
    i, f, g, o, tanh_c = cache.i, cache.f, cache.g, cache.o, cache.tanh_c

    do = dh * tanh_c
    dc = dc + dh * o * (1.0 - tanh_c ** 2)
    di = dc * g
    dg = dc * i
    df = dc * cache.c_prev
    dc_prev = dc * f
    dz = np.concatenate(
        [di * i * (1 - i), df * f * (1 - f), dg * (1 - g ** 2), do * o * (1 - o)], axis=1
    )
    p = cache.params
    grads = LstmCellParams(dz.T @ cache.x, dz.T @ cache.h_prev, dz.sum(axis=0))
    dx = dz @ p.W
    dh_prev = dz @ p.U
    return grads, dx, LstmState(dh_prev, dc_prev)


# ---------------------------------------------------------------------------
# Small layers
# ---------------------------------------------------------------------------

def affine_forward(W: np.ndarray, x, use_tanh: bool = False) -> np.ndarray:
    """``W x`` (no bias), optionally squashed with tanh."""
    x = np.asarray(x, dtype=DTYPE)
    if W.shape[1] != x.shape[-1]:
        raise ValueError(f"weight has {W.shape[1]} columns, input has width {x.shape[-1]}")
    y = x @ W.T
    return np.tanh(y) if use_tanh else y


def softmax(scores, axis: int = -1) -> np.ndarray:
    s = np.asarray(scores, dtype=DTYPE)
    if s.size == 0 or s.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    check_finite(s, "softmax scores")
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, d_probs: np.ndarray, axis: int = -1) -> np.ndarray:
    return probs * (d_probs - (probs * d_probs).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    learning_rate: float = 0.0005
    momentum: float = 0.9
    l2: float = 0.02
    velocity: list[np.ndarray] = field(default_factory=list)

    def ensure(self, params: Sequence[np.ndarray]) -> None:
        if not self.velocity:
            self.velocity = [np.zeros_like(p) for p in params]
        elif len(self.velocity) != len(params) or any(
            v.shape != p.shape for v, p in zip(self.velocity, params)
        ):
            raise ValueError("velocity buffers do not mirror the parameter shapes")


def sgd_momentum_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                      opt: OptimizerState, is_weight: Sequence[bool] | None = None):
    """In-place SGD with momentum; the L2 gradient 2*l2*w is added to weights only.

    ``is_weight`` flags which tensors are weight matrices (default: every
    tensor with ndim >= 2).
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    opt.ensure(params)
    if is_weight is None:
        is_weight = [p.ndim >= 2 for p in params]
    for p, g, v, w in zip(params, grads, opt.velocity, is_weight):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if w and opt.l2:
            g = g + 2.0 * opt.l2 * p
        v *= opt.momentum
        v += g
        p -= opt.learning_rate * v
    return params


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float = CLIP_NORM) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    check_finite(np.array(norm), "gradient norm")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------

def finite_difference_gradient(loss_fn: Callable[[], float], params: Sequence[np.ndarray],
                               eps: float = 1e-6) -> list[np.ndarray]:
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``params``.

    ``loss_fn`` takes no arguments and reads ``params`` (perturbed in place,
    restored afterwards).
    """
    first, second = loss_fn(), loss_fn()
    if first != second:
        raise ValueError("loss_fn is not deterministic")
    grads = []
    for p in params:
        if not p.flags.c_contiguous:
            raise ValueError("parameters must be C-contiguous to perturb in place")
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = loss_fn()
            flat[idx] = orig - eps
            down = loss_fn()
            flat[idx] = orig
            gflat[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray],
                       floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
