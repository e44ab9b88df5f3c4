"""Locality-aware attention: alignment scores, locality mask, context vectors.

Shapes: a decoded state is ``(B, k)``, the encoded states are ``(B, f, k)``;
scores over encoder steps are ``(B, f)``. Unbatched ``(k,)`` / ``(f, k)`` inputs
are accepted too and give unbatched outputs.

Time indices in the public helpers (``t``, ``j``, ``p_t``) are 1-based to
match the usual notation; arrays are of course 0-based.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .numerics import softmax

MODES = ("none", "bas", "mbas", "las")


@dataclass(frozen=True)
class AttentionConfig:
    mode: str = "las"
    window: int = 6  # D, in frames

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"attention mode must be one of {MODES}, got {self.mode!r}")
        if self.window < 1:
            raise ValueError("attention window D must be >= 1")

    @property
    def sigma(self) -> float:
        return self.window / 2.0

    @property
    def uses_context(self) -> bool:
        return self.mode != "none"


def _batched(hat_h, H):
    hat_h = np.asarray(hat_h, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    single = hat_h.ndim == 1
    if single:
        hat_h, H = hat_h[None], H[None]
    if hat_h.shape[-1] != H.shape[-1]:
        raise ValueError(f"state width {hat_h.shape[-1]} != encoded width {H.shape[-1]}")
    return hat_h, H, single


def alignment_logits(hat_h, H) -> np.ndarray:
    hat_h, H, single = _batched(hat_h, H)
    dots = np.einsum("bfk,bk->bf", H, hat_h)
    return dots[0] if single else dots


def bas_scores(hat_h, H) -> np.ndarray:
    """Softmax over encoder steps of the dot products ``hat_h . h_j``."""
    return softmax(alignment_logits(hat_h, H), axis=-1)


def locality_mask(t: int, f: int, window: int = 6, sigma: float | None = None) -> np.ndarray:
    """Gaussian weights centred on ``p_t = f - t + 1``, zero outside ``[p_t-D, p_t+D]``."""
    if not 1 <= t <= f:
        raise ValueError(f"decoding step t={t} outside 1..{f}")
    if sigma is None:
        sigma = window / 2.0
    p_t = f - t + 1
    j = np.arange(1, f + 1)
    mask = np.exp(-((j - p_t) ** 2) / (2.0 * sigma ** 2))
    mask[np.abs(j - p_t) > window] = 0.0
    return mask


@lru_cache(maxsize=64)
def _mask_table(f: int, window: int, sigma: float | None) -> np.ndarray:
    table = np.stack([locality_mask(t, f, window, sigma) for t in range(1, f + 1)])
    table.flags.writeable = False
    return table


def locality_masks(f: int, window: int = 6, sigma: float | None = None) -> np.ndarray:
    """Read-only ``(f, f)`` matrix; row ``t-1`` is ``locality_mask(t, f)``."""
    return _mask_table(f, window, sigma)


def mbas_scores(bas, mask) -> np.ndarray:
    bas = np.asarray(bas, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if bas.shape[-1] != mask.shape[-1]:
        raise ValueError("score and mask lengths differ")
    return bas * mask


def la_loss(bas, mbas_target) -> float:
    """Sum over steps and positions of ``(a - a_masked)^2``."""
    bas = np.asarray(bas, dtype=np.float64)
    target = np.asarray(mbas_target, dtype=np.float64)
    if bas.shape != target.shape:
        raise ValueError(f"shape mismatch {bas.shape} vs {target.shape}")
    return float(np.sum((bas - target) ** 2))


def la_loss_grad(bas, mask, stop_gradient: bool = False) -> np.ndarray:
    """d la_loss / d bas for targets ``mask * bas``.

    With ``stop_gradient`` the targets count as constants, giving
    ``2 a (1 - l)``; otherwise the exact derivative ``2 a (1 - l)^2``.
    """
    bas = np.asarray(bas, dtype=np.float64)
    resid = 1.0 - np.asarray(mask, dtype=np.float64)
    return 2.0 * bas * resid if stop_gradient else 2.0 * bas * resid ** 2


def context_vector(scores, H) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if scores.shape[-1] != H.shape[-2]:
        raise ValueError(f"{scores.shape[-1]} scores for {H.shape[-2]} encoded states")
    if scores.ndim == 1:
        return scores @ H
    return np.einsum("bf,bfk->bk", scores, H)


def attentional_state(c, hat_h, W_att) -> np.ndarray:
    """``tanh(W_att [c; hat_h])``."""
    u = np.concatenate([np.asarray(c, dtype=np.float64), np.asarray(hat_h, dtype=np.float64)], axis=-1)
    if W_att.shape[1] != u.shape[-1]:
        raise ValueError(f"W_att expects width {W_att.shape[1]}, got {u.shape[-1]}")
    return np.tanh(u @ W_att.T)


def locality_statistic(matrix: np.ndarray) -> tuple[float, float]:
    """Mean weight near the clinodiagonal (``|j-p_t| <= 1``) and far from it (``>= 3``)."""
    f = matrix.shape[0]
    t = np.arange(1, f + 1)[:, None]
    j = np.arange(1, f + 1)[None, :]
    dist = np.abs(j - (f - t + 1))
    return float(matrix[dist <= 1].mean()), float(matrix[dist >= 3].mean())
