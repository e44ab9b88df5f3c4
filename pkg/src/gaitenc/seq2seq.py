"""Per-axis gait encoder / decoder with attention, plus exact BPTT.

One :class:`AxisParams` models one coordinate axis: inputs are ``(B, f, J)``
arrays (B sequences of f frames of J joint values).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as att
from .attention import AttentionConfig
from .numerics import (
    LstmCellParams,
    LstmState,
    affine_forward,
    check_finite,
    glorot_uniform,
    lstm_cell_backward,
    lstm_cell_forward,
    softmax,
    softmax_backward,
)

TENSOR_NAMES = (
    "enc1.W", "enc1.U", "enc1.b", "enc2.W", "enc2.U", "enc2.b",
    "dec1.W", "dec1.U", "dec1.b", "dec2.W", "dec2.U", "dec2.b",
    "W_att", "W_F",
)


@dataclass
class AxisParams:
    enc1: LstmCellParams  # J -> k
    enc2: LstmCellParams  # k -> k
    dec1: LstmCellParams  # J + k -> k (skeleton row and previous attentional state)
    dec2: LstmCellParams  # k -> k
    W_att: np.ndarray     # (k, 2k)
    W_F: np.ndarray       # (J, k), no bias

    def __post_init__(self):
        J, k = self.joints, self.hidden
        expected = {
            "enc1": (J, k), "enc2": (k, k), "dec1": (J + k, k), "dec2": (k, k)}
        for name, (n_in, n_h) in expected.items():
            cell = getattr(self, name)
            if cell.input_dim != n_in or cell.hidden_dim != n_h:
                raise ValueError(f"{name} has shape ({cell.input_dim}->{cell.hidden_dim}), "
                                 f"expected ({n_in}->{n_h})")
        if self.W_att.shape != (k, 2 * k):
            raise ValueError(f"W_att must be ({k}, {2 * k})")

    @property
    def joints(self) -> int:
        return self.W_F.shape[0]

    @property
    def hidden(self) -> int:
        return self.W_F.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, joints: int, hidden: int) -> "AxisParams":
        J, k = joints, hidden
        return cls(
            LstmCellParams.init(rng, J, k),
            LstmCellParams.init(rng, k, k),
            LstmCellParams.init(rng, J + k, k),
            LstmCellParams.init(rng, k, k),
            glorot_uniform(rng, k, 2 * k),
            glorot_uniform(rng, J, k),
        )

    @classmethod
    def zeros(cls, joints: int, hidden: int) -> "AxisParams":
        J, k = joints, hidden
        return cls(LstmCellParams.zeros(J, k), LstmCellParams.zeros(k, k),
                   LstmCellParams.zeros(J + k, k), LstmCellParams.zeros(k, k),
                   np.zeros((k, 2 * k)), np.zeros((J, k)))

    def zeros_like(self) -> "AxisParams":
        return AxisParams.zeros(self.joints, self.hidden)

    def tensors(self) -> list[np.ndarray]:
        """All tensors in the fixed order of ``TENSOR_NAMES`` (references, not copies)."""
        return [*self.enc1.tensors(), *self.enc2.tensors(), *self.dec1.tensors(),
                *self.dec2.tensors(), self.W_att, self.W_F]

    @classmethod
    def from_tensors(cls, tensors) -> "AxisParams":
        t = list(tensors)
        return cls(LstmCellParams(*t[0:3]), LstmCellParams(*t[3:6]), LstmCellParams(*t[6:9]),
                   LstmCellParams(*t[9:12]), t[12], t[13])

    def copy(self) -> "AxisParams":
        return AxisParams.from_tensors([x.copy() for x in self.tensors()])


def is_weight_name(name: str) -> bool:
    return not name.endswith(".b")


@dataclass
class EncodeResult:
    H: np.ndarray                 # (B, f, k) top-layer hidden states
    final: list[LstmState]        # final (hidden, cell) of layer 1 and layer 2
    caches: list = field(default_factory=list, repr=False)


@dataclass
class DecodeTrace:
    mode: str
    attention: AttentionConfig
    hat_h: np.ndarray                   # (B, f, k) decoded gait states
    hbar: np.ndarray                    # (B, f, k) attentional states
    pred: np.ndarray                    # (B, f, J) predicted rows
    bas: np.ndarray | None = None       # (B, f, f) softmax alignment a_t(j)
    weights: np.ndarray | None = None   # (B, f, f) weights used for the context vectors
    mask: np.ndarray | None = None      # (f, f) locality masks
    context: np.ndarray | None = None   # (B, f, k)
    inputs: np.ndarray | None = field(default=None, repr=False)   # (B, f, J + k)
    caches: list = field(default_factory=list, repr=False)


def _batch(values) -> tuple[np.ndarray, bool]:
    values = getattr(values, "values", values)
    x = np.asarray(values, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ValueError(f"expected (f, J) or (B, f, J), got shape {x.shape}")
    return x, False


def encode(channel, params: AxisParams) -> EncodeResult:
    x, _ = _batch(channel)
    B, f, J = x.shape
    if J != params.joints:
        raise ValueError(f"channel has {J} joints, encoder expects {params.joints}")
    k = params.hidden
    s1, s2 = LstmState.zeros(B, k), LstmState.zeros(B, k)
    H = np.empty((B, f, k))
    caches = []
    for t in range(f):
        s1, c1 = lstm_cell_forward(params.enc1, x[:, t], s1, check=False)
        s2, c2 = lstm_cell_forward(params.enc2, s1.hidden, s2, check=False)
        H[:, t] = s2.hidden
        caches.append((c1, c2))
    check_finite(H, "encoded gait states")
    return EncodeResult(H, [s1, s2], caches)


def predict_row(hbar, W_F: np.ndarray) -> np.ndarray:
    return affine_forward(W_F, hbar, use_tanh=False)


def decode(enc: EncodeResult, target, params: AxisParams, attn: AttentionConfig,
           mode: str = "train") -> DecodeTrace:
    """Run the decoder for ``f`` steps.

    ``mode="train"`` feeds the previous target row (teacher forcing);
    ``mode="test"`` feeds back the previous prediction, and ``target`` may be
    ``None``.
    """
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    H = enc.H
    B, f, k = H.shape
    J = params.joints
    if target is not None:
        target, _ = _batch(target)
        if target.shape != (B, f, J):
            raise ValueError(f"target shape {target.shape} does not match encoding ({B}, {f}, {J})")
    elif mode == "train":
        raise ValueError("train mode needs a target")

    use_ctx = attn.uses_context
    s1, s2 = enc.final[0].copy(), enc.final[1].copy()
    hat_h = np.empty((B, f, k))
    hbar = np.empty((B, f, k))
    pred = np.empty((B, f, J))
    inputs = np.empty((B, f, J + k))
    bas = np.empty((B, f, f)) if use_ctx else None
    weights = np.empty((B, f, f)) if use_ctx else None
    context = np.empty((B, f, k)) if use_ctx else None
    mask = att.locality_masks(f, attn.window, attn.sigma) if use_ctx else None
    caches = []

    prev_row = np.zeros((B, J))
    prev_hbar = np.zeros((B, k))
    for t in range(f):
        x_t = np.concatenate([prev_row, prev_hbar], axis=1)
        inputs[:, t] = x_t
        s1, c1 = lstm_cell_forward(params.dec1, x_t, s1, check=False)
        s2, c2 = lstm_cell_forward(params.dec2, s1.hidden, s2, check=False)
        h_t = s2.hidden
        hat_h[:, t] = h_t
        if use_ctx:
            a = softmax(np.einsum("bfk,bk->bf", H, h_t), axis=-1)
            w = a * mask[t] if attn.mode == "mbas" else a
            c = np.einsum("bf,bfk->bk", w, H)
            bas[:, t], weights[:, t], context[:, t] = a, w, c
            hb = att.attentional_state(c, h_t, params.W_att)
        else:
            hb = h_t
        hbar[:, t] = hb
        pred[:, t] = predict_row(hb, params.W_F)
        caches.append((c1, c2))
        prev_row = target[:, t] if mode == "train" else pred[:, t]
        prev_hbar = hb
    check_finite(pred, "decoder predictions")
    return DecodeTrace(mode, attn, hat_h, hbar, pred, bas, weights, mask, context, inputs, caches)


def reconstruction_loss(predicted, target) -> np.ndarray:
    """Sum of squared errors over frames and joints; one value per sequence."""
    p, _ = _batch(predicted)
    q, _ = _batch(target)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    return np.sum((p - q) ** 2, axis=(1, 2))


def alignment_loss(trace: DecodeTrace) -> np.ndarray:
    """Per-sequence sum over (t, j) of (a - mask * a)^2; zero without attention."""
    if trace.bas is None:
        return np.zeros(trace.pred.shape[0])
    a = trace.bas
    return np.sum((a - trace.mask * a) ** 2, axis=(1, 2))


def axis_backward(enc: EncodeResult, trace: DecodeTrace, target, params: AxisParams,
                  w_rec: float, w_align: float, stop_gradient: bool = False) -> AxisParams:
    """Gradient of ``w_rec * sum_b L_R[b] + w_align * sum_b L_A[b]``.

    Callers fold batch averaging and the loss weights into ``w_rec`` /
    ``w_align``. ``stop_gradient`` treats the masked scores inside ``L_A`` as
    constants (then the result is not the exact derivative of ``L_A``).
    """
    if trace.mode != "train":
        raise ValueError("gradients are only defined for teacher-forced (train mode) traces")
    target, _ = _batch(target)
    B, f, k = enc.H.shape
    J = params.joints
    H = enc.H
    mode = trace.attention.mode
    use_ctx = trace.attention.uses_context
    g = params.zeros_like()
    dH = np.zeros_like(H)

    d_pred = 2.0 * w_rec * (trace.pred - target)
    dh1, dc1 = np.zeros((B, k)), np.zeros((B, k))
    dh2, dc2 = np.zeros((B, k)), np.zeros((B, k))
    d_hbar_next = np.zeros((B, k))

    for t in reversed(range(f)):
        hb = trace.hbar[:, t]
        g.W_F += d_pred[:, t].T @ hb
        d_hbar = d_pred[:, t] @ params.W_F + d_hbar_next
        h_t = trace.hat_h[:, t]
        if use_ctx:
            u = np.concatenate([trace.context[:, t], h_t], axis=1)
            d_pre = d_hbar * (1.0 - hb ** 2)
            g.W_att += d_pre.T @ u
            du = d_pre @ params.W_att
            d_ctx, d_h = du[:, :k], du[:, k:]
            a = trace.bas[:, t]
            dH += trace.weights[:, t][:, :, None] * d_ctx[:, None, :]
            d_w = np.einsum("bfk,bk->bf", H, d_ctx)
            d_a = d_w * trace.mask[t] if mode == "mbas" else d_w
            if mode == "las" and w_align:
                d_a = d_a + w_align * att.la_loss_grad(a, trace.mask[t], stop_gradient)
            d_s = softmax_backward(a, d_a)
            d_h = d_h + np.einsum("bf,bfk->bk", d_s, H)
            dH += d_s[:, :, None] * h_t[:, None, :]
        else:
            d_h = d_hbar

        c1, c2 = trace.caches[t]
        gp2, dx2, dprev2 = lstm_cell_backward(c2, d_h + dh2, dc2)
        _accumulate(g.dec2, gp2)
        dh2, dc2 = dprev2.hidden, dprev2.cell
        gp1, dx1, dprev1 = lstm_cell_backward(c1, dx2 + dh1, dc1)
        _accumulate(g.dec1, gp1)
        dh1, dc1 = dprev1.hidden, dprev1.cell
        # the skeleton part of the input is data in train mode
        d_hbar_next = dx1[:, J:]

    # decoder initial state is the encoder's final state
    eh1, ec1, eh2, ec2 = dh1, dc1, dh2, dc2
    for t in reversed(range(f)):
        c1, c2 = enc.caches[t]
        gp2, dx2, dprev2 = lstm_cell_backward(c2, dH[:, t] + eh2, ec2)
        _accumulate(g.enc2, gp2)
        eh2, ec2 = dprev2.hidden, dprev2.cell
        gp1, _, dprev1 = lstm_cell_backward(c1, dx2 + eh1, ec1)
        _accumulate(g.enc1, gp1)
        eh1, ec1 = dprev1.hidden, dprev1.cell
    return g


def _accumulate(dst: LstmCellParams, src: LstmCellParams) -> None:
    dst.W += src.W
    dst.U += src.U
    dst.b += src.b
