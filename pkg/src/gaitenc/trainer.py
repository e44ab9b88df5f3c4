"""Self-supervised training of the three per-axis models, and checkpoints.

Checkpoint file layout (all integers little-endian)::

    b"GAITCKPT"                      8-byte magic
    uint32  format version           currently 1
    uint64  header length n
    n bytes canonical JSON header    config, shapes, epoch, RNG state
    float64 blocks                   params X, Y, Z (TENSOR_NAMES order),
                                     then velocities in the same order
    uint32  CRC32 of everything above
"""
from __future__ import annotations

import csv
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .attention import AttentionConfig
from .numerics import (
    NumericalError,
    OptimizerState,
    clip_by_global_norm,
    sgd_momentum_step,
)
from .seq2seq import (
    TENSOR_NAMES,
    AxisParams,
    DecodeTrace,
    alignment_loss,
    axis_backward,
    decode,
    encode,
    is_weight_name,
    reconstruction_loss,
)
from .skeldata import AXES, Dataset, SkeletonSequence, build_sequences, reverse_target

log = logging.getLogger(__name__)

MAGIC = b"GAITCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    seq_len: int = 6
    hidden: int = 256
    window: int = 6
    lambda_rec: float = 1.0
    lambda_align: float = 1.0
    l2: float = 0.02
    lr: float = 0.0005
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 200
    seed: int = 0
    attention: str = "las"
    reverse: bool = True
    discard: int = 10
    center: bool = False
    clip_norm: float = 5.0
    align_stop_gradient: bool = False

    def __post_init__(self):
        AttentionConfig(self.attention, self.window)
        if self.seq_len < 2 or self.seq_len % 2:
            raise ValueError("seq_len must be even and >= 2")
        for name in ("hidden", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.discard < 0:
            raise ValueError("epochs and discard must be non-negative")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.l2 < 0 or self.clip_norm <= 0:
            raise ValueError("invalid optimiser settings")

    @property
    def attn(self) -> AttentionConfig:
        return AttentionConfig(self.attention, self.window)

    @property
    def align_weight(self) -> float:
        return self.lambda_align if self.attention == "las" else 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**self.to_dict(), **kw})


# ---------------------------------------------------------------------------
# Model and objective
# ---------------------------------------------------------------------------

def init_model(rng: np.random.Generator, joints: int, hidden: int) -> list[AxisParams]:
    return [AxisParams.init(rng, joints, hidden) for _ in AXES]


def flat_tensors(model: list[AxisParams]) -> list[np.ndarray]:
    return [t for p in model for t in p.tensors()]


def weight_flags(model: list[AxisParams]) -> list[bool]:
    return [is_weight_name(n) for _ in model for n in TENSOR_NAMES]


def l2_norm_sq(model: list[AxisParams]) -> float:
    return float(sum(np.vdot(t, t) for t, w in zip(flat_tensors(model), weight_flags(model)) if w))


def axis_targets(x: np.ndarray, reverse: bool) -> np.ndarray:
    return reverse_target(x) if reverse else x


def total_loss(axis_traces: dict[str, DecodeTrace], targets: dict[str, np.ndarray],
               config: TrainConfig, model: list[AxisParams] | None = None) -> dict[str, float]:
    """Batch objective: mean over sequences of the per-axis weighted losses + L2.

    Returns ``{"total", "rec", "align", "l2"}`` where ``rec``/``align`` are
    the unweighted batch means summed over axes.
    """
    missing = [a for a in AXES if a not in axis_traces]
    if missing:
        raise ValueError(f"missing axis traces: {missing}")
    rec = sum(float(np.mean(reconstruction_loss(axis_traces[a].pred, targets[a]))) for a in AXES)
    align = 0.0
    if config.attention == "las":
        align = sum(float(np.mean(alignment_loss(axis_traces[a]))) for a in AXES)
    l2 = config.l2 * l2_norm_sq(model) if model is not None and config.l2 else 0.0
    total = config.lambda_rec * rec + config.align_weight * align + l2
    return {"total": total, "rec": rec, "align": align, "l2": l2}


def batch_objective(model: list[AxisParams], batch: np.ndarray, config: TrainConfig,
                    with_grad: bool = True):
    """Loss parts and per-axis gradients of the data terms for a ``(B, f, J, 3)`` batch.

    The returned gradients exclude the L2 term (the optimiser adds it).
    """
    B = batch.shape[0]
    attn = config.attn
    traces, targets, grads = {}, {}, []
    for d, (axis, params) in enumerate(zip(AXES, model)):
        x = np.ascontiguousarray(batch[..., d])
        target = axis_targets(x, config.reverse)
        enc = encode(x, params)
        trace = decode(enc, target, params, attn, "train")
        traces[axis], targets[axis] = trace, target
        if with_grad:
            grads.append(axis_backward(enc, trace, target, params,
                                       config.lambda_rec / B, config.align_weight / B,
                                       config.align_stop_gradient))
    parts = total_loss(traces, targets, config, model)
    return parts, grads


def axis_objective(params: AxisParams, x: np.ndarray, config: TrainConfig) -> float:
    """One axis' share of the total loss: its batch-mean data terms plus its L2 term.

    The total loss is the sum of this over the three axes, so its partial
    derivatives w.r.t. one axis' parameters equal those of the total.
    """
    target = axis_targets(x, config.reverse)
    trace = decode(encode(x, params), target, params, config.attn, "train")
    value = config.lambda_rec * float(np.mean(reconstruction_loss(trace.pred, target)))
    if config.attention == "las":
        value += config.align_weight * float(np.mean(alignment_loss(trace)))
    if config.l2:
        value += config.l2 * l2_norm_sq([params])
    return value


def objective_gradient(model: list[AxisParams], batch: np.ndarray, config: TrainConfig):
    """Total loss and its full gradient (data terms plus ``2*l2*w`` on weights)."""
    parts, grads = batch_objective(model, batch, config)
    flat = [g for gp in grads for g in gp.tensors()]
    for g, p, w in zip(flat, flat_tensors(model), weight_flags(model)):
        if w:
            g += 2.0 * config.l2 * p
    return parts["total"], flat


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    joints: int
    model: list[AxisParams]
    velocity: list[np.ndarray] = field(default_factory=list)
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def hidden(self) -> int:
        return self.model[0].hidden

    def header(self) -> dict:
        return {
            "format": "gaitenc-checkpoint", "version": self.version,
            "config": self.config.to_dict(), "joints": self.joints, "hidden": self.hidden,
            "epoch": self.epoch, "rng_state": self.rng_state,
            "tensors": [[f"{a}/{n}", list(t.shape)] for a, p in zip(AXES, self.model)
                        for n, t in zip(TENSOR_NAMES, p.tensors())],
            "has_velocity": bool(self.velocity),
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode()
        blocks = flat_tensors(self.model) + list(self.velocity)
        body = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in blocks)
        payload = MAGIC + struct.pack("<IQ", self.version, len(head)) + head + body
        return payload + struct.pack("<I", zlib.crc32(payload))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < len(MAGIC) + 16 or data[:len(MAGIC)] != MAGIC:
            raise CheckpointError("not a gaitenc checkpoint (bad magic or truncated)")
        payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(payload) != crc:
            raise CheckpointError("checkpoint checksum mismatch (corrupted or truncated file)")
        version, hlen = struct.unpack("<IQ", payload[8:20])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        head = json.loads(payload[20:20 + hlen])
        shapes = [tuple(s) for _, s in head["tensors"]]
        if head["has_velocity"]:
            shapes = shapes + shapes
        arrays, offset = [], 20 + hlen
        for shape in shapes:
            n = int(np.prod(shape)) * 8
            arrays.append(np.frombuffer(payload[offset:offset + n], dtype="<f8")
                          .astype(np.float64).reshape(shape))
            offset += n
        if offset != len(payload):
            raise CheckpointError("checkpoint payload size does not match its header")
        per_axis = len(TENSOR_NAMES)
        model = [AxisParams.from_tensors(arrays[i * per_axis:(i + 1) * per_axis])
                 for i in range(len(AXES))]
        velocity = arrays[len(AXES) * per_axis:]
        return cls(TrainConfig.from_dict(head["config"]), head["joints"], model, velocity,
                   head["epoch"], head["rng_state"], version)

    def optimizer(self) -> OptimizerState:
        opt = OptimizerState(self.config.lr, self.config.momentum, self.config.l2)
        opt.velocity = [v.copy() for v in self.velocity]
        return opt


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def training_array(data, config: TrainConfig) -> np.ndarray:
    if isinstance(data, Dataset):
        seqs = build_sequences(data, "train", config.seq_len, config.discard, config.center)
    else:
        seqs = list(data)
    if not seqs:
        raise ValueError("empty training set")
    if isinstance(seqs[0], SkeletonSequence):
        return np.stack([s.frames for s in seqs])
    return np.asarray(seqs, dtype=np.float64)


def train(data, config: TrainConfig, resume: Checkpoint | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Train for ``config.epochs`` epochs; returns the checkpoint and per-epoch losses.

    ``data`` is a :class:`Dataset` (its train split is used), a list of
    sequences, or a ``(N, f, J, 3)`` array. With ``resume`` the parameters,
    optimiser velocity and RNG state continue from the checkpoint.
    """
    X = training_array(data, config)
    N, f, J, _ = X.shape
    if f != config.seq_len:
        raise ValueError(f"sequences have length {f}, config says {config.seq_len}")
    if resume is None:
        rng = np.random.default_rng(config.seed)
        model = init_model(rng, J, config.hidden)
        opt = OptimizerState(config.lr, config.momentum, config.l2)
        start = 0
    else:
        if resume.joints != J:
            raise ValueError(f"checkpoint has {resume.joints} joints, data has {J}")
        rng = np.random.default_rng(0)
        rng.bit_generator.state = resume.rng_state
        model = [p.copy() for p in resume.model]
        opt = resume.optimizer()
        start = resume.epoch

    params = flat_tensors(model)
    is_weight = weight_flags(model)
    opt.ensure(params)
    curve = []
    for epoch in range(start, start + config.epochs):
        order = rng.permutation(N)
        sums = {"total": 0.0, "rec": 0.0, "align": 0.0}
        for b0 in range(0, N, config.batch_size):
            idx = order[b0:b0 + config.batch_size]
            parts, grads = batch_objective(model, X[idx], config)
            if not np.isfinite(parts["total"]):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch + 1}, batch starting {b0}: {parts}")
            for key in sums:
                sums[key] += parts[key] * len(idx)
            flat = [g for gp in grads for g in gp.tensors()]
            clip_by_global_norm(flat, config.clip_norm)
            sgd_momentum_step(params, flat, opt, is_weight)
        row = {"epoch": epoch + 1, **{k: v / N for k, v in sums.items()}}
        if not np.isfinite(row["total"]):
            raise NumericalError(f"non-finite epoch loss at epoch {epoch + 1}")
        curve.append(row)
        if on_epoch is not None:
            on_epoch(row)
    ckpt = Checkpoint(config, J, model, list(opt.velocity), start + config.epochs,
                      rng.bit_generator.state)
    return ckpt, curve


def write_loss_csv(curve: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "total", "L_R", "L_A"])
        for row in curve:
            w.writerow([row["epoch"], repr(row["total"]), repr(row["rec"]), repr(row["align"])])


def read_loss_csv(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{"epoch": int(r["epoch"]), "total": float(r["total"]), "rec": float(r["L_R"]),
                 "align": float(r["L_A"])} for r in csv.DictReader(fh)]
