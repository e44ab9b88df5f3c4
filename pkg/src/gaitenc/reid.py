"""Gait features for re-identification, the recognition network, and CMC metrics.

Labels are 1-based identity indices throughout (class index = label - 1).
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import OptimizerState, glorot_uniform, sgd_momentum_step, softmax
from .seq2seq import decode, encode
from .skeldata import SkeletonSequence
from .trainer import Checkpoint

FEATURE_KINDS = ("age", "encoded_state")


class FeatureError(ValueError):
    pass


@dataclass
class FeatureSet:
    """Skeleton-level features, ``values`` has shape ``(N, f, D)``."""

    seq_ids: list[str]
    labels: np.ndarray
    values: np.ndarray

    @property
    def width(self) -> int:
        return self.values.shape[-1]

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        """Every skeleton-level vector with its sequence's label."""
        N, f, D = self.values.shape
        return self.values.reshape(N * f, D), np.repeat(self.labels, f)


def extract_features(sequences: list[SkeletonSequence], ckpt: Checkpoint,
                     kind: str = "age", batch_size: int = 256) -> FeatureSet:
    """Per-step ``[c^X; c^Y; c^Z]`` (``age``) or ``[h^X; h^Y; h^Z]`` (``encoded_state``).

    The decoder runs free (feeding back its own predictions), so labels and
    target frames never enter the features.
    """
    if kind not in FEATURE_KINDS:
        raise FeatureError(f"feature kind must be one of {FEATURE_KINDS}")
    attn = ckpt.config.attn
    if kind == "age" and not attn.uses_context:
        raise FeatureError("AGE features need an attention-enabled checkpoint "
                           "(this one was trained with attention 'none')")
    if not sequences:
        raise FeatureError("no sequences to encode")
    X = np.stack([s.frames for s in sequences])
    if X.shape[2] != ckpt.joints:
        raise FeatureError(f"sequences have {X.shape[2]} joints, checkpoint expects {ckpt.joints}")
    N, f = X.shape[:2]
    k = ckpt.hidden
    out = np.empty((N, f, 3 * k))
    for b0 in range(0, N, batch_size):
        xb = X[b0:b0 + batch_size]
        for d, params in enumerate(ckpt.model):
            enc = encode(np.ascontiguousarray(xb[..., d]), params)
            if kind == "age":
                vals = decode(enc, None, params, attn, "test").context
            else:
                vals = enc.H
            out[b0:b0 + batch_size, :, d * k:(d + 1) * k] = vals
    return FeatureSet([s.seq_id for s in sequences], np.array([s.label for s in sequences]), out)


def write_features_csv(fs: FeatureSet, path) -> None:
    N, f, D = fs.values.shape
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence_id", "step", "label", *[f"v{i}" for i in range(D)]])
        for n in range(N):
            for t in range(f):
                w.writerow([fs.seq_ids[n], t + 1, int(fs.labels[n]), *map(repr, fs.values[n, t].tolist())])


def read_features_csv(path) -> FeatureSet:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FeatureError(f"{path}: empty feature file") from None
        for col in ("sequence_id", "step", "label"):
            if col not in header:
                raise FeatureError(f"{path}: missing '{col}' column")
        i_id, i_step, i_label = (header.index(c) for c in ("sequence_id", "step", "label"))
        value_cols = [i for i, c in enumerate(header) if c.startswith("v")]
        if not value_cols:
            raise FeatureError(f"{path}: no feature value columns")
        groups: dict[str, list] = {}
        labels: dict[str, int] = {}
        for row in reader:
            sid = row[i_id]
            try:
                label = int(row[i_label])
                vals = [float(row[i]) for i in value_cols]
                step = int(row[i_step])
            except (ValueError, IndexError) as exc:
                raise FeatureError(f"{path}: malformed row for {sid} ({exc})") from None
            if labels.setdefault(sid, label) != label:
                raise FeatureError(f"{path}: sequence {sid} has conflicting labels")
            groups.setdefault(sid, []).append((step, vals))
    if not groups:
        raise FeatureError(f"{path}: no feature rows")
    lengths = {len(v) for v in groups.values()}
    if len(lengths) != 1:
        raise FeatureError(f"{path}: sequences have differing numbers of steps {sorted(lengths)}")
    ids = list(groups)
    values = np.array([[v for _, v in sorted(groups[s])] for s in ids])
    return FeatureSet(ids, np.array([labels[s] for s in ids]), values)


# ---------------------------------------------------------------------------
# Recognition network: tanh hidden layer + softmax
# ---------------------------------------------------------------------------

@dataclass
class RecognizerConfig:
    hidden: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    l2: float = 0.0
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    standardize: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "RecognizerConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown recognizer config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RecognitionParams:
    W1: np.ndarray   # (hidden, D)
    b1: np.ndarray
    W2: np.ndarray   # (C, hidden)
    b2: np.ndarray
    mean: np.ndarray = field(default=None)   # input standardisation, fitted on training features
    scale: np.ndarray = field(default=None)

    def __post_init__(self):
        D = self.W1.shape[1]
        if self.mean is None:
            self.mean = np.zeros(D)
        if self.scale is None:
            self.scale = np.ones(D)
        if self.W2.shape[1] != self.W1.shape[0] or self.b1.shape != (self.W1.shape[0],) \
                or self.b2.shape != (self.W2.shape[0],):
            raise ValueError("recognition parameter shapes are inconsistent")

    @property
    def num_classes(self) -> int:
        return self.W2.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    def tensors(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, num_classes: int,
             hidden: int = 128) -> "RecognitionParams":
        return cls(glorot_uniform(rng, hidden, input_dim), np.zeros(hidden),
                   glorot_uniform(rng, num_classes, hidden), np.zeros(num_classes))


def recognizer_forward(p: RecognitionParams, X: np.ndarray):
    Z = (X - p.mean) / p.scale
    A = np.tanh(Z @ p.W1.T + p.b1)
    probs = softmax(A @ p.W2.T + p.b2, axis=-1)
    return probs, (Z, A)


def cross_entropy_grad(p: RecognitionParams, X: np.ndarray, y_idx: np.ndarray):
    """Mean cross-entropy over rows and its gradient (order of ``p.tensors()``)."""
    probs, (Z, A) = recognizer_forward(p, X)
    n = len(X)
    loss = -float(np.mean(np.log(probs[np.arange(n), y_idx] + 1e-300)))
    d_logits = probs.copy()
    d_logits[np.arange(n), y_idx] -= 1.0
    d_logits /= n
    dW2 = d_logits.T @ A
    db2 = d_logits.sum(axis=0)
    d_pre = (d_logits @ p.W2) * (1.0 - A ** 2)
    dW1 = d_pre.T @ Z
    db1 = d_pre.sum(axis=0)
    return loss, [dW1, db1, dW2, db2]


def _label_indices(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 1 or labels.max() > num_classes):
        raise ValueError(f"labels must lie in 1..{num_classes}")
    return labels - 1


def train_recognizer(X: np.ndarray, labels, num_classes: int,
                     config: RecognizerConfig | None = None) -> RecognitionParams:
    """Fit the recognition head on fixed skeleton-level features ``X`` (rows)."""
    cfg = config or RecognizerConfig()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("need a non-empty (n, D) feature matrix")
    y = _label_indices(labels, num_classes)
    if len(y) != len(X):
        raise ValueError("one label per feature row required")
    rng = np.random.default_rng(cfg.seed)
    p = RecognitionParams.init(rng, X.shape[1], num_classes, cfg.hidden)
    if cfg.standardize:
        p.mean = X.mean(axis=0)
        std = X.std(axis=0)
        p.scale = np.where(std > 1e-12, std, 1.0)
    opt = OptimizerState(cfg.lr, cfg.momentum, cfg.l2)
    params = p.tensors()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(X))
        for b0 in range(0, len(X), cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            _, grads = cross_entropy_grad(p, X[idx], y[idx])
            sgd_momentum_step(params, grads, opt)
    return p


def predict_proba(p: RecognitionParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != p.input_dim:
        raise FeatureError(f"features have width {X.shape[-1]}, recognizer expects {p.input_dim}")
    return recognizer_forward(p, X)[0]


def sequence_prediction(step_scores) -> np.ndarray:
    """Mean of the per-skeleton probability vectors of one sequence."""
    s = np.asarray(step_scores, dtype=np.float64)
    if s.ndim != 2 or len(s) == 0:
        raise ValueError("need a non-empty (f, C) score matrix")
    return s.mean(axis=0)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    rank1: float
    cmc: np.ndarray
    nauc: float
    ranks: np.ndarray
    scores: np.ndarray
    seq_ids: list[str] = field(default_factory=list)

    def to_dict(self, include_scores: bool = True) -> dict:
        d = {"rank1": self.rank1, "nauc": self.nauc, "cmc": self.cmc.tolist(),
             "num_sequences": int(len(self.ranks)), "num_classes": int(len(self.cmc))}
        if include_scores:
            d["sequences"] = [{"id": s, "rank": int(r), "scores": row.tolist()}
                              for s, r, row in zip(self.seq_ids, self.ranks, self.scores)]
        return d


def true_class_ranks(scores: np.ndarray, labels) -> np.ndarray:
    """1-based rank of each row's true class; ties go to the lower class index."""
    scores = np.asarray(scores, dtype=np.float64)
    y = _label_indices(labels, scores.shape[1])
    true = scores[np.arange(len(y)), y][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    ahead = (scores > true) | ((scores == true) & (cols < y[:, None]))
    return 1 + ahead.sum(axis=1)


def cmc_from_ranks(ranks: np.ndarray, num_classes: int) -> np.ndarray:
    r = np.asarray(ranks)
    return np.array([np.mean(r <= k) for k in range(1, num_classes + 1)])


def evaluate_scores(scores, labels, seq_ids=None) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or len(scores) == 0:
        raise ValueError("need a non-empty (sequences, classes) score matrix")
    ranks = true_class_ranks(scores, labels)
    cmc = cmc_from_ranks(ranks, scores.shape[1])
    return EvalReport(float(cmc[0]), cmc, float(cmc.mean()), ranks, scores,
                      list(seq_ids) if seq_ids is not None else [str(i) for i in range(len(scores))])


def evaluate(test: FeatureSet, recognizer: RecognitionParams) -> EvalReport:
    C = recognizer.num_classes
    if test.labels.max() > C:
        raise FeatureError(f"test labels exceed the recognizer's {C} classes")
    N, f, D = test.values.shape
    probs = predict_proba(recognizer, test.values.reshape(N * f, D)).reshape(N, f, C)
    seq_scores = np.stack([sequence_prediction(p) for p in probs])
    return evaluate_scores(seq_scores, test.labels, test.seq_ids)


def write_report(report: EvalReport, json_path, cmc_path=None) -> None:
    Path(json_path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if cmc_path is not None:
        with Path(cmc_path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "cmc"])
            for r, v in enumerate(report.cmc, 1):
                w.writerow([r, repr(float(v))])
