"""Skeleton sequences: data model, JSONL ingestion, preprocessing, synthetic gait.

JSONL dataset format, one video per line::

    {"id": "p01", "frames": [[[x, y, z], ...J joints], ...T frames]}

Optional keys: ``"video"`` (video name), ``"split"`` (``"train"``/``"test"``)
and ``"joints"`` (declared joint count). Lines sharing an ``id`` are videos of
the same person; labels 1..C follow first appearance of each id.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

AXES = ("X", "Y", "Z")
NUM_JOINTS = 20
DISCARD = 10
SEQ_LEN = 6

JOINT_NAMES = (
    "hip_center", "spine", "shoulder_center", "head",
    "shoulder_left", "elbow_left", "wrist_left", "hand_left",
    "shoulder_right", "elbow_right", "wrist_right", "hand_right",
    "hip_left", "knee_left", "ankle_left", "foot_left",
    "hip_right", "knee_right", "ankle_right", "foot_right",
)


class DataError(ValueError):
    """Malformed or inconsistent skeleton data."""


@dataclass
class Video:
    person: str
    label: int
    frames: np.ndarray  # (T, J, 3)
    name: str = ""
    split: str | None = None


@dataclass
class SkeletonSequence:
    frames: np.ndarray  # (f, J, 3)
    label: int
    seq_id: str = ""

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class AxisChannel:
    axis: str
    values: np.ndarray  # (f, J)


@dataclass
class Dataset:
    name: str
    joints: int
    identities: list[str]
    videos: list[Video]
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.identities)

    def split_videos(self, split: str) -> list[Video]:
        return [v for v in self.videos if v.split == split]


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def load_dataset(path, joints: int | None = None, name: str | None = None) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such dataset file: {path}")
    videos: list[Video] = []
    ids: dict[str, int] = {}
    J = joints
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                person = str(rec["id"])
                raw = rec["frames"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from None
            if J is None:
                J = rec.get("joints")
            for t, frame in enumerate(raw):
                if J is None:
                    J = len(frame)
                if len(frame) != J:
                    raise DataError(
                        f"{path}:{lineno}: inconsistent joint count in frame {t} "
                        f"({len(frame)} joints, expected {J})")
                if any(len(joint) != 3 for joint in frame):
                    raise DataError(f"{path}:{lineno}: frame {t} has a joint without 3 coordinates")
            frames = np.asarray(raw, dtype=np.float64).reshape(len(raw), J or 0, 3)
            if not np.all(np.isfinite(frames)):
                raise DataError(f"{path}:{lineno}: non-finite coordinates")
            split = rec.get("split")
            if split not in (None, "train", "test"):
                raise DataError(f"{path}:{lineno}: unknown split {split!r}")
            label = ids.setdefault(person, len(ids) + 1)
            vname = str(rec.get("video", f"{person}#{sum(v.person == person for v in videos)}"))
            videos.append(Video(person, label, frames, vname, split))
    if not videos:
        raise DataError(f"empty dataset: {path}")
    if J is None:
        raise DataError(f"{path}: no frames in any record")
    ds = Dataset(name or path.stem, int(J), list(ids), videos, {"source": str(path)})
    if all(v.split is None for v in videos):
        assign_leave_one_out(ds)
    return ds


def save_dataset(ds: Dataset, path) -> None:
    with Path(path).open("w") as fh:
        for v in ds.videos:
            rec = {"id": v.person, "video": v.name}
            if v.split is not None:
                rec["split"] = v.split
            rec["frames"] = v.frames.tolist()
            fh.write(json.dumps(rec) + "\n")


def assign_leave_one_out(ds: Dataset) -> None:
    """Mark the last video of every identity as test, the rest as train.

    Identities with a single video keep it in training.
    """
    last: dict[str, Video] = {}
    counts: dict[str, int] = {}
    for v in ds.videos:
        v.split = "train"
        last[v.person] = v
        counts[v.person] = counts.get(v.person, 0) + 1
    for person, v in last.items():
        if counts[person] > 1:
            v.split = "test"


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def window_starts(num_frames: int, f: int, discard: int = DISCARD) -> list[int]:
    """Offsets (into the trimmed video) of the length-``f`` windows at stride ``f/2``."""
    if f < 2 or f % 2:
        raise ValueError(f"sequence length f must be even and >= 2, got {f}")
    if discard < 0:
        raise ValueError("discard must be >= 0")
    usable = num_frames - 2 * discard
    if usable < f:
        return []
    return list(range(0, usable - f + 1, f // 2))


def preprocess(raw_video, f: int = SEQ_LEN, discard: int = DISCARD,
               center: bool = False) -> list[SkeletonSequence]:
    """Trim ``discard`` frames at both ends and cut half-overlapping windows."""
    if isinstance(raw_video, Video):
        frames, label, vname = raw_video.frames, raw_video.label, raw_video.name
    else:
        frames, label, vname = np.asarray(raw_video, dtype=np.float64), 0, ""
    starts = window_starts(len(frames), f, discard)
    trimmed = frames[discard:len(frames) - discard] if discard else frames
    if center:
        trimmed = trimmed - trimmed[:, :1, :]
    return [SkeletonSequence(trimmed[s:s + f].copy(), label, f"{vname}@{s}") for s in starts]


def build_sequences(ds: Dataset, split: str | None, f: int = SEQ_LEN, discard: int = DISCARD,
                    center: bool = False) -> list[SkeletonSequence]:
    videos = ds.videos if split in (None, "all") else ds.split_videos(split)
    out: list[SkeletonSequence] = []
    skipped = 0
    for v in videos:
        seqs = preprocess(v, f, discard, center)
        skipped += not seqs
        out.extend(seqs)
    if skipped:
        log.info("%d videos too short for f=%d after discarding %d frames", skipped, f, discard)
    return out


def split_axes(seq: SkeletonSequence) -> tuple[AxisChannel, AxisChannel, AxisChannel]:
    return tuple(AxisChannel(a, seq.frames[:, :, d].copy()) for d, a in enumerate(AXES))


def merge_axes(channels: Iterable[AxisChannel]) -> np.ndarray:
    return np.stack([c.values for c in channels], axis=-1)


def stack_axis(seqs: list[SkeletonSequence], axis: int) -> np.ndarray:
    """``(B, f, J)`` array of one coordinate axis over a batch of sequences."""
    return np.stack([s.frames[:, :, axis] for s in seqs])


def reverse_target(channel):
    """Row ``t`` of the result is row ``f - t + 1`` of the input (time axis -2)."""
    if isinstance(channel, AxisChannel):
        return AxisChannel(channel.axis, channel.values[::-1].copy())
    return np.ascontiguousarray(np.asarray(channel)[..., ::-1, :])


# ---------------------------------------------------------------------------
# Synthetic gait generator
# ---------------------------------------------------------------------------

SEGMENTS = {  # metres, for a body scale of 1
    "pelvis_spine": 0.12, "spine_neck": 0.32, "neck_head": 0.20,
    "shoulder_half": 0.18, "upper_arm": 0.28, "forearm": 0.25, "hand": 0.08,
    "hip_half": 0.09, "hip_drop": 0.06, "thigh": 0.43, "shin": 0.42, "foot": 0.12,
}

# joint -> (base amplitude rad, base phase rad, rest angle rad)
OSCILLATORS = {
    "hip_left": (0.40, 0.0, 0.0), "hip_right": (0.40, np.pi, 0.0),
    "knee_left": (0.50, -np.pi / 2, 0.55), "knee_right": (0.50, np.pi / 2, 0.55),
    "ankle_left": (0.20, np.pi / 4, 0.0), "ankle_right": (0.20, 5 * np.pi / 4, 0.0),
    "shoulder_left": (0.30, np.pi, 0.0), "shoulder_right": (0.30, 0.0, 0.0),
    "elbow_left": (0.25, np.pi, 0.35), "elbow_right": (0.25, 0.0, 0.35),
    "trunk_pitch": (0.04, np.pi / 2, 0.05), "trunk_roll": (0.05, 0.0, 0.0),
}


@dataclass
class GaitIdentityParams:
    limbs: dict[str, float]
    frequency: float  # strides per second
    amplitudes: dict[str, float]
    phases: dict[str, float]
    noise: float

    def __post_init__(self):
        if any(v <= 0 for v in self.limbs.values()):
            raise ValueError("limb lengths must be positive")
        if self.frequency <= 0:
            raise ValueError("stride frequency must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass
class GeneratorConfig:
    num_identities: int = 5
    videos_per_identity: int = 10
    frames_per_video: int = 100
    fps: float = 30.0
    noise: float = 0.01
    body_scale_range: tuple[float, float] = (0.88, 1.12)
    limb_jitter: float = 0.08
    frequency_range: tuple[float, float] = (0.75, 1.15)
    amplitude_jitter: float = 0.3
    phase_jitter: float = 0.25
    position_jitter: float = 0.05
    camera_distance: float = 2.5
    seq_len: int = SEQ_LEN
    discard: int = DISCARD

    def validate(self) -> None:
        if self.num_identities < 2:
            raise ValueError("need >=2 identities")
        if self.videos_per_identity < 1:
            raise ValueError("need >=1 video per identity")
        if self.frames_per_video <= 2 * self.discard + self.seq_len:
            raise ValueError(
                f"frames_per_video must exceed 2*discard + f = {2 * self.discard + self.seq_len}")
        if self.fps <= 0 or self.noise < 0:
            raise ValueError("fps must be positive and noise non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def draw_identity(rng: np.random.Generator, cfg: GeneratorConfig) -> GaitIdentityParams:
    scale = rng.uniform(*cfg.body_scale_range)
    limbs = {k: v * scale * rng.uniform(1 - cfg.limb_jitter, 1 + cfg.limb_jitter)
             for k, v in SEGMENTS.items()}
    freq = rng.uniform(*cfg.frequency_range)
    amps, phases = {}, {}
    for name, (amp, phase, _) in OSCILLATORS.items():
        amps[name] = amp * rng.uniform(1 - cfg.amplitude_jitter, 1 + cfg.amplitude_jitter)
        phases[name] = phase + rng.normal(0.0, cfg.phase_jitter)
    return GaitIdentityParams(limbs, freq, amps, phases, cfg.noise)


def _down(theta):
    """Unit vectors of a hanging segment pitched forward (towards -z) by ``theta``."""
    return np.stack([np.zeros_like(theta), -np.cos(theta), -np.sin(theta)], axis=-1)


def gait_frames(ident: GaitIdentityParams, times: np.ndarray,
                root_offset=(0.0, 0.0, 2.5)) -> np.ndarray:
    """Noise-free ``(T, 20, 3)`` joint positions of a person walking on the spot.

    Camera frame: x lateral, y up, z depth; the subject faces the camera (-z).
    """
    L = ident.limbs
    ang = {name: rest + ident.amplitudes[name]
           * np.sin(2 * np.pi * ident.frequency * times + ident.phases[name])
           for name, (_, _, rest) in OSCILLATORS.items()}
    T = len(times)
    out = np.zeros((T, NUM_JOINTS, 3))
    leg = L["thigh"] + L["shin"] + 0.05
    root = np.tile(np.array([root_offset[0], leg + root_offset[1], root_offset[2]]), (T, 1))

    pitch, roll = ang["trunk_pitch"], ang["trunk_roll"]
    up = np.stack([np.sin(roll), np.cos(roll) * np.cos(pitch), -np.cos(roll) * np.sin(pitch)], -1)
    side = np.stack([np.cos(roll), -np.sin(roll), np.zeros(T)], -1)
    spine = root + L["pelvis_spine"] * up
    neck = spine + L["spine_neck"] * up
    out[:, 0], out[:, 1], out[:, 2] = root, spine, neck
    out[:, 3] = neck + L["neck_head"] * up

    for sgn, s, first in ((-1, "left", 4), (1, "right", 8)):
        shoulder = neck + sgn * L["shoulder_half"] * side
        th = ang[f"shoulder_{s}"]
        elbow = shoulder + L["upper_arm"] * _down(th)
        wrist = elbow + L["forearm"] * _down(th + ang[f"elbow_{s}"])
        hand = wrist + L["hand"] * _down(th + ang[f"elbow_{s}"])
        out[:, first:first + 4] = np.stack([shoulder, elbow, wrist, hand], axis=1)

    for sgn, s, first in ((-1, "left", 12), (1, "right", 16)):
        hip = root + sgn * L["hip_half"] * side - L["hip_drop"] * up
        th = ang[f"hip_{s}"]
        knee = hip + L["thigh"] * _down(th)
        shin_angle = th - ang[f"knee_{s}"]
        ankle = knee + L["shin"] * _down(shin_angle)
        foot = ankle + L["foot"] * _down(shin_angle + np.pi / 2 + ang[f"ankle_{s}"])
        out[:, first:first + 4] = np.stack([hip, knee, ankle, foot], axis=1)
    return out


def generate_synthetic(num_identities: int = 5, videos_per_identity: int = 10,
                       frames_per_video: int = 100, seed: int = 0,
                       config: GeneratorConfig | None = None) -> Dataset:
    """Deterministic synthetic gait dataset; last video of each identity is the test video."""
    cfg = config or GeneratorConfig()
    cfg = GeneratorConfig(**{**cfg.to_dict(), "num_identities": num_identities,
                             "videos_per_identity": videos_per_identity,
                             "frames_per_video": frames_per_video})
    cfg.validate()
    rng = np.random.default_rng(seed)
    idents = [draw_identity(rng, cfg) for _ in range(cfg.num_identities)]
    videos = []
    times = np.arange(cfg.frames_per_video) / cfg.fps
    for c, ident in enumerate(idents, 1):
        person = f"p{c:02d}"
        for n in range(cfg.videos_per_identity):
            t0 = rng.uniform(0.0, 1.0 / ident.frequency)
            offset = (rng.uniform(-cfg.position_jitter, cfg.position_jitter),
                      0.0,
                      cfg.camera_distance + rng.uniform(-cfg.position_jitter, cfg.position_jitter))
            frames = gait_frames(ident, times + t0, offset)
            if ident.noise:
                frames = frames + rng.normal(0.0, ident.noise, size=frames.shape)
            split = "test" if n == cfg.videos_per_identity - 1 and cfg.videos_per_identity > 1 else "train"
            videos.append(Video(person, c, frames, f"{person}_v{n:02d}", split))
    meta = {"generator": cfg.to_dict(), "seed": seed,
            "identities": [{"frequency": i.frequency, "limbs": i.limbs} for i in idents]}
    return Dataset("synthetic", NUM_JOINTS, [f"p{c:02d}" for c in range(1, cfg.num_identities + 1)],
                   videos, meta)
