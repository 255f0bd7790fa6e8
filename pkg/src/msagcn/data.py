"""Dataset ingestion, the canonical on-disk sample format, preprocessing,
and a synthetic gait generator for desk-scale experiments.

Canonical format: JSON lines, one sample per line with keys
``id``, ``label`` (class token), ``t``, ``v`` and ``xyz`` (flat
row-major t*v*3 float list).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

LABELS = ("happy", "sad", "angry", "neutral")
LABEL_TO_INDEX = {name: i for i, name in enumerate(LABELS)}

NOMINAL_FRAMES = {16: 240, 21: 48}
SUPPORTED_JOINT_COUNTS = (16, 21)


class ParseError(ValueError):
    """A data file could not be parsed."""


class DatasetError(ValueError):
    """Samples are mutually inconsistent or violate an invariant."""


class LabelError(ValueError):
    """An unknown emotion label token or index."""


@dataclass
class GaitSample:
    """One labeled gait sequence: [T, V, 3] joint coordinates in meters."""

    joints: np.ndarray
    label: int
    id: str

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.joints.ndim != 3 or self.joints.shape[2] != 3:
            raise DatasetError(f"sample {self.id}: joints must be [T, V, 3], "
                               f"got {self.joints.shape}")
        if self.joints.shape[0] < 2:
            raise DatasetError(f"sample {self.id}: needs at least 2 frames")
        if self.joints.shape[1] not in SUPPORTED_JOINT_COUNTS:
            raise DatasetError(f"sample {self.id}: unsupported joint count "
                               f"{self.joints.shape[1]}")
        if not np.isfinite(self.joints).all():
            raise ParseError(f"sample {self.id}: non-finite coordinate")
        if not 0 <= self.label < len(LABELS):
            raise LabelError(f"sample {self.id}: label {self.label} out of range")

    @property
    def frames(self) -> int:
        return self.joints.shape[0]

    @property
    def joint_count(self) -> int:
        return self.joints.shape[1]


@dataclass
class GaitDataset:
    samples: list

    def __post_init__(self):
        if self.samples:
            v = self.samples[0].joint_count
            for s in self.samples:
                if s.joint_count != v:
                    raise DatasetError(
                        f"mixed joint counts: {v} vs {s.joint_count} ({s.id})"
                    )

    def __len__(self):
        return len(self.samples)

    @property
    def joint_count(self) -> int:
        if not self.samples:
            raise DatasetError("empty dataset has no joint count")
        return self.samples[0].joint_count

    def class_histogram(self):
        hist = {name: 0 for name in LABELS}
        for s in self.samples:
            hist[LABELS[s.label]] += 1
        return hist


# ---------------------------------------------------------------------------
# canonical JSON-lines format


def save_canonical(dataset: GaitDataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in dataset.samples:
            t, v, _ = s.joints.shape
            rec = {
                "id": s.id,
                "label": LABELS[s.label],
                "t": t,
                "v": v,
                "xyz": s.joints.reshape(-1).tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def load_canonical(path) -> GaitDataset:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                sid = str(rec["id"])
                token = rec["label"]
                t, v = int(rec["t"]), int(rec["v"])
                xyz = np.asarray(rec["xyz"], dtype=np.float64)
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if token not in LABEL_TO_INDEX:
                raise LabelError(f"{path}:{lineno}: unknown label {token!r}")
            if xyz.size != t * v * 3:
                raise ParseError(
                    f"{path}:{lineno}: sample {sid}: expected {t * v * 3} "
                    f"coordinates, got {xyz.size}"
                )
            samples.append(GaitSample(xyz.reshape(t, v, 3), LABEL_TO_INDEX[token], sid))
    return GaitDataset(samples)


# ---------------------------------------------------------------------------
# raw Emotion-Gait style import


def import_emotion_gait(coords_path, labels_path, joint_count: int) -> GaitDataset:
    """Import whitespace-separated joint streams.

    The coordinates file holds one frame per row (3*V floats); blank
    lines separate consecutive samples.  The labels file maps sample
    index to class token, one ``index token`` pair per line.  Sequences
    are center-cropped or edge-padded to the dataset's nominal length.
    """
    if joint_count not in SUPPORTED_JOINT_COUNTS:
        raise DatasetError(f"unsupported joint count {joint_count}")
    labels = _read_label_file(labels_path)
    blocks = _read_frame_blocks(coords_path, joint_count)
    if len(blocks) != len(labels):
        raise DatasetError(
            f"{len(blocks)} samples in {coords_path} but {len(labels)} labels"
        )
    nominal = NOMINAL_FRAMES[joint_count]
    samples = []
    for i, frames in enumerate(blocks):
        joints = fit_length(frames.reshape(-1, joint_count, 3), nominal)
        samples.append(GaitSample(joints, labels[i], f"sample{i:05d}"))
    return GaitDataset(samples)


def _read_label_file(path):
    labels = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'index label'")
            try:
                idx = int(parts[0])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad sample index") from exc
            if parts[1] not in LABEL_TO_INDEX:
                raise LabelError(f"{path}:{lineno}: unknown label {parts[1]!r}")
            labels[idx] = LABEL_TO_INDEX[parts[1]]
    if sorted(labels) != list(range(len(labels))):
        raise ParseError(f"{path}: sample indices must be 0..{len(labels) - 1}")
    return [labels[i] for i in range(len(labels))]


def _read_frame_blocks(path, joint_count):
    width = 3 * joint_count
    blocks, current = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                if current:
                    blocks.append(np.array(current))
                    current = []
                continue
            if len(parts) != width:
                raise ParseError(
                    f"{path}:{lineno}: expected {width} values per frame, "
                    f"got {len(parts)}"
                )
            try:
                current.append([float(p) for p in parts])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric value") from exc
    if current:
        blocks.append(np.array(current))
    return blocks


def fit_length(joints: np.ndarray, nominal: int) -> np.ndarray:
    """Center-crop longer sequences, edge-pad shorter ones to ``nominal``."""
    t = joints.shape[0]
    if t == nominal:
        return joints
    if t > nominal:
        start = (t - nominal) // 2
        return joints[start:start + nominal]
    pad_front = (nominal - t) // 2
    pad_back = nominal - t - pad_front
    return np.concatenate(
        [np.repeat(joints[:1], pad_front, axis=0),
         joints,
         np.repeat(joints[-1:], pad_back, axis=0)],
        axis=0,
    )


# ---------------------------------------------------------------------------
# preprocessing

ROOT_JOINT = 0


def center_sample(sample: GaitSample) -> np.ndarray:
    """Subtract the root joint's frame-0 position; returns [3, T, V]."""
    centered = sample.joints - sample.joints[0, ROOT_JOINT]
    return np.ascontiguousarray(centered.transpose(2, 0, 1))


def channel_stats(arrays):
    """Per-channel mean/std over a list of [3, T, V] arrays."""
    stacked = np.stack(arrays)
    mean = stacked.mean(axis=(0, 2, 3))
    std = stacked.std(axis=(0, 2, 3))
    if (std < 1e-12).any():
        warnings.warn("zero variance in a coordinate channel; clamping std",
                      stacklevel=2)
    return mean, np.maximum(std, 1e-8)


def preprocess(sample: GaitSample, stats=None) -> np.ndarray:
    """Root-center a sample and optionally z-score it with training-set
    statistics; returns a [1, 3, T, V] feature map."""
    x = center_sample(sample)
    if stats is not None:
        mean, std = stats
        x = (x - np.asarray(mean)[:, None, None]) / np.asarray(std)[:, None, None]
    return x[None]


def dataset_arrays(samples):
    """Centered [N, 3, T, V] array plus the integer label vector."""
    xs = np.stack([center_sample(s) for s in samples])
    ys = np.array([s.label for s in samples], dtype=np.int64)
    return xs, ys


# ---------------------------------------------------------------------------
# synthetic gait generator


@dataclass(frozen=True)
class WalkerParams:
    """Kinematic signature of one emotion class."""

    stride_freq: float       # gait cycles per second
    arm_swing: float         # radians
    torso_pitch: float       # radians, forward tilt
    speed: float             # meters per second
    collapse: float          # 0..1 posture collapse factor

    def __post_init__(self):
        if self.stride_freq <= 0:
            raise DatasetError(f"stride frequency must be positive: {self.stride_freq}")


DEFAULT_CLASS_PARAMS = {
    "happy": WalkerParams(1.10, 0.55, -0.05, 1.30, 0.00),
    "sad": WalkerParams(0.70, 0.15, 0.35, 0.70, 0.30),
    "angry": WalkerParams(1.50, 0.95, 0.10, 1.60, 0.05),
    "neutral": WalkerParams(0.95, 0.35, 0.05, 1.00, 0.10),
}


@dataclass(frozen=True)
class SynthParams:
    class_params: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_PARAMS))
    noise_sigma: float = 0.01
    seed: int = 0
    frames: int = 48
    fps: float = 30.0
    heading_range: float = math.pi   # radians, uniform heading rotation
    jitter: float = 0.15         # relative per-sample parameter jitter

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise DatasetError("noise sigma must be >= 0")
        missing = set(LABELS) - set(self.class_params)
        if missing:
            raise DatasetError(f"missing class parameters for {sorted(missing)}")


# rest-pose offsets for the 16-joint skeleton, x=lateral, y=up, z=forward
_HIP_Y = 0.90
_SPINE_LEN = 0.25
_NECK_LEN = 0.25
_HEAD_LEN = 0.15
_SHOULDER_X = 0.20
_UPPER_ARM = 0.30
_FOREARM = 0.28
_HIP_X = 0.12
_THIGH = 0.45
_SHIN = 0.45


def _walker_frame(t, p: WalkerParams, phase):
    """Joint positions [16, 3] of the parametric walker at time ``t``."""
    w = 2.0 * math.pi * p.stride_freq
    leg_amp = min(0.25 + 0.18 * p.speed / max(p.stride_freq, 1e-6), 0.75)
    swing = math.sin(w * t + phase)

    drop = 0.12 * p.collapse
    pitch = p.torso_pitch + 0.25 * p.collapse
    root = np.array([0.0, _HIP_Y - drop, p.speed * t])

    def up_chain(length, base, extra_pitch=0.0):
        a = pitch + extra_pitch
        return base + length * np.array([0.0, math.cos(a), math.sin(a)])

    spine = up_chain(_SPINE_LEN * (1.0 - 0.3 * p.collapse), root)
    neck = up_chain(_NECK_LEN * (1.0 - 0.3 * p.collapse), spine)
    head = up_chain(_HEAD_LEN, neck, extra_pitch=0.6 * p.collapse)

    joints = np.zeros((16, 3))
    joints[0], joints[1], joints[2], joints[3] = root, spine, neck, head

    for side, sx, arm_phase in ((0, -1.0, math.pi), (1, 1.0, 0.0)):
        # arms swing opposite to the same-side leg
        shoulder = neck + np.array([sx * _SHOULDER_X, 0.0, 0.0])
        a_ang = p.arm_swing * math.sin(w * t + phase + arm_phase + math.pi)
        elbow = shoulder + np.array(
            [0.0, -_UPPER_ARM * math.cos(a_ang), _UPPER_ARM * math.sin(a_ang)]
        )
        hand_ang = a_ang * 1.2
        hand = elbow + np.array(
            [0.0, -_FOREARM * math.cos(hand_ang), _FOREARM * math.sin(hand_ang)]
        )
        hip = root + np.array([sx * _HIP_X, -0.02, 0.0])
        l_ang = leg_amp * math.sin(w * t + phase + arm_phase)
        knee = hip + np.array(
            [0.0, -_THIGH * math.cos(l_ang), _THIGH * math.sin(l_ang)]
        )
        # shin trails the thigh slightly during the swing
        s_ang = l_ang - 0.3 * leg_amp * max(math.cos(w * t + phase + arm_phase), 0.0)
        foot = knee + np.array(
            [0.0, -_SHIN * math.cos(s_ang), _SHIN * math.sin(s_ang)]
        )
        base = 4 + side * 3
        joints[base], joints[base + 1], joints[base + 2] = shoulder, elbow, hand
        leg_base = 10 + side * 3
        joints[leg_base], joints[leg_base + 1], joints[leg_base + 2] = hip, knee, foot
    return joints


def generate_synthetic(n_per_class: int, params: SynthParams) -> GaitDataset:
    """Seed-deterministic, class-balanced synthetic gait dataset on the
    16-joint skeleton.

    Class identity is carried by gait dynamics (stride frequency, swing
    amplitudes, posture) while a random heading, phase, and parameter
    jitter keep raw coordinates from separating the classes on their
    own.
    """
    if n_per_class < 1:
        raise DatasetError("n_per_class must be >= 1")
    rng = np.random.default_rng(params.seed)
    samples = []
    times = np.arange(params.frames) / params.fps
    for label, name in enumerate(LABELS):
        base = params.class_params[name]
        for i in range(n_per_class):
            j = params.jitter
            p = WalkerParams(
                stride_freq=base.stride_freq * (1.0 + j * rng.uniform(-1, 1)),
                arm_swing=max(base.arm_swing * (1.0 + j * rng.uniform(-1, 1)), 0.0),
                torso_pitch=base.torso_pitch + 0.05 * rng.uniform(-1, 1),
                speed=base.speed * (1.0 + j * rng.uniform(-1, 1)),
                collapse=float(np.clip(base.collapse + 0.05 * rng.uniform(-1, 1), 0, 1)),
            )
            phase = rng.uniform(0.0, 2.0 * math.pi)
            heading = rng.uniform(-params.heading_range, params.heading_range)
            joints = np.stack([_walker_frame(t, p, phase) for t in times])
            c, s = math.cos(heading), math.sin(heading)
            rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
            joints = joints @ rot.T
            joints += rng.normal(0.0, params.noise_sigma, size=joints.shape)
            samples.append(GaitSample(joints, label, f"{name}{i:04d}"))
    return GaitDataset(samples)
