"""Skeleton sequences: parsing, the canonical JSON format, the motion stream,
and temporal sampling/cropping augmentation.

Coordinates are float64 arrays shaped ``T_raw x 25 x 3`` in sensor meters.
Random draws go through :func:`make_rng`, a PCG64 generator seeded from a
sequence of integers, so streams are reproducible across platforms.
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

NUM_JOINTS = 25
DEFAULT_FRAMES = 30
UESTC_CROP_RATIO = (0.5, 1.0)
NTU_CROP_RATIO = (0.9, 1.0)

# 0-based NTU/Kinect v2 joint indices
SPINE_BASE = 0
LEFT_ARM_JOINTS = (5, 6, 7, 21, 22)  # elbow, wrist, hand, hand tip, thumb
LEFT_SHOULDER = 4
RIGHT_LEG_JOINTS = (17, 18, 19)  # knee, ankle, foot
RIGHT_HIP = 16

# standard NTU RGB+D evaluation protocols
NTU_CS_TRAIN_SUBJECTS = frozenset(
    [1, 2, 4, 5, 8, 9, 13, 14, 15, 16, 17, 18, 19, 25, 27, 28, 31, 34, 35, 38]
)
NTU_CV_TRAIN_CAMERAS = frozenset([2, 3])


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source:
            where += f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class EmptySampleError(ParseError):
    pass


class ValidationError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def make_rng(*seed: int) -> np.random.Generator:
    """PCG64 generator keyed on an integer tuple, e.g. ``(seed, sample_index)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(s) for s in seed])))


@dataclass
class SkeletonSequence:
    coords: np.ndarray
    label: int = 0
    subject: int = 0
    view: int = 0
    source: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        c = self.coords
        if c.ndim != 3 or c.shape[0] < 1 or c.shape[1:] != (NUM_JOINTS, 3):
            raise ValueError(f"skeleton coordinates must be T x {NUM_JOINTS} x 3, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("skeleton coordinates contain NaN or Inf")
        if self.label < 0:
            raise ValueError(f"label must be >= 0, got {self.label}")

    @property
    def num_frames(self) -> int:
        return self.coords.shape[0]


@dataclass
class FixedSample:
    position: np.ndarray
    motion: np.ndarray
    label: int

    @classmethod
    def from_position(cls, position: np.ndarray, label: int) -> "FixedSample":
        position = np.asarray(position, dtype=np.float64)
        return cls(position, motion_stream(position), int(label))


@dataclass
class Dataset:
    samples: list[SkeletonSequence]
    class_names: list[str]
    splits: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        K = len(self.class_names)
        for i, s in enumerate(self.samples):
            if s.label >= K:
                raise ValidationError(f"$.samples[{i}].label", f"label {s.label} >= class count {K}")
        for name, tags in self.splits.items():
            if len(tags) != len(self.samples):
                raise ValidationError(f"$.splits.{name}", f"{len(tags)} tags for {len(self.samples)} samples")
            bad = {t for t in tags if t not in ("train", "test")}
            if bad:
                raise ValidationError(f"$.splits.{name}", f"unknown split tags {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def default_protocol(self) -> str | None:
        return next(iter(self.splits), None)

    def subset(self, split: str, protocol: str | None = None) -> "Dataset":
        """Samples tagged ``split`` under ``protocol``; the whole dataset when no
        split assignment exists and ``split == 'train'``."""
        protocol = protocol or self.default_protocol()
        if protocol is None:
            if split == "train":
                return Dataset(list(self.samples), list(self.class_names))
            raise KeyError("dataset carries no split assignment")
        tags = self.splits[protocol]
        picked = [s for s, t in zip(self.samples, tags) if t == split]
        return Dataset(picked, list(self.class_names))


# ---------------------------------------------------------------------------
# NTU .skeleton text


class _Lines:
    def __init__(self, text: str, source: str | None):
        self.items = [(n, ln.strip()) for n, ln in enumerate(text.splitlines(), start=1) if ln.strip()]
        self.pos = 0
        self.source = source
        self.last = len(text.splitlines())

    def next(self, what: str) -> tuple[int, list[str]]:
        if self.pos >= len(self.items):
            raise ParseError(f"unexpected end of input, expected {what}", self.last + 1, self.source)
        n, ln = self.items[self.pos]
        self.pos += 1
        return n, ln.split()

    def count(self, what: str) -> tuple[int, int]:
        n, fields = self.next(what)
        if len(fields) != 1:
            raise ParseError(f"expected a single {what}, got {len(fields)} fields", n, self.source)
        try:
            value = int(fields[0])
        except ValueError:
            raise ParseError(f"{what} is not an integer: {fields[0]!r}", n, self.source) from None
        if value < 0:
            raise ParseError(f"{what} is negative", n, self.source)
        return n, value


def parse_ntu_skeleton(text: str, source: str | None = None) -> SkeletonSequence:
    """Decode one NTU RGB+D ``.skeleton`` file.

    When several bodies are tracked, the one with the largest motion energy
    (sum of squared frame-to-frame joint displacements) is kept; frames in
    which it is absent are dropped.
    """
    lines = _Lines(text, source)
    _, n_frames = lines.count("frame count")
    tracks: dict[str, dict[int, np.ndarray]] = {}
    order: list[str] = []
    for f in range(n_frames):
        _, n_bodies = lines.count("body count")
        for _b in range(n_bodies):
            n, info = lines.next("body info line")
            if not info:
                raise ParseError("empty body info line", n, source)
            body_id = info[0]
            n, n_joints = lines.count("joint count")
            if n_joints != NUM_JOINTS:
                raise ParseError(f"expected {NUM_JOINTS} joints, got {n_joints}", n, source)
            joints = np.empty((NUM_JOINTS, 3))
            for j in range(NUM_JOINTS):
                n, fields = lines.next(f"joint line {j + 1} of {NUM_JOINTS}")
                if len(fields) < 3:
                    raise ParseError(
                        f"joint line {j + 1} of {NUM_JOINTS} has {len(fields)} fields, expected >= 3", n, source
                    )
                try:
                    joints[j] = [float(v) for v in fields[:3]]
                except ValueError:
                    raise ParseError(f"non-numeric coordinate in {fields[:3]}", n, source) from None
                if not np.all(np.isfinite(joints[j])):
                    raise ParseError("non-finite coordinate", n, source)
            if body_id not in tracks:
                tracks[body_id] = {}
                order.append(body_id)
            tracks[body_id][f] = joints
    if not tracks:
        raise EmptySampleError("no body is tracked in any frame", None, source)
    best = max(order, key=lambda b: (motion_energy(tracks[b]), -order.index(b)))
    frames = [tracks[best][f] for f in sorted(tracks[best])]
    return SkeletonSequence(np.stack(frames), source=source or "")


def motion_energy(track: dict[int, np.ndarray]) -> float:
    """Sum of squared displacements between consecutive recorded frames."""
    frames = [track[f] for f in sorted(track)]
    return float(sum(np.sum((b - a) ** 2) for a, b in zip(frames, frames[1:])))


_NTU_NAME = re.compile(r"S(\d{3})C(\d{3})P(\d{3})R(\d{3})A(\d{3})")


def parse_ntu_file(path: str | os.PathLike) -> SkeletonSequence:
    """Parse a ``.skeleton`` file; camera, performer and action are read from
    an ``SsssCcccPpppRrrrAaaa`` file name when present."""
    path = os.fspath(path)
    with open(path, encoding="utf-8") as fh:
        seq = parse_ntu_skeleton(fh.read(), source=path)
    m = _NTU_NAME.search(os.path.basename(path))
    if m:
        seq.view = int(m.group(2))
        seq.subject = int(m.group(3))
        seq.label = int(m.group(5)) - 1
    return seq


def ntu_dataset(paths: Sequence[str | os.PathLike]) -> Dataset:
    """Dataset from NTU files with cross-subject and cross-view split tags."""
    samples = [parse_ntu_file(p) for p in sorted(paths, key=os.fspath)]
    k = max((s.label for s in samples), default=-1) + 1
    splits = {
        "cross_subject": ["train" if s.subject in NTU_CS_TRAIN_SUBJECTS else "test" for s in samples],
        "cross_view": ["train" if s.view in NTU_CV_TRAIN_CAMERAS else "test" for s in samples],
    }
    return Dataset(samples, [f"A{i + 1:03d}" for i in range(k)], splits)


# ---------------------------------------------------------------------------
# canonical JSON


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ValidationError(path, message)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and np.isfinite(v)


def dataset_from_obj(doc) -> Dataset:
    _require(isinstance(doc, dict), "$", "expected an object")
    _require("classes" in doc and "samples" in doc, "$", "missing 'classes' or 'samples'")
    classes = doc["classes"]
    _require(isinstance(classes, list) and all(isinstance(c, str) for c in classes), "$.classes", "expected a list of strings")
    raw = doc["samples"]
    _require(isinstance(raw, list), "$.samples", "expected a list")
    samples = []
    for i, s in enumerate(raw):
        p = f"$.samples[{i}]"
        _require(isinstance(s, dict), p, "expected an object")
        for key in ("label", "subject", "view"):
            _require(_is_int(s.get(key)), f"{p}.{key}", "expected an integer")
        _require(0 <= s["label"] < len(classes), f"{p}.label", f"label {s['label']} outside [0, {len(classes)})")
        frames = s.get("frames")
        _require(isinstance(frames, list) and len(frames) >= 1, f"{p}.frames", "expected a non-empty list of frames")
        for t, fr in enumerate(frames):
            fp = f"{p}.frames[{t}]"
            _require(isinstance(fr, list) and len(fr) == NUM_JOINTS, fp, f"expected {NUM_JOINTS} joints")
            for j, xyz in enumerate(fr):
                _require(
                    isinstance(xyz, list) and len(xyz) == 3 and all(_is_num(v) for v in xyz),
                    f"{fp}[{j}]",
                    "expected [x, y, z] finite numbers",
                )
        source = s.get("source", "")
        _require(isinstance(source, str), f"{p}.source", "expected a string")
        samples.append(
            SkeletonSequence(np.array(frames, dtype=np.float64), s["label"], s["subject"], s["view"], source)
        )
    splits = doc.get("splits", {})
    _require(isinstance(splits, dict), "$.splits", "expected an object")
    for name, tags in splits.items():
        _require(isinstance(tags, list) and len(tags) == len(samples), f"$.splits.{name}", "expected one tag per sample")
        for i, t in enumerate(tags):
            _require(t in ("train", "test"), f"$.splits.{name}[{i}]", "expected 'train' or 'test'")
    return Dataset(samples, list(classes), {k: list(v) for k, v in splits.items()})


def parse_canonical_json(text: str) -> Dataset:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError("$", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return dataset_from_obj(doc)


def dataset_to_obj(ds: Dataset) -> dict:
    samples = []
    for s in ds.samples:
        item = {"label": int(s.label), "subject": int(s.subject), "view": int(s.view), "frames": s.coords.tolist()}
        if s.source:
            item["source"] = s.source
        samples.append(item)
    doc = {"classes": list(ds.class_names), "samples": samples}
    if ds.splits:
        doc["splits"] = {k: list(v) for k, v in ds.splits.items()}
    return doc


def write_canonical_json(ds: Dataset) -> str:
    # Python floats serialize via repr, the shortest string that round-trips
    return json.dumps(dataset_to_obj(ds), separators=(",", ":")) + "\n"


def load_dataset(path: str | os.PathLike) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return parse_canonical_json(fh.read())


# ---------------------------------------------------------------------------
# streams and frame selection


def motion_stream(position: np.ndarray) -> np.ndarray:
    """Frame-to-frame displacement, zero-padded on the last frame so the
    result has the same shape as ``position``."""
    position = np.asarray(position, dtype=np.float64)
    if position.ndim < 1 or position.shape[0] < 2:
        raise ValueError(f"motion stream needs at least 2 frames, got shape {position.shape}")
    out = np.zeros_like(position)
    out[:-1] = position[1:] - position[:-1]
    return out


def center_on_spine(coords: np.ndarray) -> np.ndarray:
    """Translate so the first frame's spine-base joint sits at the origin."""
    return coords - coords[0, SPINE_BASE]


def even_indices(length: int, frames: int) -> np.ndarray:
    """``round(k * (length - 1) / (frames - 1))`` for ``k = 0..frames-1``."""
    if frames == 1:
        return np.zeros(1, dtype=np.int64)
    k = np.arange(frames)
    # floor(x + 0.5): round half up, independent of numpy's banker's rounding
    return np.floor(k * (length - 1) / (frames - 1) + 0.5).astype(np.int64)


def _fixed(seq: SkeletonSequence, idx: np.ndarray, center: bool = False) -> FixedSample:
    coords = center_on_spine(seq.coords) if center else seq.coords
    return FixedSample.from_position(coords[idx], seq.label)


def uniform_select(seq: SkeletonSequence, frames: int = DEFAULT_FRAMES, center: bool = False) -> FixedSample:
    """Deterministic evenly spaced frame selection used at evaluation time."""
    return _fixed(seq, even_indices(seq.num_frames, frames), center)


def random_sample_indices(n_raw: int, frames: int, rng: np.random.Generator) -> np.ndarray:
    if n_raw >= frames:
        idx = rng.choice(n_raw, size=frames, replace=False)
    else:
        idx = rng.integers(0, n_raw, size=frames)
    return np.sort(idx)


def temporal_random_sample(
    seq: SkeletonSequence, frames: int = DEFAULT_FRAMES, rng: np.random.Generator | None = None, center: bool = False
) -> FixedSample:
    """Random ``frames`` frames kept in temporal order (with replacement only
    when the sequence is shorter than ``frames``)."""
    rng = rng if rng is not None else make_rng(0)
    return _fixed(seq, random_sample_indices(seq.num_frames, frames, rng), center)


def _check_ratio(ratio_range) -> tuple[float, float]:
    lo, hi = (float(r) for r in ratio_range)
    if not (0.0 < lo <= hi <= 1.0):
        raise ValueError(f"crop ratio range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]")
    return lo, hi


def crop_window(n_raw: int, ratio_range, rng: np.random.Generator) -> tuple[int, int]:
    """Random ``(start, length)`` with ``length = max(1, round(r * n_raw))``."""
    lo, hi = _check_ratio(ratio_range)
    r = rng.uniform(lo, hi)
    length = max(1, int(np.floor(r * n_raw + 0.5)))
    length = min(length, n_raw)
    start = int(rng.integers(0, n_raw - length + 1))
    return start, length


def temporal_random_crop(
    seq: SkeletonSequence,
    ratio_range=UESTC_CROP_RATIO,
    frames: int = DEFAULT_FRAMES,
    rng: np.random.Generator | None = None,
    center: bool = False,
) -> FixedSample:
    """Crop a random sub-series, then take ``frames`` evenly spaced frames of it."""
    rng = rng if rng is not None else make_rng(0)
    start, length = crop_window(seq.num_frames, ratio_range, rng)
    return _fixed(seq, start + even_indices(length, frames), center)


@dataclass
class AugmentConfig:
    n_sample: int = 4
    n_crop: int = 4
    crop_ratio: tuple[float, float] = UESTC_CROP_RATIO
    frames: int = DEFAULT_FRAMES
    center: bool = False

    def __post_init__(self):
        if self.n_sample < 0 or self.n_crop < 0:
            raise ValueError("augmentation counts must be >= 0")
        self.crop_ratio = _check_ratio(self.crop_ratio)
        if self.frames < 2:
            raise ValueError("frames must be >= 2")

    @property
    def per_sample(self) -> int:
        return self.n_sample + self.n_crop


def augment_sequence(seq: SkeletonSequence, config: AugmentConfig, rng: np.random.Generator) -> list[FixedSample]:
    out = [temporal_random_sample(seq, config.frames, rng, config.center) for _ in range(config.n_sample)]
    out += [temporal_random_crop(seq, config.crop_ratio, config.frames, rng, config.center) for _ in range(config.n_crop)]
    return out


def augment(
    samples: Dataset | Iterable[SkeletonSequence], config: AugmentConfig | None = None, seed: int = 0
) -> list[FixedSample]:
    """Expand each sequence into ``n_sample + n_crop`` fixed-length samples.

    Sample ``i`` draws from its own stream ``make_rng(seed, i)``, so results
    do not depend on processing order.
    """
    config = config or AugmentConfig()
    seqs = samples.samples if isinstance(samples, Dataset) else list(samples)
    out: list[FixedSample] = []
    for i, seq in enumerate(seqs):
        out.extend(augment_sequence(seq, config, make_rng(seed, i)))
    return out


# ---------------------------------------------------------------------------
# synthetic data


def standing_pose() -> np.ndarray:
    """Rough Kinect v2 rest pose (meters, y up, subject facing the camera)."""
    p = np.zeros((NUM_JOINTS, 3))
    p[0] = (0.0, 0.0, 3.0)  # spine base
    p[1] = (0.0, 0.30, 3.0)  # spine mid
    p[2] = (0.0, 0.55, 3.0)  # neck
    p[3] = (0.0, 0.70, 3.0)  # head
    p[4] = (-0.18, 0.50, 3.0)  # left shoulder
    p[5] = (-0.22, 0.25, 3.0)  # left elbow
    p[6] = (-0.24, 0.02, 3.0)  # left wrist
    p[7] = (-0.25, -0.05, 3.0)  # left hand
    p[8] = (0.18, 0.50, 3.0)  # right shoulder
    p[9] = (0.22, 0.25, 3.0)
    p[10] = (0.24, 0.02, 3.0)
    p[11] = (0.25, -0.05, 3.0)
    p[12] = (-0.10, -0.02, 3.0)  # left hip
    p[13] = (-0.11, -0.45, 3.0)
    p[14] = (-0.11, -0.85, 3.0)
    p[15] = (-0.12, -0.90, 2.92)
    p[16] = (0.10, -0.02, 3.0)  # right hip
    p[17] = (0.11, -0.45, 3.0)  # right knee
    p[18] = (0.11, -0.85, 3.0)  # right ankle
    p[19] = (0.12, -0.90, 2.92)  # right foot
    p[20] = (0.0, 0.50, 3.0)  # spine shoulder
    p[21] = (-0.26, -0.12, 3.0)  # left hand tip
    p[22] = (-0.22, -0.08, 2.97)  # left thumb
    p[23] = (0.26, -0.12, 3.0)
    p[24] = (0.22, -0.08, 2.97)
    return p


SYNTHETIC_CLASSES = ["left_arm_wave", "right_leg_swing", "body_translation"]


def _synthetic_sequence(cls: int, n_frames: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    pose = standing_pose() + rng.normal(0.0, 0.02, (1, 3)) + rng.normal(0.0, 0.01, (NUM_JOINTS, 3))
    t = np.arange(n_frames) / n_frames
    coords = np.repeat(pose[None], n_frames, axis=0)
    cycles = rng.uniform(1.0, 2.0)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * cycles * t + phase)
    if cls == 0:
        amp = rng.uniform(0.12, 0.2)
        # swing the forearm/hand chain sideways and forwards, growing along the chain
        for j, gain in zip(LEFT_ARM_JOINTS, (0.6, 1.0, 1.1, 1.2, 1.1)):
            coords[:, j, 0] += -amp * gain * wave
            coords[:, j, 1] += amp * gain * 0.5 * (1 - np.cos(2 * np.pi * cycles * t + phase))
    elif cls == 1:
        amp = rng.uniform(0.12, 0.2)
        for j, gain in zip(RIGHT_LEG_JOINTS, (0.6, 1.0, 1.1)):
            coords[:, j, 2] += -amp * gain * wave
            coords[:, j, 1] += amp * gain * 0.3 * (1 + wave)
    elif cls == 2:
        direction = rng.normal(size=3)
        direction[1] = 0.0
        direction /= np.linalg.norm(direction)
        speed = rng.uniform(0.3, 0.6)
        coords += (speed * t)[:, None, None] * direction
    else:
        raise ValueError(f"unknown synthetic class {cls}")
    return coords + rng.normal(0.0, noise, coords.shape)


def make_synthetic_dataset(
    n_per_class: int = 40,
    n_test_per_class: int = 10,
    noise: float = 0.01,
    frame_range: tuple[int, int] = (40, 60),
    seed: int = 0,
) -> Dataset:
    """Three-class toy dataset: left-arm oscillation, right-leg oscillation and
    whole-body translation, with Gaussian coordinate noise of std ``noise``.

    The last ``n_test_per_class`` samples of each class are tagged ``test``
    under the ``default`` protocol.
    """
    rng = make_rng(seed)
    samples, tags = [], []
    for cls in range(len(SYNTHETIC_CLASSES)):
        for i in range(n_per_class):
            n_frames = int(rng.integers(frame_range[0], frame_range[1] + 1))
            coords = _synthetic_sequence(cls, n_frames, noise, rng)
            samples.append(SkeletonSequence(coords, cls, subject=i, view=0, source=f"synthetic:{cls}:{i}"))
            tags.append("test" if i >= n_per_class - n_test_per_class else "train")
    return Dataset(samples, list(SYNTHETIC_CLASSES), {"default": tags})
