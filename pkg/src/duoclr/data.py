"""Skeleton sequences, annotations, on-disk storage and synthetic data.

A skeleton sequence is a plain ``(T, V, 3)`` float array. Clips and videos
wrap one together with their labels. Sequences are stored in a small binary
container (``SKL1``) and datasets are described by a JSON manifest.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

MAGIC = b"SKL1"
SPATIAL_DIM = 3
MIN_SYNTH_FRAMES = 8
MAX_SYNTH_CLASSES = 12

TaskKind = Literal["multiclass", "multilabel"]


class DataError(ValueError):
    """Raised for malformed sequences, files or annotations."""


def as_sequence(frames, *, copy: bool = False) -> np.ndarray:
    """Validate ``frames`` as a ``(T, V, 3)`` skeleton sequence and return it."""
    arr = np.array(frames, copy=copy) if copy else np.asarray(frames)
    if arr.ndim != 3:
        raise DataError(f"expected a (T, V, C) array, got shape {arr.shape}")
    t, v, c = arr.shape
    if t < 1:
        raise DataError("sequence has no frames")
    if v < 2:
        raise DataError("sequence needs at least 2 joints")
    if c != SPATIAL_DIM:
        raise DataError("unsupported spatial dimension")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError("non-finite data")
    return arr


@dataclass
class TrimmedClip:
    frames: np.ndarray
    action_label: int | None
    clip_id: int

    def __post_init__(self):
        self.frames = as_sequence(self.frames)


@dataclass(frozen=True)
class SegmentAnnotation:
    action_class: int
    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise DataError(f"invalid segment span [{self.start}, {self.end})")

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass
class UntrimmedVideo:
    frames: np.ndarray
    segments: list[SegmentAnnotation]
    task_kind: TaskKind = "multiclass"
    video_id: int = 0
    split: str = "test"

    def __post_init__(self):
        self.frames = as_sequence(self.frames)
        validate_segments(self.segments, len(self.frames), self.task_kind)


def validate_segments(segments, num_frames: int, task_kind: str, num_classes: int | None = None):
    if task_kind not in ("multiclass", "multilabel"):
        raise DataError(f"unknown task kind {task_kind!r}")
    for seg in segments:
        if seg.end > num_frames:
            raise DataError(f"segment [{seg.start}, {seg.end}) exceeds {num_frames} frames")
        if num_classes is not None and not 0 <= seg.action_class < num_classes:
            raise DataError("label out of range")
    if task_kind == "multiclass":
        ordered = sorted(segments, key=lambda s: s.start)
        for a, b in zip(ordered, ordered[1:]):
            if b.start < a.end:
                raise DataError("overlap in multiclass annotation")


@dataclass
class Dataset:
    num_classes: int
    clips: list[TrimmedClip] = field(default_factory=list)
    videos: list[UntrimmedVideo] = field(default_factory=list)

    def classes(self) -> list[int]:
        return sorted({c.action_label for c in self.clips if c.action_label is not None})

    def split(self, name: str) -> list[UntrimmedVideo]:
        return [v for v in self.videos if v.split == name]


# -- storage -----------------------------------------------------------------

def save_sequence(seq, path) -> None:
    """Write a sequence in the ``SKL1`` format (little-endian, float32 payload)."""
    try:
        arr = as_sequence(seq)
    except DataError as exc:
        raise DataError(f"{exc}: refusing to write {path}") from None
    t, v, c = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise DataError(f"non-finite data: refusing to write {path}")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<III", t, v, c))
            fh.write(payload.tobytes(order="C"))
    except OSError as exc:
        raise OSError(f"cannot write skeleton file {path}: {exc}") from exc


def load_sequence(path) -> np.ndarray:
    """Read an ``SKL1`` file back into a ``(T, V, 3)`` float32 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise DataError(f"not a skeleton file: {path}")
    t, v, c = struct.unpack("<III", raw[4:16])
    if c != SPATIAL_DIM:
        raise DataError(f"unsupported spatial dimension: {path}")
    count = t * v * c
    if len(raw) - 16 != 4 * count:
        raise DataError(f"corrupt file: {path}")
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=16).reshape(t, v, c)
    return as_sequence(arr.astype(np.float32))


def load_dataset(manifest_path) -> Dataset:
    """Load a JSON manifest and every sequence it references.

    Entry paths are resolved relative to the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    with open(manifest_path) as fh:
        doc = json.load(fh)
    root = manifest_path.parent
    k = int(doc["num_classes"])
    ds = Dataset(num_classes=k)
    for entry in doc["entries"]:
        frames = load_sequence(root / entry["path"])
        kind = entry["kind"]
        if kind == "trimmed":
            label = entry.get("label")
            if label is not None and not 0 <= int(label) < k:
                raise DataError(f"label out of range in entry {entry['id']}")
            ds.clips.append(TrimmedClip(frames, None if label is None else int(label), int(entry["id"])))
        elif kind == "untrimmed":
            segs = [SegmentAnnotation(int(s["class"]), int(s["start"]), int(s["end"]))
                    for s in entry.get("segments", [])]
            task = entry.get("task_kind", "multiclass")
            validate_segments(segs, len(frames), task, k)
            ds.videos.append(UntrimmedVideo(frames, segs, task, int(entry["id"]),
                                            entry.get("split", "test")))
        else:
            raise DataError(f"unknown entry kind {kind!r}")
    return ds


def write_manifest(path, num_classes: int, entries: list[dict]) -> None:
    with open(path, "w") as fh:
        json.dump({"num_classes": num_classes, "entries": entries}, fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- skeleton graph ------------------------------------------------------------

JOINT_NAMES = (
    "pelvis", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)

DEFAULT_EDGES = (
    (0, 1), (1, 2), (2, 3),
    (2, 4), (4, 5), (5, 6),
    (2, 7), (7, 8), (8, 9),
    (0, 10), (10, 11), (11, 12),
    (0, 13), (13, 14), (14, 15),
)

REST_POSE = np.array([
    [0.00, 1.00, 0.00],
    [0.00, 1.25, 0.00],
    [0.00, 1.50, 0.00],
    [0.00, 1.70, 0.02],
    [-0.18, 1.48, 0.00],
    [-0.22, 1.20, 0.02],
    [-0.24, 0.95, 0.06],
    [0.18, 1.48, 0.00],
    [0.22, 1.20, 0.02],
    [0.24, 0.95, 0.06],
    [-0.10, 0.95, 0.00],
    [-0.11, 0.52, 0.02],
    [-0.12, 0.08, 0.00],
    [0.10, 0.95, 0.00],
    [0.11, 0.52, 0.02],
    [0.12, 0.08, 0.00],
])


def normalized_adjacency(num_joints: int, edges) -> np.ndarray:
    """Return ``D^-1/2 (A + I) D^-1/2`` for an undirected edge list."""
    a = np.eye(num_joints)
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


@dataclass(frozen=True)
class SkeletonGraph:
    num_joints: int
    edges: tuple[tuple[int, int], ...]

    @property
    def normalized_adjacency(self) -> np.ndarray:
        return normalized_adjacency(self.num_joints, self.edges)


def default_skeleton_graph() -> SkeletonGraph:
    return SkeletonGraph(len(JOINT_NAMES), DEFAULT_EDGES)


# -- synthetic data --------------------------------------------------------------

def rotation_from_euler(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Rotation for row vectors: yaw about y, then pitch about x, then roll about z."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    ry = np.array([[cy, 0, -sy], [0, 1, 0], [sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, sp], [0, -sp, cp]])
    rz = np.array([[cr, sr, 0], [-sr, cr, 0], [0, 0, 1]])
    return ry @ rx @ rz


def _class_signature(action_class: int):
    rng = np.random.default_rng([0x5EED, action_class])
    v = len(JOINT_NAMES)
    phase = rng.uniform(0.0, 2 * np.pi, size=v)
    direction = rng.normal(size=(v, SPATIAL_DIM))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    amplitude = rng.uniform(0.05, 0.25, size=v)
    amplitude[0] *= 0.3  # keep the pelvis near its rest position
    return phase, direction, amplitude


def class_frequency(action_class: int) -> float:
    """Cycles per clip of a synthetic class."""
    return 0.5 + 0.25 * action_class


def _motion(action_class: int, num_frames: int, motion_seed) -> np.ndarray:
    phase, direction, amplitude = _class_signature(action_class)
    rng = np.random.default_rng([0xA17, action_class, *np.atleast_1d(motion_seed)])
    offset = rng.uniform(0.0, 2 * np.pi)
    gain = rng.uniform(0.8, 1.2)
    t = np.arange(num_frames)[:, None] / num_frames
    wave = np.sin(2 * np.pi * class_frequency(action_class) * t + phase[None, :] + offset)
    return gain * (amplitude * wave)[:, :, None] * direction[None, :, :]


def random_camera(camera_seed):
    """Draw ``(rotation, translation, scale)`` of a whole-clip camera transform."""
    rng = np.random.default_rng([0xCA3, *np.atleast_1d(camera_seed)])
    yaw = rng.uniform(0.0, 2 * np.pi)
    pitch, roll = rng.uniform(-0.2, 0.2, size=2)
    translation = rng.uniform(-1.0, 1.0, size=SPATIAL_DIM)
    scale = rng.uniform(0.7, 1.3)
    return rotation_from_euler(yaw, pitch, roll), translation, scale


def _render(classes, num_frames, noise_sigma, camera_seed, motion_seed) -> np.ndarray:
    x = np.repeat(REST_POSE[None], num_frames, axis=0)
    for k, cls in enumerate(classes):
        x = x + _motion(cls, num_frames, [*np.atleast_1d(motion_seed), k])
    if noise_sigma > 0:
        noise_rng = np.random.default_rng([0x401, *classes, *np.atleast_1d(motion_seed)])
        x = x + noise_rng.normal(scale=noise_sigma, size=x.shape)
    rot, trans, scale = random_camera(camera_seed)
    return (scale * (x @ rot + trans)).astype(np.float32)


def _check_class(action_class: int):
    if not 0 <= action_class < MAX_SYNTH_CLASSES:
        raise DataError(f"synthetic class must lie in [0, {MAX_SYNTH_CLASSES})")


def synth_trimmed(action_class: int, T: int, noise_sigma: float = 0.0,
                  camera_seed=0, motion_seed=0, clip_id: int = 0) -> TrimmedClip:
    """Generate a single-action clip on the default 16-joint skeleton.

    Each class moves every joint sinusoidally at ``0.5 + 0.25 * class`` cycles
    per clip with a class-fixed phase and direction per joint. ``motion_seed``
    draws a global phase offset and gain; ``camera_seed`` draws the yaw,
    pitch, roll, translation and scale applied to the whole clip.
    """
    _check_class(action_class)
    if T < MIN_SYNTH_FRAMES:
        raise DataError("clip too short")
    frames = _render([action_class], T, noise_sigma, camera_seed, motion_seed)
    return TrimmedClip(frames, action_class, clip_id)


def synth_untrimmed(class_list, per_action_T: int, noise_sigma: float = 0.0, seed: int = 0,
                    task_kind: TaskKind = "multiclass", num_classes: int = 5,
                    video_id: int = 0, split: str = "test") -> UntrimmedVideo:
    """Generate a multi-action video by warping one clip per listed class.

    In the multilabel case each segment gets, with probability 0.5, a second
    class (different from its own) whose motion is added on top and which is
    annotated over the same span.
    """
    from .augment import warp_pair

    class_list = [int(c) for c in class_list]
    if not class_list:
        raise DataError("class_list must not be empty")
    if task_kind not in ("multiclass", "multilabel"):
        raise DataError(f"unknown task kind {task_kind!r}")
    if per_action_T < MIN_SYNTH_FRAMES:
        raise DataError("clip too short")
    for c in class_list:
        _check_class(c)
    rng = np.random.default_rng([0x517, seed])
    frames = None
    segments = []
    for slot, cls in enumerate(class_list):
        classes = [cls]
        start = slot * per_action_T
        span = (start, start + per_action_T)
        if task_kind == "multilabel" and rng.random() < 0.5:
            others = [c for c in range(max(num_classes, 2)) if c != cls]
            extra = int(rng.choice(others))
            classes.append(extra)
            segments.append(SegmentAnnotation(extra, *span))
        segments.append(SegmentAnnotation(cls, *span))
        clip = _render(classes, per_action_T, noise_sigma, [seed, slot, 1], [seed, slot, 2])
        frames = clip if frames is None else warp_pair(frames, clip)
    segments.sort(key=lambda s: (s.start, s.action_class))
    return UntrimmedVideo(frames, segments, task_kind, video_id, split)


def trim_untrimmed(video: UntrimmedVideo, first_id: int = 0) -> list[TrimmedClip]:
    """Cut a multiclass video into one labelled clip per annotated segment."""
    if video.task_kind != "multiclass":
        raise DataError("cannot trim overlapping annotations")
    return [TrimmedClip(video.frames[s.start:s.end].copy(), s.action_class, first_id + i)
            for i, s in enumerate(video.segments)]
