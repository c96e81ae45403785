"""Multi-action permutations and skeleton augmentations.

Joints are row vectors throughout, so a similarity transform acts on a frame
``x`` of shape ``(V, 3)`` as ``s * (x @ R + t)``.
"""

from __future__ import annotations

import math
from collections.abc import Hashable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .data import DataError, TrimmedClip, as_sequence


@dataclass(frozen=True)
class SimilarityTransform:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("rotation is not orthogonal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation is not proper (det != +1)")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @classmethod
    def identity(cls) -> SimilarityTransform:
        return cls(np.eye(3), np.zeros(3), 1.0)

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.scale * (x @ self.rotation + self.translation)


def transform_residual(transform: SimilarityTransform, target, source) -> float:
    """Frobenius norm of ``transform(source) - target``."""
    return float(np.linalg.norm(transform.apply(source) - np.asarray(target, dtype=np.float64)))


def estimate_similarity_transform(target_frame, source_frame) -> SimilarityTransform:
    """Least-squares similarity transform mapping ``source_frame`` onto ``target_frame``.

    Closed-form Umeyama solution: SVD of the centred cross-covariance with a
    sign correction so that the rotation is proper.

    Parameters
    ----------
    target_frame, source_frame : (V, 3) array
        Corresponding joints, ``V >= 3``.

    Returns
    -------
    SimilarityTransform
        ``(R, t, s)`` minimising ``sum_v || s (source_v R + t) - target_v ||^2``.
    """
    dst = np.asarray(target_frame, dtype=np.float64)
    src = np.asarray(source_frame, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise DataError("frames must both be (V, 3) with equal V")
    n = src.shape[0]
    if n < 3:
        raise DataError("need at least 3 joints")
    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    src_c = src - src_mean
    dst_c = dst - dst_mean
    sv = np.linalg.svd(src_c, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-12 * sv[0]:
        raise DataError("degenerate frame")

    cov = dst_c.T @ src_c / n
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[-1] = -1.0
    # column-vector rotation: dst ~ c * R_col @ src + b
    r_col = u @ np.diag(sign) @ vt
    src_var = (src_c ** 2).sum() / n
    c = float((d * sign).sum() / src_var)
    b = dst_mean - c * r_col @ src_mean
    if c <= 0:
        raise DataError("degenerate frame")
    return SimilarityTransform(r_col.T, b / c, c)


@dataclass
class MultiActionPermutation:
    frames: np.ndarray
    permutation: tuple
    boundaries: list[tuple[int, int]]

    @property
    def granularity(self) -> int:
        return len(self.permutation)


def _clip_frames(clip) -> np.ndarray:
    if isinstance(clip, TrimmedClip):
        return clip.frames
    return as_sequence(clip)


def _check_permutation(clips: Mapping, permutation: Sequence[Hashable]):
    for key in permutation:
        if key not in clips:
            raise DataError(f"unknown slot {key!r}")
    if len(set(permutation)) != len(permutation):
        raise DataError("not a permutation")
    if len(permutation) != len(clips):
        raise DataError("not a permutation")


def shuffle(clips: Mapping[Hashable, object], permutation: Sequence[Hashable]) -> MultiActionPermutation:
    """Concatenate the clips in ``permutation`` order without modifying coordinates."""
    permutation = tuple(permutation)
    _check_permutation(clips, permutation)
    parts = [_clip_frames(clips[key]) for key in permutation]
    if len({p.shape[1:] for p in parts}) != 1:
        raise DataError("clips must share V and C")
    boundaries = []
    start = 0
    for p in parts:
        boundaries.append((start, start + len(p)))
        start += len(p)
    frames = parts[0].copy() if len(parts) == 1 else np.concatenate(parts, axis=0)
    return MultiActionPermutation(frames, permutation, boundaries)


def warp_pair(x_i, x_j) -> np.ndarray:
    """Append ``x_j`` to ``x_i`` after mapping it into ``x_i``'s camera frame.

    The transform is fitted between the last frame of ``x_i`` and the first
    frame of ``x_j`` and applied to every frame of ``x_j``.
    """
    x_i = as_sequence(x_i)
    x_j = as_sequence(x_j)
    if x_i.shape[1:] != x_j.shape[1:]:
        raise DataError("sequences must share V and C")
    transform = estimate_similarity_transform(x_i[-1], x_j[0])
    tail = transform.apply(x_j).astype(x_i.dtype, copy=False)
    return np.concatenate([x_i, tail], axis=0)


def shuffle_and_warp(clips: Mapping[Hashable, object], permutation: Sequence[Hashable],
                     warp: bool = True) -> MultiActionPermutation:
    """Shuffle, then register each slot onto the running sequence (slot 1 is the anchor).

    ``warp=False`` gives the plain shuffle.
    """
    shuffled = shuffle(clips, permutation)
    if not warp or shuffled.granularity == 1:
        return shuffled
    out = _clip_frames(clips[shuffled.permutation[0]])
    for key in shuffled.permutation[1:]:
        out = warp_pair(out, _clip_frames(clips[key]))
    return MultiActionPermutation(out, shuffled.permutation, shuffled.boundaries)


def _seeded(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def shear(x, seed=None, max_shear: float = 0.3) -> np.ndarray:
    """Multiply every joint by one random 3x3 shear matrix with unit diagonal."""
    x = as_sequence(x)
    rng = _seeded(seed)
    m = np.eye(3)
    off = ~np.eye(3, dtype=bool)
    m[off] = rng.uniform(-max_shear, max_shear, size=6)
    return (x @ m).astype(x.dtype, copy=False)


def crop(x, seed=None, min_ratio: float = 0.6, max_ratio: float = 1.0) -> np.ndarray:
    """Take a random contiguous window and stretch it back to the original length."""
    x = as_sequence(x)
    t = len(x)
    if t < 8:
        raise DataError("clip too short to crop")
    rng = _seeded(seed)
    ratio = rng.uniform(min_ratio, max_ratio)
    length = min(t, max(1, math.ceil(ratio * t)))
    start = int(rng.integers(0, t - length + 1))
    if length == t:
        return x.copy()
    pos = np.linspace(start, start + length - 1, t)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, t - 1)
    w = (pos - lo)[:, None, None]
    # difference form keeps constant signals exact
    out = x[lo] + w * (x[hi] - x[lo])
    return out.astype(x.dtype, copy=False)
