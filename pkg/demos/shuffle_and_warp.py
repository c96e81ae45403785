"""Build one multi-action view from three clips and look at its seams.

Each synthetic clip is rendered under its own random camera, so plain
concatenation leaves a jump at every clip boundary. Warping fits a
similarity transform across each seam and removes most of that jump.

    python3 demos/shuffle_and_warp.py
"""
import numpy as np

from duoclr import shuffle, shuffle_and_warp, synth_trimmed

clips = {k: synth_trimmed(k, 24, 0.02, camera_seed=10 + k, motion_seed=k) for k in (0, 1, 2)}
order = (2, 0, 1)


def seam_jumps(view):
    """Mean joint displacement across each clip boundary."""
    return [float(np.linalg.norm(view.frames[s] - view.frames[s - 1], axis=-1).mean())
            for s, _ in view.boundaries[1:]]


def inner_step(view):
    """Typical frame-to-frame displacement inside the clips, for scale."""
    steps = np.linalg.norm(np.diff(view.frames, axis=0), axis=-1).mean(axis=1)
    seams = {s - 1 for s, _ in view.boundaries[1:]}
    return float(np.median([v for t, v in enumerate(steps) if t not in seams]))


plain = shuffle(clips, order)
warped = shuffle_and_warp(clips, order)
print(f"order {order}, boundaries {plain.boundaries}, frames {warped.frames.shape}")
print(f"typical step inside a clip: {inner_step(plain):.3f}")
print("seam jump, plain shuffle: ", ", ".join(f"{j:.3f}" for j in seam_jumps(plain)))
print("seam jump, shuffle + warp:", ", ".join(f"{j:.3f}" for j in seam_jumps(warped)))
