import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from duoclr.augment import estimate_similarity_transform, transform_residual
from duoclr.data import (
    DEFAULT_EDGES,
    DataError,
    SegmentAnnotation,
    UntrimmedVideo,
    default_skeleton_graph,
    load_dataset,
    load_sequence,
    save_sequence,
    synth_trimmed,
    synth_untrimmed,
    trim_untrimmed,
    write_manifest,
)


def _adjacency_oracle(v, edges):
    a = np.eye(v)
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    d = a.sum(axis=1)
    out = np.empty_like(a)
    for i in range(v):
        for j in range(v):
            out[i, j] = a[i, j] / np.sqrt(d[i] * d[j])
    return out


# -- SKL1 files ------------------------------------------------------------------

def test_zero_sequence_file_is_40_bytes(tmp_path):
    path = tmp_path / "z.skl"
    save_sequence(np.zeros((1, 2, 3)), path)
    raw = path.read_bytes()
    assert len(raw) == 40
    assert raw[:4] == b"SKL1"
    assert struct.unpack("<III", raw[4:16]) == (1, 2, 3)


def test_payload_is_frame_major_little_endian(tmp_path):
    x = np.arange(2 * 2 * 3, dtype=np.float32).reshape(2, 2, 3)
    save_sequence(x, tmp_path / "a.skl")
    payload = np.frombuffer((tmp_path / "a.skl").read_bytes()[16:], dtype="<f4")
    np.testing.assert_array_equal(payload, np.arange(12))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(2, 5), st.just(3)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_save_load_round_trip_is_bitwise(tmp_path_factory, x):
    path = tmp_path_factory.mktemp("rt") / "x.skl"
    save_sequence(x, path)
    y = load_sequence(path)
    assert y.dtype == np.float32
    assert y.tobytes() == x.tobytes()


def test_nan_is_rejected_before_write(tmp_path):
    x = np.zeros((2, 2, 3))
    x[1, 0, 2] = np.nan
    with pytest.raises(DataError, match="non-finite data"):
        save_sequence(x, tmp_path / "n.skl")
    assert not (tmp_path / "n.skl").exists()


def test_bad_magic(tmp_path):
    (tmp_path / "b.skl").write_bytes(b"XXXX" + struct.pack("<III", 1, 2, 3) + bytes(24))
    with pytest.raises(DataError, match="not a skeleton file"):
        load_sequence(tmp_path / "b.skl")


def test_truncated_payload(tmp_path):
    (tmp_path / "t.skl").write_bytes(b"SKL1" + struct.pack("<III", 4, 2, 3) + bytes(24))
    with pytest.raises(DataError, match="corrupt file"):
        load_sequence(tmp_path / "t.skl")


def test_two_dimensional_joints_rejected(tmp_path):
    (tmp_path / "c.skl").write_bytes(b"SKL1" + struct.pack("<III", 1, 2, 2) + bytes(16))
    with pytest.raises(DataError, match="unsupported spatial dimension"):
        load_sequence(tmp_path / "c.skl")


# -- manifests -------------------------------------------------------------------

def _write_clip(root, name, t=8):
    save_sequence(np.zeros((t, 16, 3)), root / name)
    return name


def test_manifest_with_two_clips(tmp_path):
    entries = [{"id": i, "path": _write_clip(tmp_path, f"{i}.skl"), "kind": "trimmed", "label": i}
               for i in range(2)]
    write_manifest(tmp_path / "m.json", 5, entries)
    ds = load_dataset(tmp_path / "m.json")
    assert len(ds.clips) == 2
    assert [c.action_label for c in ds.clips] == [0, 1]


def test_manifest_label_out_of_range(tmp_path):
    write_manifest(tmp_path / "m.json", 5,
                   [{"id": 0, "path": _write_clip(tmp_path, "a.skl"), "kind": "trimmed", "label": 5}])
    with pytest.raises(DataError, match="label out of range"):
        load_dataset(tmp_path / "m.json")


def test_manifest_overlap_in_multiclass_video(tmp_path):
    entry = {"id": 0, "path": _write_clip(tmp_path, "v.skl", 20), "kind": "untrimmed",
             "task_kind": "multiclass",
             "segments": [{"class": 0, "start": 0, "end": 10}, {"class": 1, "start": 5, "end": 15}]}
    write_manifest(tmp_path / "m.json", 5, [entry])
    with pytest.raises(DataError, match="overlap in multiclass annotation"):
        load_dataset(tmp_path / "m.json")


def test_manifest_missing_file(tmp_path):
    write_manifest(tmp_path / "m.json", 5, [{"id": 0, "path": "nope.skl", "kind": "trimmed"}])
    with pytest.raises(OSError):
        load_dataset(tmp_path / "m.json")


def test_manifest_split_field(tmp_path):
    entry = {"id": 3, "path": _write_clip(tmp_path, "v.skl", 20), "kind": "untrimmed",
             "split": "train", "segments": [{"class": 1, "start": 0, "end": 20}]}
    write_manifest(tmp_path / "m.json", 2, [entry])
    ds = load_dataset(tmp_path / "m.json")
    assert [v.video_id for v in ds.split("train")] == [3]
    assert ds.split("test") == []
    assert json.loads((tmp_path / "m.json").read_text())["num_classes"] == 2


def test_segment_invariants():
    with pytest.raises(ValueError):
        SegmentAnnotation(0, 5, 5)
    with pytest.raises(DataError):
        UntrimmedVideo(np.zeros((10, 16, 3)), [SegmentAnnotation(0, 5, 11)])


# -- skeleton graph --------------------------------------------------------------

def test_default_graph_is_a_16_joint_tree():
    g = default_skeleton_graph()
    assert g.num_joints == 16
    assert len(g.edges) == 15


def _connected(v, edges):
    seen, stack = {0}, [0]
    while stack:
        a = stack.pop()
        for i, j in edges:
            for x, y in ((i, j), (j, i)):
                if x == a and y not in seen:
                    seen.add(y)
                    stack.append(y)
    return len(seen) == v


def test_every_edge_is_a_bridge():
    assert _connected(16, DEFAULT_EDGES)
    for k in range(len(DEFAULT_EDGES)):
        assert not _connected(16, DEFAULT_EDGES[:k] + DEFAULT_EDGES[k + 1:])


def test_normalized_adjacency_matches_recomputation():
    a = default_skeleton_graph().normalized_adjacency
    np.testing.assert_allclose(a, a.T, atol=1e-12, rtol=0)
    np.testing.assert_allclose(a, _adjacency_oracle(16, DEFAULT_EDGES), atol=1e-12, rtol=0)


# -- synthesis ---------------------------------------------------------------------

def test_synth_trimmed_is_deterministic():
    a = synth_trimmed(3, 32, 0.05, camera_seed=4, motion_seed=9)
    b = synth_trimmed(3, 32, 0.05, camera_seed=4, motion_seed=9)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert a.frames.shape == (32, 16, 3)


def test_camera_change_is_one_similarity_transform():
    a = synth_trimmed(2, 24, 0.0, camera_seed=1, motion_seed=5).frames.astype(np.float64)
    b = synth_trimmed(2, 24, 0.0, camera_seed=2, motion_seed=5).frames.astype(np.float64)
    # fit on the first frame, then check that one transform maps every frame
    tr = estimate_similarity_transform(a[0], b[0])
    for t in range(len(a)):
        assert transform_residual(tr, a[t], b[t]) < 1e-5


def test_classes_differ():
    a = synth_trimmed(0, 16, 0.0, camera_seed=0, motion_seed=0).frames
    b = synth_trimmed(1, 16, 0.0, camera_seed=0, motion_seed=0).frames
    assert not np.allclose(a, b)


def test_clip_too_short():
    with pytest.raises(DataError, match="clip too short"):
        synth_trimmed(0, 7)


def test_untrimmed_boundaries():
    v = synth_untrimmed([2, 0, 4], 48, 0.05, seed=11)
    assert v.frames.shape[0] == 144
    assert [(s.start, s.end) for s in v.segments] == [(0, 48), (48, 96), (96, 144)]
    assert [s.action_class for s in v.segments] == [2, 0, 4]
    w = synth_untrimmed([2, 0, 4], 48, 0.05, seed=11)
    assert v.frames.tobytes() == w.frames.tobytes()


def test_untrimmed_empty_class_list():
    with pytest.raises(DataError):
        synth_untrimmed([], 48)


@pytest.mark.parametrize("seed", range(6))
def test_multiclass_never_overlaps_multilabel_may(seed):
    v = synth_untrimmed([0, 1, 2, 3], 16, 0.0, seed=seed)
    spans = sorted((s.start, s.end) for s in v.segments)
    assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
    m = synth_untrimmed([0, 1, 2, 3], 16, 0.0, seed=seed, task_kind="multilabel")
    for s in m.segments:
        twins = [o for o in m.segments if (o.start, o.end) == (s.start, s.end)]
        assert len(twins) in (1, 2)
        assert len({o.action_class for o in twins}) == len(twins)


def test_trim_fixture():
    frames = np.random.default_rng(0).normal(size=(30, 16, 3)).astype(np.float32)
    video = UntrimmedVideo(frames, [SegmentAnnotation(2, 0, 10), SegmentAnnotation(0, 10, 30)])
    clips = trim_untrimmed(video)
    assert [len(c.frames) for c in clips] == [10, 20]
    assert [c.action_label for c in clips] == [2, 0]
    np.testing.assert_array_equal(np.concatenate([c.frames for c in clips]), frames)


def test_trim_single_segment_is_identity():
    frames = np.ones((12, 16, 3), dtype=np.float32)
    (clip,) = trim_untrimmed(UntrimmedVideo(frames, [SegmentAnnotation(1, 0, 12)]))
    np.testing.assert_array_equal(clip.frames, frames)


def test_trim_frame_count_matches_annotation():
    v = synth_untrimmed([1, 3], 20, 0.0, seed=2)
    assert sum(len(c.frames) for c in trim_untrimmed(v)) == sum(s.length for s in v.segments)


def test_trim_rejects_multilabel():
    v = synth_untrimmed([1, 3], 20, 0.0, seed=2, task_kind="multilabel")
    with pytest.raises(DataError, match="cannot trim overlapping annotations"):
        trim_untrimmed(v)
