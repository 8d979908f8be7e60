import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import talkmotion as tm
from talkmotion.metrics import (EvalReport, dyn, evaluate_pair, fdd,
                                lip_distance_curve, lip_vertex_error,
                                motion_dynamics_stats)


def test_lip_vertex_error_hand_example():
    pred = np.zeros((2, 3, 3))
    gt = np.zeros((2, 3, 3))
    gt[0, 1] = [3.0, 4.0, 0.0]   # distance 5 at frame 0, vertex 1
    gt[1, 2] = [0.0, 0.0, 2.0]   # distance 2 at frame 1, vertex 2
    assert lip_vertex_error(pred, gt, [1, 2]) == pytest.approx((5 + 2) / 2)
    # Restricting the mask changes the per-frame max.
    assert lip_vertex_error(pred, gt, [1]) == pytest.approx((5 + 0) / 2)


def test_lip_vertex_error_identity_and_errors():
    x = np.random.default_rng(0).standard_normal((4, 5, 3))
    assert lip_vertex_error(x, x, [0, 1]) == 0.0
    with pytest.raises(ValueError):
        lip_vertex_error(x, x[:3], [0])
    with pytest.raises(ValueError):
        lip_vertex_error(x, x, [])


def test_dyn_hand_example():
    # Norms are [5, 5, 13]; population std of that list.
    track = np.array([[3.0, 0.0, 5.0],
                      [4.0, -5.0, 12.0],
                      [0.0, 0.0, 0.0]])
    norms = np.array([5.0, 5.0, 13.0])
    assert dyn(track) == pytest.approx(norms.std())


def test_dyn_constant_track_is_zero():
    track = np.tile([[1.0], [2.0], [2.0]], (1, 7))
    assert dyn(track) == pytest.approx(0.0)


def test_dyn_shape_validation():
    with pytest.raises(ValueError):
        dyn(np.zeros((4, 10)))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**16), t=st.integers(2, 8), v=st.integers(2, 6))
def test_fdd_antisymmetry_property(seed, t, v):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((t, v, 3))
    b = rng.standard_normal((t, v, 3))
    mask = np.arange(v)
    assert fdd(a, b, mask) == -fdd(b, a, mask)
    assert fdd(a, a, mask) == 0.0


def test_fdd_brute_force(rng):
    gt = rng.standard_normal((6, 5, 3))
    pred = rng.standard_normal((6, 5, 3))
    mask = [0, 2, 4]
    expected = np.mean([dyn(gt[:, v].T) - dyn(pred[:, v].T) for v in mask])
    assert fdd(gt, pred, mask) == pytest.approx(expected, abs=1e-12)


def test_motion_dynamics_stats_brute_force(rng):
    frames = rng.standard_normal((5, 4, 3))
    mean, std = motion_dynamics_stats(frames)
    for v in range(4):
        dists = [np.linalg.norm(frames[t + 1, v] - frames[t, v])
                 for t in range(4)]
        assert mean[v] == pytest.approx(np.mean(dists), abs=1e-12)
        assert std[v] == pytest.approx(np.std(dists), abs=1e-12)


def test_motion_dynamics_stats_needs_two_frames():
    with pytest.raises(ValueError):
        motion_dynamics_stats(np.zeros((1, 3, 3)))


def test_lip_distance_curve_geometry():
    rig = tm.build_face_rig()
    motions = tm.MotionSequence(np.zeros((3, rig.vertex_count, 3), np.float32), 25.0)
    curve = lip_distance_curve(motions, rig)
    up = rig.template[rig.region_masks["upper_lip"]].mean(axis=0)
    lo = rig.template[rig.region_masks["lower_lip"]].mean(axis=0)
    rest = np.linalg.norm(up - lo)
    np.testing.assert_allclose(curve, rest, rtol=1e-5)

    # Pushing the lower lip down by 1 mm widens the gap by about 1 mm.
    frames = np.zeros((1, rig.vertex_count, 3), np.float32)
    frames[0, rig.region_masks["lower_lip"], 1] = -1.0
    wider = lip_distance_curve(tm.MotionSequence(frames, 25.0), rig)
    assert wider[0] > curve[0]


def test_lip_distance_curve_missing_region():
    rig = tm.build_face_rig()
    bad = tm.FaceRig.__new__(tm.FaceRig)
    bad.template = rig.template
    bad.region_masks = {k: v for k, v in rig.region_masks.items()
                        if k != "upper_lip"}
    with pytest.raises(ValueError, match="upper_lip"):
        lip_distance_curve(np.zeros((2, rig.vertex_count, 3)), bad)


def test_evaluate_pair_identity(tiny_corpus):
    it = tiny_corpus.items[0]
    report = evaluate_pair(it.motion, it.motion, tiny_corpus.rig)
    assert report.lip_vertex_error == 0.0
    assert report.fdd == 0.0
    np.testing.assert_array_equal(report.lip_distance, report.lip_distance_gt)


def test_evaluate_pair_matches_direct_calls(tiny_corpus):
    a, b = tiny_corpus.items[0].motion, tiny_corpus.items[1].motion
    n = min(a.num_frames, b.num_frames)
    a = tm.MotionSequence(a.frames[:n], a.fps)
    b = tm.MotionSequence(b.frames[:n], b.fps)
    rig = tiny_corpus.rig
    report = evaluate_pair(a, b, rig)
    assert report.lip_vertex_error == lip_vertex_error(
        a, b, rig.region_masks["lip_region"])
    assert report.fdd == fdd(b, a, rig.region_masks["upper_face"])


def test_report_roundtrip(tmp_path, tiny_corpus):
    it = tiny_corpus.items[0]
    report = evaluate_pair(it.motion, it.motion, tiny_corpus.rig)
    report.metadata["label"] = "unit"
    path = tmp_path / "report.json"
    report.save(path)
    back = EvalReport.load(path)
    assert back.lip_vertex_error == report.lip_vertex_error
    assert back.fdd == report.fdd
    np.testing.assert_allclose(back.lip_distance, report.lip_distance)
    assert back.metadata["label"] == "unit"
    # CSV series alongside the JSON
    csv_path = path.with_suffix(".csv")
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "frame_index,value_mm"
    assert len(lines) == 1 + report.lip_distance.size
