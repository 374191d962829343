import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stsmesh.errors import DegenerateAlignmentError, EmptyEvaluationError, LabelingError
from stsmesh.metrics import bucketed_report, mpjpe, pa_mpjpe, procrustes_align
from stsmesh.rotation import rodrigues


def _random_rotation(rng):
    return rodrigues(rng.normal(size=3))


def test_mpjpe_examples(rng):
    gt = rng.normal(size=(10, 3))
    assert mpjpe(gt, gt) == 0.0
    assert mpjpe(np.tile([3.0, 4.0, 0.0], (5, 1)), np.zeros((5, 3))) == 5.0
    pred = rng.normal(size=(10, 3))
    loop = sum(math.sqrt(sum((pred[i, c] - gt[i, c]) ** 2 for c in range(3))) for i in range(10)) / 10
    assert abs(mpjpe(pred, gt) - loop) < 1e-12


def test_mpjpe_visibility_and_errors(rng):
    gt = np.zeros((3, 3))
    pred = np.array([[1.0, 0, 0], [100.0, 0, 0], [3.0, 0, 0]])
    assert mpjpe(pred, gt, [True, False, True]) == 2.0
    with pytest.raises(EmptyEvaluationError):
        mpjpe(pred, gt, [False] * 3)


def test_mpjpe_permutation_invariant(rng):
    pred, gt = rng.normal(size=(2, 30, 3))
    perm = rng.permutation(30)
    assert abs(mpjpe(pred, gt) - mpjpe(pred[perm], gt[perm])) < 1e-12


def test_procrustes_exact_recovery(rng):
    gt = rng.normal(size=(20, 3))
    R = _random_rotation(rng)
    pred = 2.5 * gt @ R.T + [1.0, -2.0, 0.5]
    al = procrustes_align(pred, gt)
    assert np.abs(al.aligned - gt).max() < 1e-8
    assert abs(np.linalg.det(al.rotation) - 1.0) < 1e-12
    assert pa_mpjpe(pred, gt) < 1e-8


def test_procrustes_identity(rng):
    gt = rng.normal(size=(8, 3))
    al = procrustes_align(gt, gt)
    assert np.allclose(al.rotation, np.eye(3), atol=1e-12)
    assert al.scale == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(al.translation, 0.0, atol=1e-12)


def test_procrustes_reflection_gives_proper_rotation(rng):
    gt = rng.normal(size=(12, 3))
    pred = gt * [1, 1, -1]
    assert np.linalg.det(procrustes_align(pred, gt).rotation) == pytest.approx(1.0)


def test_procrustes_beats_random_similarities(rng):
    gt = rng.normal(size=(15, 3))
    pred = gt + rng.normal(scale=0.05, size=gt.shape)
    best = np.sum((procrustes_align(pred, gt).aligned - gt) ** 2)
    for _ in range(1000):
        R = _random_rotation(rng) if rng.uniform() < 0.5 else rodrigues(rng.normal(scale=0.05, size=3))
        s = rng.uniform(0.8, 1.2)
        t = rng.normal(scale=0.1, size=3)
        assert best <= np.sum((s * pred @ R.T + t - gt) ** 2) + 1e-12


def test_rigid_variant_keeps_scale(rng):
    gt = rng.normal(size=(10, 3))
    al = procrustes_align(3.0 * gt, gt, with_scale=False)
    assert al.scale == 1.0
    assert pa_mpjpe(3.0 * gt, gt, with_scale=False) > 0.1


def test_degenerate_alignment(rng):
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateAlignmentError):
        procrustes_align(line, rng.normal(size=(5, 3)))
    with pytest.raises(DegenerateAlignmentError):
        procrustes_align(np.zeros((2, 3)), np.zeros((2, 3)))


def test_visibility_masked_alignment(rng):
    gt = rng.normal(size=(10, 3))
    pred = gt.copy()
    pred[0] += 50.0
    vis = np.ones(10, dtype=bool)
    vis[0] = False
    al = procrustes_align(pred, gt, vis)
    assert np.abs(al.aligned[1:] - gt[1:]).max() < 1e-9


def test_pa_below_mpjpe_on_random_pairs(rng):
    for _ in range(10_000):
        pred, gt = rng.normal(size=(2, 14, 3))
        assert pa_mpjpe(pred, gt) <= mpjpe(pred, gt) + 1e-9


@settings(max_examples=100, deadline=None)
@given(arrays(float, (10, 3), elements=st.floats(-5, 5)), arrays(float, 3, elements=st.floats(-3, 3)),
       st.floats(0.1, 10), arrays(float, 3, elements=st.floats(-10, 10)))
def test_pa_zero_for_similarity(gt, w, s, t):
    sv = np.linalg.svd(gt - gt.mean(0), compute_uv=False)
    if sv[1] < 1e-3 * max(sv[0], 1e-300):
        return
    pred = s * gt @ rodrigues(w).T + t
    assert pa_mpjpe(pred, gt) < 1e-8 * max(1.0, np.abs(gt).max())


def test_bucketed_report():
    samples = [{"mpjpe": 1.0, "pa_mpjpe": 0.5, "distance_bucket": "2x"},
               {"mpjpe": 3.0, "pa_mpjpe": 1.5, "distance_bucket": "2x"},
               {"mpjpe": 5.0, "pa_mpjpe": 2.0, "distance_bucket": "30x"},
               {"mpjpe": 7.0, "pa_mpjpe": 4.0, "distance_bucket": "30x"},
               {"mpjpe": 2.0, "pa_mpjpe": 1.0, "distance_bucket": "5x"},
               {"mpjpe": 2.0, "pa_mpjpe": 1.0, "distance_bucket": "5x"}]
    rep = bucketed_report(samples, "distance")
    assert list(rep.buckets) == ["2x", "5x", "30x"]
    assert rep.buckets["2x"].mpjpe == 2.0 and rep.buckets["30x"].pa_mpjpe == 3.0
    assert rep.mpjpe == pytest.approx((2.0 + 6.0 + 2.0) / 3)
    assert rep.n_samples == 6
    lines = rep.to_csv().strip().splitlines()
    assert lines[0] == "bucket,n,mpjpe,pa_mpjpe" and lines[-1].startswith("all,6,")
    one = bucketed_report(samples[:2], "distance")
    assert one.mpjpe == one.buckets["2x"].mpjpe
    with pytest.raises(LabelingError):
        bucketed_report([{"mpjpe": 1.0, "pa_mpjpe": 1.0}], "viewpoint")
    with pytest.raises(EmptyEvaluationError):
        bucketed_report([])
