import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from geohand.metrics import (DegenerateAlignmentError, aggregate, f_score, mpjpe, pa_error,
                             procrustes_align, sample_metrics, to_csv)
from oracles import brute_force_residual


def random_similarity(rng):
    return rng.uniform(0.5, 2.0), Rotation.random(random_state=rng).as_matrix(), rng.standard_normal(3)


def closed_form_residual(pred, gt):
    _, aligned = procrustes_align(pred, gt)
    return ((aligned - gt) ** 2).sum()


def test_mpjpe_examples():
    rng = np.random.default_rng(0)
    gt = rng.standard_normal((21, 3))
    assert mpjpe(gt, gt) == 0.0
    assert mpjpe(gt + [1.0, 2.0, 3.0], gt) < 1e-9
    pred = np.array([[0.0, 0, 0], [0.003, 0, 0]])
    assert abs(mpjpe(pred, np.zeros((2, 3))) - 1.5) < 1e-9
    with pytest.raises(ValueError):
        mpjpe(np.zeros((3, 3)), np.zeros((4, 3)))


def test_mpjpe_symmetry():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((21, 3)), rng.standard_normal((21, 3))
    assert abs(mpjpe(a, b) - mpjpe(b, a)) < 1e-12


def test_exact_similarity_recovery():
    rng = np.random.default_rng(2)
    for _ in range(20):
        s, r, tr = random_similarity(rng)
        pred = rng.standard_normal((21, 3))
        gt = s * pred @ r.T + tr
        tf, aligned = procrustes_align(pred, gt)
        assert np.abs(aligned - gt).max() < 1e-9
        assert abs(tf.scale - s) < 1e-9
        assert np.abs(tf.rotation - r).max() < 1e-9
        assert np.abs(tf.translation - tr).max() < 1e-9


def test_identity_alignment():
    x = np.random.default_rng(3).standard_normal((10, 3))
    tf, _ = procrustes_align(x, x)
    assert abs(tf.scale - 1) < 1e-12 and np.allclose(tf.rotation, np.eye(3)) and np.allclose(tf.translation, 0)


def test_matches_brute_force_minimiser():
    rng = np.random.default_rng(4)
    for _ in range(5):
        pred, gt = rng.standard_normal((21, 3)), rng.standard_normal((21, 3))
        cf, bf = closed_form_residual(pred, gt), brute_force_residual(pred, gt)
        assert abs(cf - bf) <= 1e-6 * bf
        assert cf <= bf + 1e-12


def test_reflection_is_not_used():
    rng = np.random.default_rng(5)
    pred = rng.standard_normal((21, 3))
    gt = pred * np.array([-1.0, 1.0, 1.0])
    tf, _ = procrustes_align(pred, gt)
    assert abs(np.linalg.det(tf.rotation) - 1.0) < 1e-12
    assert tf.scale > 0


def test_two_point_swap():
    gt = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
    pred = gt[[1, 0, 2]]
    tf, aligned = procrustes_align(pred, gt)
    # a half-turn about y exchanges the swapped pair and fixes the third point
    assert np.allclose(tf.rotation, np.diag([-1.0, 1.0, -1.0]), atol=1e-12)
    assert pa_error(pred, gt) < 1e-9


def test_pa_error_bounded_by_translation_only():
    rng = np.random.default_rng(6)
    gt = rng.standard_normal((21, 3))
    pred = gt.copy()
    pred[7] += 0.01
    # the alignment minimises squared error, so compare root-mean-square residuals
    trans_only = ((pred - pred.mean(0)) - (gt - gt.mean(0))) ** 2
    _, aligned = procrustes_align(pred, gt)
    assert ((aligned - gt) ** 2).sum() <= trans_only.sum() + 1e-15


def test_degenerate_sets():
    with pytest.raises(DegenerateAlignmentError):
        procrustes_align(np.zeros((2, 3)), np.ones((2, 3)))
    with pytest.raises(DegenerateAlignmentError):
        procrustes_align(np.zeros((5, 3)), np.random.default_rng(0).standard_normal((5, 3)))
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateAlignmentError):
        procrustes_align(line, line)


def test_f_score_examples():
    rng = np.random.default_rng(7)
    v = rng.standard_normal((50, 3)) * 0.05
    assert f_score(v, v, 5) == 1.0 and f_score(v, v, 15) == 1.0
    assert f_score(v, v + 1.0, 15, align=False) == 0.0


def test_f_score_four_point_case():
    gt = np.array([[0.0, 0, 0], [0.1, 0, 0], [0, 0.1, 0], [0, 0, 0.1]])
    pred = np.array([[0.001, 0, 0], [0, 0.001, 0], [0.1, 0.001, 0], [0.1, 0, 0.001]])
    # brute-force nearest neighbours
    d = np.linalg.norm(pred[:, None] - gt[None], axis=-1)
    p = (d.min(axis=1) <= 0.005).mean()
    r = (d.min(axis=0) <= 0.005).mean()
    assert (p, r) == (1.0, 0.5)
    assert f_score(pred, gt, 5, align=False) == 2 / 3


def test_f15_at_least_f5():
    rng = np.random.default_rng(8)
    for _ in range(200):
        a = rng.standard_normal((30, 3)) * 0.02
        b = a + rng.standard_normal((30, 3)) * rng.uniform(0.001, 0.02)
        assert f_score(a, b, 15) >= f_score(a, b, 5)


def test_self_metrics_and_csv():
    rng = np.random.default_rng(9)
    j, v = rng.standard_normal((21, 3)), rng.standard_normal((120, 3))
    m = sample_metrics(j, j, v, v)
    assert m["F@5"] == 1.0 and m["F@15"] == 1.0
    assert all(m[k] < 1e-9 for k in ("MPJPE", "PA-MPJPE", "MPVPE", "PA-MPVPE"))
    csv = to_csv(m).splitlines()
    assert csv[0] == "metric,value" and len(csv) == 7


def test_aggregate_order_independent():
    rng = np.random.default_rng(10)
    rows = [{"MPJPE": float(x)} for x in rng.random(17)]
    assert abs(aggregate(rows)["MPJPE"] - aggregate(rows[::-1])["MPJPE"]) < 1e-15
