import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geohand.config import LossConfig
from geohand.gradcheck import REGISTRY, run_checks
from geohand.hand_model import build_template
from geohand.losses import (TERMS, loss_2d, loss_3d_joint, loss_bone, loss_params, loss_shape_reg,
                            loss_vert, smooth_l1, total_loss)
from geohand.tensor import Tensor, backward

J_REST = build_template().rest_joints()


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def test_loss_2d_fixture():
    gt = np.zeros((1, 21, 2))
    pred = gt.copy()
    pred[0, 5] = (0.3, -0.4)
    mask = np.zeros((1, 21))
    mask[0, 5] = 1.0
    assert abs(float(loss_2d(t(pred), gt, mask).data) - 0.7) < 1e-9
    assert float(loss_2d(t(gt), gt, np.ones((1, 21))).data) == 0.0
    assert float(loss_2d(t(pred), gt, np.zeros((1, 21))).data) == 0.0


def test_loss_3d_fixture():
    gt = J_REST[None].copy()
    pred = gt.copy()
    pred[0, 4, 0] += 0.01
    assert abs(float(loss_3d_joint(t(pred), gt, [1.0]).data) - 2.5 * 0.01 / 21) < 1e-9
    assert float(loss_3d_joint(t(gt + 0.3), gt, [1.0]).data) < 1e-15
    assert float(loss_3d_joint(t(pred), gt, [0.0]).data) == 0.0


def test_loss_bone_fixture():
    gt = J_REST[None].copy()
    pred = gt.copy()
    d = gt[0, 4] - gt[0, 3]
    pred[0, 4] += 0.002 * d / np.linalg.norm(d)
    assert abs(float(loss_bone(t(pred), gt, [1.0]).data) - 1e-4) < 1e-9
    assert float(loss_bone(t(gt), gt, [1.0]).data) == 0.0


def test_loss_bone_rotation_invariant():
    c, s = np.cos(0.7), np.sin(0.7)
    r = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    gt = J_REST[None]
    assert float(loss_bone(t(gt @ r.T), gt, [1.0]).data) < 1e-15


def test_loss_vert_fixture():
    v = np.random.default_rng(0).standard_normal((1, 120, 3)) * 0.05
    pred = v.copy()
    pred[0, 17, 0] += 0.003
    root = np.zeros((1, 3))
    got = float(loss_vert(t(pred), v, t(root), root).data)
    assert abs(got - 0.003 / 360) < 1e-9
    shift = np.array([0.1, -0.2, 0.3])
    assert float(loss_vert(t(v + shift), v, t(root + shift), root).data) < 1e-15


def test_smooth_l1_fixtures():
    assert float(smooth_l1(t(0.0)).data) == 0.0
    lin = 0.05 - 0.025
    quad = 0.5 * 0.05 ** 2 / 0.05
    assert abs(float(smooth_l1(t(0.05)).data) - 0.025) < 1e-9
    assert abs(lin - quad) < 1e-15
    assert abs(float(smooth_l1(t(0.05 - 1e-12)).data) - 0.025) < 1e-9
    assert abs(float(smooth_l1(t(1.0)).data) - 0.975) < 1e-9
    with pytest.raises(ValueError):
        smooth_l1(t(1.0), delta=0.0)


def test_param_truncation():
    g_gt = np.where(np.random.default_rng(1).random((1, 9)) > 0.5, 1.0, -1.0)
    g_pred = Tensor(-g_gt, requires_grad=True)
    lg, lp, lb = loss_params(g_pred, g_gt, t(np.zeros((1, 135))), np.zeros((1, 135)),
                             t(np.zeros((1, 10))), np.zeros((1, 10)))
    assert float(lg.data) == 1.0 and float(lp.data) == 0.0 and float(lb.data) == 0.0
    assert abs(float(smooth_l1(t(2.0)).data) - 1.975) < 1e-12
    backward(lg)
    assert np.array_equal(g_pred.grad, np.zeros((1, 9)))


def test_param_dimension_mismatch():
    with pytest.raises(ValueError, match="9"):
        loss_params(t(np.zeros((1, 8))), np.zeros((1, 8)), t(np.zeros((1, 135))), np.zeros((1, 135)),
                    t(np.zeros((1, 10))), np.zeros((1, 10)))


@given(st.floats(-50, 50), st.integers(0, 100))
@settings(max_examples=40, deadline=None)
def test_truncation_cap(scale, seed):
    rng = np.random.default_rng(seed)
    terms = loss_params(t(rng.standard_normal((3, 9)) * scale), rng.standard_normal((3, 9)),
                        t(rng.standard_normal((3, 135)) * scale), rng.standard_normal((3, 135)),
                        t(rng.standard_normal((3, 10)) * scale), rng.standard_normal((3, 10)))
    assert all(0.0 <= float(x.data) <= 1.0 for x in terms)


def test_shape_reg_fixtures():
    assert float(loss_shape_reg(t(np.zeros((1, 10)))).data) == 0.0
    b = np.zeros((1, 10))
    b[0, :2] = (3, 4)
    assert float(loss_shape_reg(t(b)).data) == 5.0
    b = np.zeros((2, 10))
    b[0, 0], b[1, 3] = 1.0, 2.0
    assert float(loss_shape_reg(t(b)).data) == 1.5


def test_total_loss_fixtures():
    w = LossConfig()
    only_shape = {k: 0.0 for k in TERMS} | {"lshape": 1.0}
    assert abs(float(total_loss(only_shape, w).data) - 0.05) < 1e-9
    ones = {k: 1.0 for k in TERMS}
    assert abs(float(total_loss(ones, w).data) - 7.36) < 1e-9
    zero_w = LossConfig(*([0.0] * 8))
    assert float(total_loss(ones, zero_w).data) == 0.0


def test_losses_nonnegative_and_zero_on_perfect():
    rng = np.random.default_rng(2)
    j = rng.standard_normal((2, 21, 3))
    u = rng.standard_normal((2, 21, 2))
    assert float(loss_2d(t(u), u, np.ones((2, 21))).data) == 0.0
    assert float(loss_3d_joint(t(j), j, np.ones(2)).data) == 0.0
    assert float(loss_bone(t(j), j, np.ones(2)).data) == 0.0
    for fn, args in ((loss_2d, (t(u + 1), u, np.ones((2, 21)))), (loss_3d_joint, (t(j * 2), j, np.ones(2))),
                     (loss_bone, (t(j * 2), j, np.ones(2)))):
        assert float(fn(*args).data) > 0.0


def test_every_term_gradient_checked():
    names = [f"losses/{k}" for k in TERMS]
    assert set(names) <= set(REGISTRY)
    res = run_checks(names)
    assert all(r.error < 1e-4 for r in res), [r.line() for r in res]
