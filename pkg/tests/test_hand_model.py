import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geohand import tensor as T
from geohand.hand_model import (BONES, FINGERTIPS, N_JOINTS, PARENTS, HandParams, InvalidRotationError,
                                axis_angle_to_matrix, bone_lengths, build_template, decode,
                                forward_kinematics, identity_rot6d, matrix_to_rot6d, project,
                                rot6d_to_matrix)
from geohand.tensor import Tensor, grad_check

TEMPLATE = build_template(120, 7)

# rest-pose bone lengths of the default template, in edge order (meters)
REST_BONES = np.array([
    0.032015621187, 0.089185200566, 0.090354855985, 0.087692645074, 0.084758480402,
    0.035, 0.030, 0.025, 0.040, 0.025, 0.020, 0.045, 0.028, 0.022, 0.042, 0.026, 0.021,
    0.032, 0.020, 0.018,
])


def eye_rots(b):
    return Tensor(np.tile(np.eye(3), (b, 16, 1, 1)))


def random_rots(rng, b, angle=0.8):
    return axis_angle_to_matrix(rng.uniform(-angle, angle, (b, 16, 3)))


def test_template_invariants():
    w = TEMPLATE.skin_weights
    assert (w >= 0).all() and np.allclose(w.sum(axis=1), 1.0)
    assert PARENTS[0] == -1 and all(PARENTS[k] < k for k in range(1, 16))
    assert len(BONES) == 20
    assert set(BONES.ravel()) == set(range(N_JOINTS))
    assert FINGERTIPS == (4, 8, 12, 16, 20)
    # tree: 21 nodes, 20 edges, connected
    reach, frontier = {0}, [0]
    while frontier:
        n = frontier.pop()
        for a, b in BONES:
            for x, y in ((a, b), (b, a)):
                if x == n and y not in reach:
                    reach.add(y)
                    frontier.append(y)
    assert len(reach) == N_JOINTS


@pytest.mark.parametrize("v_count", [120, 778])
def test_template_sizes(v_count):
    t = build_template(v_count)
    assert t.rest_vertices.shape == (v_count, 3)
    assert t.joint_regressor.shape == (N_JOINTS, v_count)
    assert t.shape_dirs.shape == (10, v_count, 3)


def test_rest_pose_fixed_point():
    out = forward_kinematics(TEMPLATE, eye_rots(1), Tensor(np.zeros((1, 10))))
    assert np.allclose(out.vertices.data[0], TEMPLATE.rest_vertices, atol=1e-15)
    assert np.allclose(out.joints.data[0], TEMPLATE.rest_joints(), atol=1e-15)


def test_root_rotation_is_rigid():
    r = axis_angle_to_matrix(np.array([0.3, -1.1, 0.7]))
    rots = np.tile(np.eye(3), (1, 16, 1, 1))
    rots[0, 0] = r
    out = forward_kinematics(TEMPLATE, Tensor(rots), Tensor(np.zeros((1, 10))))
    assert np.allclose(out.joints.data[0], TEMPLATE.rest_joints() @ r.T, atol=1e-12)


def test_bone_rigidity_under_random_pose():
    rng = np.random.default_rng(0)
    out = forward_kinematics(TEMPLATE, Tensor(random_rots(rng, 8)), Tensor(np.zeros((8, 10))))
    d = bone_lengths(out.joints).data
    assert np.abs(d - REST_BONES).max() < 1e-9


def test_rest_bone_table():
    d = bone_lengths(Tensor(TEMPLATE.rest_joints())).data
    assert np.allclose(d, REST_BONES, atol=1e-11)


def test_regressor_consistency_bitwise():
    rng = np.random.default_rng(1)
    out = forward_kinematics(TEMPLATE, Tensor(random_rots(rng, 3)), Tensor(rng.standard_normal((3, 10))))
    assert np.array_equal(out.joints.data, (Tensor(TEMPLATE.joint_regressor) @ out.vertices).data)


def test_shape_linearity():
    rng = np.random.default_rng(2)
    rots = Tensor(random_rots(rng, 1))
    b1, b2 = rng.standard_normal((1, 10)), rng.standard_normal((1, 10))
    v = lambda b: forward_kinematics(TEMPLATE, rots, Tensor(b)).vertices.data
    v0 = v(np.zeros((1, 10)))
    assert np.abs((v(b1 + b2) - v0) - ((v(b1) - v0) + (v(b2) - v0))).max() < 1e-9


def test_invalid_rotation_rejected():
    rots = np.tile(np.eye(3), (1, 16, 1, 1))
    rots[0, 3] *= 1.01
    with pytest.raises(InvalidRotationError):
        forward_kinematics(TEMPLATE, Tensor(rots), Tensor(np.zeros((1, 10))))


def test_project_examples():
    j = Tensor(np.array([[[0.1, -0.2, 0.5]]]))
    assert np.allclose(project(j, Tensor([[1.0, 0.0, 0.0]])).data, [[[0.1, -0.2]]])
    j = Tensor(np.array([[[0.1, 0.1, 3.0]]]))
    assert np.allclose(project(j, Tensor([[2.0, 0.3, 0.0]])).data, [[[0.5, 0.2]]])


def test_project_cam_gradient():
    rng = np.random.default_rng(3)
    j = Tensor(rng.standard_normal((2, 21, 3)))
    w = Tensor(rng.standard_normal((2, 21, 2)))
    err = grad_check(lambda c: T.tsum(project(j, c) * w), [(2, 3)], eps=1e-5)
    assert err < 1e-6


def test_bone_lengths_coincident_and_isometry():
    assert np.array_equal(bone_lengths(Tensor(np.zeros((21, 3)))).data, np.zeros(20))
    rng = np.random.default_rng(4)
    j = rng.standard_normal((21, 3))
    r = axis_angle_to_matrix(rng.standard_normal(3))
    d0 = bone_lengths(Tensor(j)).data
    d1 = bone_lengths(Tensor(j @ r.T + 5.0)).data
    assert np.abs(d0 - d1).max() < 1e-12


def test_project_fk_end_to_end_gradient():
    rng = np.random.default_rng(5)
    r6 = Tensor(identity_rot6d(1) + 0.3 * rng.standard_normal((1, 16, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((1, 21, 2)))
    cam = Tensor([[8.0, 0.0, -0.7]])

    def fn(x, b):
        out = decode(TEMPLATE, HandParams(rot6d_to_matrix(x), b, cam))
        return T.tsum(out.projected * w)
    assert grad_check(fn, [r6, (1, 10)], eps=1e-6) < 1e-5


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_rot6d_round_trip(seed):
    rng = np.random.default_rng(seed)
    r = axis_angle_to_matrix(rng.uniform(-3, 3, (4, 3)))
    back = rot6d_to_matrix(matrix_to_rot6d(Tensor(r))).data
    assert np.allclose(back, r, atol=1e-12)
    assert np.allclose(np.linalg.det(back), 1.0)


def test_params_vector_round_trip():
    rng = np.random.default_rng(6)
    vec = np.concatenate([identity_rot6d(2).reshape(2, 96), rng.standard_normal((2, 13))], axis=1)
    p = HandParams.from_vector(Tensor(vec))
    assert p.global_orient.shape == (2, 9) and p.pose.shape == (2, 135)
    assert np.array_equal(p.vector().data, vec)
