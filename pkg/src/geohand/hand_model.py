"""Procedural tube hand with the MANO interface: blend shapes, LBS, joint regression.

Joint order: wrist 0, then per digit (thumb, index, middle, ring, pinky) the
MCP, PIP, DIP and TIP joints, so fingertips are {4, 8, 12, 16, 20}.
Kinematic nodes are ordered by tree level: root 0, MCPs 1-5, PIPs 6-10,
DIPs 11-15, which keeps ``parent[k] < k`` and lets forward kinematics run one
batched matmul per level.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

N_JOINTS = 21
N_NODES = 16
N_BETAS = 10
FINGERTIPS = (4, 8, 12, 16, 20)

PARENTS = np.array([-1, 0, 0, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10])
NODE_JOINT = np.array([0] + [1 + 4 * d for d in range(5)] + [2 + 4 * d for d in range(5)]
                      + [3 + 4 * d for d in range(5)])
LEVELS = (np.arange(0, 1), np.arange(1, 6), np.arange(6, 11), np.arange(11, 16))
BONES = np.array([(0, 1 + 4 * d) for d in range(5)]
                 + [(1 + 4 * d + k, 2 + 4 * d + k) for d in range(5) for k in range(3)])

# base (m), direction, segment lengths (m), tube radius (m)
_DIGITS = (
    ((-0.020, 0.025), (-0.60, 0.80), (0.035, 0.030, 0.025), 0.0100),
    ((-0.027, 0.085), (-0.08, 1.00), (0.040, 0.025, 0.020), 0.0085),
    ((-0.008, 0.090), (0.00, 1.00), (0.045, 0.028, 0.022), 0.0090),
    ((0.011, 0.087), (0.08, 1.00), (0.042, 0.026, 0.021), 0.0085),
    ((0.028, 0.080), (0.18, 1.00), (0.032, 0.020, 0.018), 0.0075),
)
_PALM_HALF_WIDTH, _PALM_LENGTH, _PALM_HALF_THICK = 0.035, 0.085, 0.010

# v_count -> (palm nx, palm ny, rings per digit, vertices per ring)
LAYOUTS = {120: (2, 5, 5, 4), 778: (7, 17, 18, 6)}


class InvalidRotationError(ValueError):
    pass


@dataclass(frozen=True)
class HandTemplate:
    rest_vertices: np.ndarray        # (V, 3)
    skin_weights: np.ndarray         # (V, 16)
    shape_dirs: np.ndarray           # (10, V, 3)
    joint_regressor: np.ndarray      # (21, V)
    faces: np.ndarray                # (F, 3) int
    parents: np.ndarray = PARENTS
    bones: np.ndarray = BONES
    fingertips: tuple = FINGERTIPS

    @property
    def v_count(self) -> int:
        return self.rest_vertices.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"rest_vertices": self.rest_vertices, "skin_weights": self.skin_weights,
                "shape_dirs": self.shape_dirs, "joint_regressor": self.joint_regressor,
                "faces": self.faces.astype(np.float64)}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "HandTemplate":
        return cls(arrays["rest_vertices"], arrays["skin_weights"], arrays["shape_dirs"],
                   arrays["joint_regressor"], arrays["faces"].astype(np.int64))

    def rest_joints(self) -> np.ndarray:
        return self.joint_regressor @ self.rest_vertices


def build_template(v_count: int = 120, seed: int = 7) -> HandTemplate:
    """Deterministically build the tube hand with ``v_count`` vertices (120 or 778)."""
    if v_count not in LAYOUTS:
        raise ValueError(f"v_count must be one of {sorted(LAYOUTS)}, got {v_count}")
    nx, ny, rings, res = LAYOUTS[v_count]
    verts, weights, faces = [], [], []
    regressor = np.zeros((N_JOINTS, v_count))

    def node(level: int, digit: int) -> int:
        return 0 if level < 0 else 1 + 5 * level + digit

    # palm: two grids (front/back) rigidly bound to the root
    xs = np.linspace(-_PALM_HALF_WIDTH, _PALM_HALF_WIDTH, nx)
    ys = np.linspace(0.0, _PALM_LENGTH, ny)
    for layer, z in enumerate((-_PALM_HALF_THICK, _PALM_HALF_THICK)):
        start = len(verts)
        for iy, y in enumerate(ys):
            for x in xs:
                if iy == 0:
                    regressor[0, len(verts)] = 1.0
                verts.append((x, y, z))
                w = np.zeros(N_NODES)
                w[0] = 1.0
                weights.append(w)
        for iy in range(ny - 1):
            for ix in range(nx - 1):
                a = start + iy * nx + ix
                b, c, d = a + 1, a + nx, a + nx + 1
                faces += [(a, b, d), (a, d, c)] if layer else [(a, d, b), (a, c, d)]
    regressor[0] /= regressor[0].sum()

    # digits: rings along each chain; rings at the pivots and tip are rigid
    extra = rings - 4
    per_seg = [extra // 3 + (1 if i < extra % 3 else 0) for i in range(3)]
    stations = [0.0, 1.0, 2.0, 3.0]
    for k, m in enumerate(per_seg):
        stations += [k + (i + 1) / (m + 1) for i in range(m)]
    stations = sorted(stations)
    for d, (base, direction, lengths, radius) in enumerate(_DIGITS):
        u = np.array([direction[0], direction[1], 0.0])
        u /= np.linalg.norm(u)
        e1 = np.cross(u, (0.0, 0.0, 1.0))
        e1 /= np.linalg.norm(e1)
        e2 = np.array([0.0, 0.0, 1.0])
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        ring_starts = []
        for s in stations:
            seg = min(int(s), 2)
            f = s - seg
            centre = np.array([base[0], base[1], 0.0]) + u * (cum[seg] + f * lengths[seg])
            r = radius * (1.0 - 0.12 * s)
            w = np.zeros(N_NODES)
            if s in (0.0, 1.0, 2.0, 3.0):
                w[node(min(int(s), 2), d)] = 1.0
                joint = 1 + 4 * d + int(s)
            else:
                w_prev = max(0.0, 0.5 - f)
                w_next = max(0.0, f - 0.5) if seg < 2 else 0.0
                w[node(seg - 1, d)] += w_prev
                w[node(seg + 1, d) if seg < 2 else node(seg, d)] += w_next
                w[node(seg, d)] += 1.0 - w_prev - w_next
                joint = None
            ring_starts.append(len(verts))
            for i in range(res):
                phi = 2.0 * np.pi * i / res
                if joint is not None:
                    regressor[joint, len(verts)] = 1.0 / res
                verts.append(centre + r * (np.cos(phi) * e1 + np.sin(phi) * e2))
                weights.append(w.copy())
        for a0, b0 in zip(ring_starts[:-1], ring_starts[1:]):
            for i in range(res):
                j = (i + 1) % res
                faces += [(a0 + i, b0 + i, b0 + j), (a0 + i, b0 + j, a0 + j)]
        tip = ring_starts[-1]
        faces += [(tip, tip + i, tip + i + 1) for i in range(1, res - 1)]

    rest = np.asarray(verts, dtype=np.float64)
    assert rest.shape[0] == v_count, rest.shape

    dirs = np.zeros((N_BETAS, v_count, 3))
    dirs[0] = 0.08 * rest
    offset = nx * ny * 2
    per_digit = rings * res
    for d, (base, direction, _, _) in enumerate(_DIGITS):
        u = np.array([direction[0], direction[1], 0.0])
        u /= np.linalg.norm(u)
        sl = slice(offset + d * per_digit, offset + (d + 1) * per_digit)
        along = (rest[sl] - np.array([base[0], base[1], 0.0])) @ u
        dirs[1, sl] = 0.10 * along[:, None] * u
    rng = np.random.default_rng(seed)
    for k in range(2, N_BETAS):
        a = rng.standard_normal((3, 3)) * 0.02
        dirs[k] = rest @ a.T

    return HandTemplate(rest, np.asarray(weights), dirs, regressor, np.asarray(faces, dtype=np.int64))


# ---------------------------------------------------------------------------
# Parameters and outputs
# ---------------------------------------------------------------------------

@dataclass
class HandParams:
    """Batched hand parameters; rotations are (B, 16, 3, 3), node 0 is the root."""

    rotmats: Tensor
    betas: Tensor
    cam: Tensor
    rot6d: Tensor | None = None

    @property
    def batch(self) -> int:
        return self.rotmats.shape[0]

    @property
    def global_orient(self) -> Tensor:
        return self.rotmats[:, 0].reshape(self.batch, 9)

    @property
    def pose(self) -> Tensor:
        return self.rotmats[:, 1:].reshape(self.batch, 135)

    def vector(self) -> Tensor:
        """(B, 109) concatenation of 6-value rotations, betas and camera."""
        r6 = self.rot6d if self.rot6d is not None else matrix_to_rot6d(self.rotmats)
        return T.concat([r6.reshape(self.batch, 96), self.betas, self.cam], axis=1)

    @classmethod
    def from_vector(cls, vec: Tensor) -> "HandParams":
        b = vec.shape[0]
        r6 = vec[:, :96].reshape(b, N_NODES, 6)
        return cls(rot6d_to_matrix(r6), vec[:, 96:106], vec[:, 106:109], r6)

    def detach(self) -> "HandParams":
        return HandParams(self.rotmats.detach(), self.betas.detach(), self.cam.detach(),
                          None if self.rot6d is None else self.rot6d.detach())


@dataclass
class HandOutput:
    joints: Tensor        # (B, 21, 3)
    vertices: Tensor      # (B, V, 3)
    projected: Tensor | None = None  # (B, 21, 2)


# ---------------------------------------------------------------------------
# Rotation helpers
# ---------------------------------------------------------------------------

_LEVI = np.zeros((9, 3))
for _i, _j, _k, _s in ((0, 1, 2, 1), (1, 2, 0, 1), (2, 0, 1, 1), (0, 2, 1, -1), (2, 1, 0, -1), (1, 0, 2, -1)):
    _LEVI[3 * _j + _k, _i] = _s


def cross(a: Tensor, b: Tensor) -> Tensor:
    outer = T.mul(a.reshape(*a.shape, 1), b.reshape(*b.shape[:-1], 1, 3))
    return outer.reshape(*a.shape[:-1], 9) @ Tensor(_LEVI)


def rot6d_to_matrix(x: Tensor) -> Tensor:
    """Gram-Schmidt on the first two columns; returns (..., 3, 3)."""
    a1, a2 = x[..., 0:3], x[..., 3:6]
    b1 = a1 / T.norm(a1, axis=-1, keepdims=True)
    b2 = a2 - T.tsum(b1 * a2, axis=-1, keepdims=True) * b1
    b2 = b2 / T.norm(b2, axis=-1, keepdims=True)
    b3 = cross(b1, b2)
    lead = x.shape[:-1]
    return T.concat([b1.reshape(*lead, 3, 1), b2.reshape(*lead, 3, 1), b3.reshape(*lead, 3, 1)], axis=-1)


def matrix_to_rot6d(r: Tensor) -> Tensor:
    lead = r.shape[:-2]
    return T.concat([r[..., :, 0], r[..., :, 1]], axis=-1).reshape(*lead, 6)


def identity_rot6d(batch: int) -> np.ndarray:
    return np.tile(np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]), (batch, N_NODES, 1))


def axis_angle_to_matrix(aa: np.ndarray) -> np.ndarray:
    """Rodrigues formula on plain arrays, (..., 3) -> (..., 3, 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    axis = np.where(theta > 0, aa / np.where(theta > 0, theta, 1.0), 0.0)
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    k = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=-1).reshape(*aa.shape[:-1], 3, 3)
    th = theta[..., None]
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + np.sin(th) * k + (1.0 - np.cos(th)) * (k @ k)


def check_rotations(r: np.ndarray, tol: float = 1e-6) -> None:
    resid = np.abs(np.swapaxes(r, -1, -2) @ r - np.eye(3)).max() if r.size else 0.0
    if resid > tol or (r.size and np.linalg.det(r).min() <= 0):
        raise InvalidRotationError(f"rotation orthogonality residual {resid:.3g} exceeds {tol}")


# ---------------------------------------------------------------------------
# Forward kinematics, projection, bones
# ---------------------------------------------------------------------------

def shaped_rest(template: HandTemplate, betas: Tensor) -> Tensor:
    b = betas.shape[0]
    v = template.v_count
    blend = (betas @ Tensor(template.shape_dirs.reshape(N_BETAS, v * 3))).reshape(b, v, 3)
    return blend + Tensor(template.rest_vertices)


def forward_kinematics(template: HandTemplate, rotmats: Tensor, betas: Tensor) -> HandOutput:
    """Skin the shaped template with per-node rotations (B, 16, 3, 3); joints = regressor @ V."""
    if betas.shape[-1] != N_BETAS:
        raise ValueError(f"expected {N_BETAS} shape coefficients, got {betas.shape[-1]}")
    check_rotations(rotmats.data)
    b = rotmats.shape[0]
    v_shaped = shaped_rest(template, betas)
    reg = Tensor(template.joint_regressor)
    j_rest = reg @ v_shaped                              # (B, 21, 3)
    node_pos = j_rest[:, NODE_JOINT]                     # (B, 16, 3)

    mats = [rotmats[:, 0:1]]
    trans = [node_pos[:, 0:1]]
    for lvl in range(1, len(LEVELS)):
        idx = LEVELS[lvl]
        par = PARENTS[idx]
        a_par = mats[-1] if lvl > 1 else mats[0]
        p_par = trans[-1] if lvl > 1 else trans[0]
        offset = (node_pos[:, idx] - node_pos[:, par]).reshape(b, len(idx), 3, 1)
        mats.append(a_par @ rotmats[:, idx])
        trans.append((a_par @ offset).reshape(b, len(idx), 3) + p_par)
    a_all = T.concat(mats, axis=1)                       # (B, 16, 3, 3)
    p_all = T.concat(trans, axis=1)                      # (B, 16, 3)
    t_all = p_all - (a_all @ node_pos.reshape(b, N_NODES, 3, 1)).reshape(b, N_NODES, 3)

    w = Tensor(template.skin_weights)
    blended = (w @ a_all.reshape(b, N_NODES, 9)).reshape(b, template.v_count, 3, 3)
    verts = (blended @ v_shaped.reshape(b, template.v_count, 3, 1)).reshape(b, template.v_count, 3)
    verts = verts + w @ t_all
    joints = reg @ verts
    return HandOutput(joints, verts)


def project(joints: Tensor, cam: Tensor) -> Tensor:
    """Weak perspective: U = s * J_xy + (t_x, t_y); ``cam`` is (B, 3)."""
    b = cam.shape[0]
    s = cam[:, 0:1].reshape(b, 1, 1)
    t = cam[:, 1:3].reshape(b, 1, 2)
    return joints[..., 0:2] * s + t


def bone_lengths(joints: Tensor, edges: np.ndarray = BONES) -> Tensor:
    diff = joints[..., edges[:, 1], :] - joints[..., edges[:, 0], :]
    return T.norm(diff, axis=-1)


def decode(template: HandTemplate, params: HandParams) -> HandOutput:
    out = forward_kinematics(template, params.rotmats, params.betas)
    out.projected = project(out.joints, params.cam)
    return out
