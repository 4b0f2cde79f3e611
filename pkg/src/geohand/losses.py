"""The eight-term training objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import LossConfig
from .hand_model import BONES, FINGERTIPS, N_JOINTS, bone_lengths
from .tensor import Tensor

TERMS = ("l2d", "l3d", "lbone", "lvert", "lglobal", "lpose", "lbetas", "lshape")
_WEIGHT_KEYS = dict(zip(TERMS, ("lambda_2d", "lambda_3d_joint", "lambda_bone", "lambda_vert",
                                "lambda_global", "lambda_pose", "lambda_betas", "lambda_shape")))
TIP_WEIGHT = 2.5
TRUNCATION = 1.0
SMOOTH_L1_DELTA = 0.05


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tip_weights(n_joints: int = N_JOINTS, tips=FINGERTIPS) -> np.ndarray:
    w = np.ones(n_joints)
    w[list(tips)] = TIP_WEIGHT
    return w


def loss_2d(u_pred: Tensor, u_gt, m_uv) -> Tensor:
    """Per-sample masked mean of per-joint L1 norms, averaged over the batch."""
    m = np.asarray(m_uv, dtype=np.float64)
    per_joint = T.tsum(T.tabs(u_pred - _t(u_gt)), axis=-1)          # (B, 21)
    denom = np.maximum(m.sum(axis=1), 1.0)
    per_sample = T.tsum(per_joint * Tensor(m), axis=1) / Tensor(denom)
    return T.mean(per_sample)


def loss_3d_joint(j_pred: Tensor, j_gt, m_xyz, tips=FINGERTIPS) -> Tensor:
    j_gt = _t(j_gt)
    m = np.asarray(m_xyz, dtype=np.float64).reshape(-1)
    n = j_pred.shape[1]
    rel_pred = j_pred - j_pred[:, 0:1]
    rel_gt = j_gt - j_gt[:, 0:1]
    per_joint = T.tsum(T.tabs(rel_pred - rel_gt), axis=-1)          # (B, N)
    w = tip_weights(n, tips)[None, :] * m[:, None]
    per_sample = T.tsum(per_joint * Tensor(w), axis=1) / Tensor(np.maximum(n * m, 1.0))
    return T.mean(per_sample)


def loss_bone(j_pred: Tensor, j_gt, m_xyz, edges: np.ndarray = BONES) -> Tensor:
    m = np.asarray(m_xyz, dtype=np.float64).reshape(-1)
    e = len(edges)
    diff = T.tabs(bone_lengths(j_pred, edges) - bone_lengths(_t(j_gt), edges))   # (B, E)
    per_sample = T.tsum(diff * Tensor(m[:, None]), axis=1) / Tensor(np.maximum(e * m, 1.0))
    return T.mean(per_sample)


def loss_vert(v_pred: Tensor, v_gt, root_pred: Tensor, root_gt) -> Tensor:
    """Mean absolute coordinate error of root-aligned vertices, 1/(3BV) normalisation."""
    b = v_pred.shape[0]
    root_pred = root_pred.reshape(b, 1, 3)
    root_gt = _t(root_gt).reshape(b, 1, 3)
    return T.mean(T.tabs((v_pred - root_pred) - (_t(v_gt) - root_gt)))


def smooth_l1(residual: Tensor, delta: float = SMOOTH_L1_DELTA) -> Tensor:
    """0.5 r^2 / delta inside |r| < delta, |r| - 0.5 delta outside."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    residual = _t(residual)
    a = T.tabs(residual)
    inside = Tensor((a.data < delta).astype(np.float64))
    quad = T.square(residual) * (0.5 / delta)
    lin = a - 0.5 * delta
    return quad * inside + lin * (1.0 - inside)


def _truncated(pred: Tensor, gt, dims: int) -> Tensor:
    if pred.shape[-1] != dims or np.shape(gt)[-1] != dims:
        raise T.ShapeError(f"parameter loss expects {dims} dims, got {pred.shape[-1]} / {np.shape(gt)[-1]}")
    per_sample = T.mean(smooth_l1(pred - _t(gt)), axis=-1)
    return T.mean(T.clamp_max(per_sample, TRUNCATION))


def loss_params(g_pred, g_gt, p_pred, p_gt, b_pred, b_gt) -> tuple[Tensor, Tensor, Tensor]:
    return _truncated(g_pred, g_gt, 9), _truncated(p_pred, p_gt, 135), _truncated(b_pred, b_gt, 10)


def loss_shape_reg(betas: Tensor) -> Tensor:
    return T.mean(T.norm(betas, axis=-1))


@dataclass
class Targets:
    """Ground truth for one batch; ``vertices`` come from decoding the GT parameters."""

    joints2d: np.ndarray      # (B, 21, 2)
    mask_uv: np.ndarray       # (B, 21)
    joints3d: np.ndarray      # (B, 21, 3)
    mask_xyz: np.ndarray      # (B,)
    rotmats: np.ndarray       # (B, 16, 3, 3)
    betas: np.ndarray         # (B, 10)
    vertices: np.ndarray      # (B, V, 3)
    root: np.ndarray | None = None

    @property
    def global_orient(self) -> np.ndarray:
        return self.rotmats[:, 0].reshape(len(self.rotmats), 9)

    @property
    def pose(self) -> np.ndarray:
        return self.rotmats[:, 1:].reshape(len(self.rotmats), 135)


def stage_losses(state, targets: Targets) -> dict[str, Tensor]:
    """All eight terms for one decoder state (params + decoded output)."""
    out, params = state.output, state.params
    root_gt = targets.root if targets.root is not None else targets.joints3d[:, 0]
    lg, lp, lb = loss_params(params.global_orient, targets.global_orient,
                             params.pose, targets.pose, params.betas, targets.betas)
    return {
        "l2d": loss_2d(out.projected, targets.joints2d, targets.mask_uv),
        "l3d": loss_3d_joint(out.joints, targets.joints3d, targets.mask_xyz),
        "lbone": loss_bone(out.joints, targets.joints3d, targets.mask_xyz),
        "lvert": loss_vert(out.vertices, targets.vertices, out.joints[:, 0], root_gt),
        "lglobal": lg,
        "lpose": lp,
        "lbetas": lb,
        "lshape": loss_shape_reg(params.betas),
    }


def total_loss(terms: dict, weights: LossConfig) -> Tensor:
    """Weighted sum of the eight terms (values may be Tensors or floats)."""
    total = None
    for name in TERMS:
        lam = getattr(weights, _WEIGHT_KEYS[name])
        value = terms[name]
        contrib = value * lam if isinstance(value, Tensor) else Tensor(float(value) * lam)
        total = contrib if total is None else total + contrib
    return total


def objective(stages, targets: Targets, weights: LossConfig, deep_supervision: bool = True
              ) -> tuple[Tensor, dict[str, float]]:
    """Total loss over decoder stages; the report holds the final stage's terms."""
    total = None
    report: dict[str, float] = {}
    for i, state in enumerate(stages):
        final = i == len(stages) - 1
        if not final and not deep_supervision:
            continue
        terms = stage_losses(state, targets)
        stage_total = total_loss(terms, weights)
        w = 1.0 if final else weights.intermediate_weight
        contrib = stage_total if w == 1.0 else stage_total * w
        total = contrib if total is None else total + contrib
        if final:
            report = {k: float(v.data) for k, v in terms.items()}
    report["total"] = float(total.data)
    return total, report
