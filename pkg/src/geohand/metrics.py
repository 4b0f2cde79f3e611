"""Evaluation metrics: root-aligned and Procrustes-aligned errors, F-scores.

Inputs are in meters; every reported value is in millimeters (F-scores are unitless).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MM = 1000.0
METRIC_NAMES = ("MPJPE", "PA-MPJPE", "MPVPE", "PA-MPVPE", "F@5", "F@15")


class DegenerateAlignmentError(ValueError):
    pass


@dataclass
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"point sets must both be (K, 3), got {pred.shape} and {gt.shape}")
    return pred, gt


def mpjpe(pred, gt, root_index: int | None = 0) -> float:
    """Mean L2 distance after moving both roots to the origin, in mm."""
    pred, gt = _check_pair(pred, gt)
    if root_index is not None:
        pred = pred - pred[root_index]
        gt = gt - gt[root_index]
    return float(np.linalg.norm(pred - gt, axis=1).mean() * MM)


def procrustes_align(pred, gt) -> tuple[SimilarityTransform, np.ndarray]:
    """Closed-form similarity (s, R, t) minimising sum ||s R p + t - g||^2."""
    pred, gt = _check_pair(pred, gt)
    if len(pred) < 3:
        raise DegenerateAlignmentError("Procrustes alignment needs at least 3 points")
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    p, g = pred - mu_p, gt - mu_g
    var_p = (p * p).sum()
    if var_p <= 1e-300 or (g * g).sum() <= 1e-300:
        raise DegenerateAlignmentError("point set collapses to a single point")
    cov = g.T @ p
    u, sv, vt = np.linalg.svd(cov)
    if np.linalg.matrix_rank(cov, tol=1e-12 * max(sv[0], 1e-300)) < 2:
        raise DegenerateAlignmentError("cross-covariance is rank deficient (collinear points)")
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2] = -1.0
    rot = u @ np.diag(d) @ vt
    scale = float((sv * d).sum() / var_p)
    trans = mu_g - scale * rot @ mu_p
    tf = SimilarityTransform(scale, rot, trans)
    return tf, tf.apply(pred)


def pa_error(pred, gt) -> float:
    _, aligned = procrustes_align(pred, gt)
    return float(np.linalg.norm(aligned - np.asarray(gt, dtype=np.float64), axis=1).mean() * MM)


def _nn_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point of ``a`` to its nearest neighbour in ``b`` (brute force)."""
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return np.sqrt(d2.min(axis=1))


def f_score(pred_vertices, gt_vertices, threshold_mm: float, align: bool = True) -> float:
    pred = np.asarray(pred_vertices, dtype=np.float64)
    gt = np.asarray(gt_vertices, dtype=np.float64)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("f_score needs non-empty point clouds")
    if align and pred.shape == gt.shape:
        _, pred = procrustes_align(pred, gt)
    thr = threshold_mm / MM
    precision = float((_nn_dist(pred, gt) <= thr).mean())
    recall = float((_nn_dist(gt, pred) <= thr).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def sample_metrics(j_pred, j_gt, v_pred, v_gt, root_index: int = 0, align_f: bool = True) -> dict[str, float]:
    """All six metrics for one sample; vertices are root-aligned with the joints' root."""
    j_pred, j_gt = np.asarray(j_pred), np.asarray(j_gt)
    v_pred = np.asarray(v_pred) - j_pred[root_index]
    v_gt = np.asarray(v_gt) - j_gt[root_index]
    return {
        "MPJPE": mpjpe(j_pred, j_gt, root_index),
        "PA-MPJPE": pa_error(j_pred, j_gt),
        "MPVPE": mpjpe(v_pred, v_gt, None),
        "PA-MPVPE": pa_error(v_pred, v_gt),
        "F@5": f_score(v_pred, v_gt, 5.0, align_f),
        "F@15": f_score(v_pred, v_gt, 15.0, align_f),
    }


def aggregate(rows: list[dict[str, float]]) -> dict[str, float]:
    """Order-independent mean (sum then divide) over per-sample metric rows."""
    if not rows:
        return {k: float("nan") for k in METRIC_NAMES}
    return {k: float(sum(r[k] for r in rows) / len(rows)) for k in rows[0]}


def to_csv(metrics: dict[str, float]) -> str:
    lines = ["metric,value"] + [f"{k},{metrics[k]:.6f}" for k in METRIC_NAMES if k in metrics]
    return "\n".join(lines) + "\n"
