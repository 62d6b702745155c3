"""Depth-prediction metrics and trajectory evaluation.

Depth follows the standard monocular protocol: the caller aligns scale with
the ratio of medians, predictions are clamped into [1e-3, cap], and seven
metrics are computed over pixels with valid ground truth at most cap units
away. Trajectories are compared with Absolute Trajectory Error after a
closed-form least-squares alignment; monocular estimates default to the
similarity (scale-solving) variant since their scale is unobservable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateProblemError
from .geometry import SE3Pose

PRED_DEPTH_FLOOR = 1e-3
DELTA_THRESHOLD = 1.25


@dataclass(frozen=True)
class DepthEvalReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float    # delta < 1.25
    a2: float    # delta < 1.25^2
    a3: float    # delta < 1.25^3

    def as_dict(self):
        return {"abs_rel": self.abs_rel, "sq_rel": self.sq_rel,
                "rmse": self.rmse, "rmse_log": self.rmse_log,
                "a1": self.a1, "a2": self.a2, "a3": self.a3}


def median_scale(pred, gt, mask=None):
    """Scale ratio median(gt)/median(pred) over ground-truth-valid pixels.

    Even-count medians are the mean of the two central values (numpy rule).
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    valid = gt > 0
    if mask is not None:
        valid &= np.asarray(mask, bool)
    if not valid.any():
        raise DegenerateProblemError("no valid ground-truth pixels for scaling")
    return float(np.median(gt[valid]) / np.median(pred[valid]))


def depth_metrics(pred, gt, mask=None, cap=80.0) -> DepthEvalReport:
    """Seven-metric depth report with depth capping.

    Median scaling is the caller's responsibility. The valid set is
    mask AND gt > 0 AND gt <= cap; predictions are clamped to
    [1e-3, cap] before evaluation.
    """
    if cap <= 0:
        raise ValueError("cap must be positive")
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    valid = (gt > 0) & (gt <= cap)
    if mask is not None:
        valid &= np.asarray(mask, bool)
    if not valid.any():
        raise DegenerateProblemError("no valid pixels for depth evaluation")
    y = np.clip(pred[valid], PRED_DEPTH_FLOOR, cap)
    ystar = gt[valid]

    thresh = np.maximum(y / ystar, ystar / y)
    err = y - ystar
    return DepthEvalReport(
        abs_rel=float(np.mean(np.abs(err) / ystar)),
        sq_rel=float(np.mean(err * err / ystar)),
        rmse=float(np.sqrt(np.mean(err * err))),
        rmse_log=float(np.sqrt(np.mean((np.log(y) - np.log(ystar)) ** 2))),
        a1=float(np.mean(thresh < DELTA_THRESHOLD)),
        a2=float(np.mean(thresh < DELTA_THRESHOLD ** 2)),
        a3=float(np.mean(thresh < DELTA_THRESHOLD ** 3)),
    )


# --- trajectory alignment -----------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    """Ordered 3D positions with frame indices."""

    positions: np.ndarray     # (n, 3)
    indices: tuple = None

    def __post_init__(self):
        p = np.ascontiguousarray(np.asarray(self.positions, dtype=float))
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError("positions must have shape (n, 3)")
        if not np.all(np.isfinite(p)):
            raise ValueError("positions must be finite")
        object.__setattr__(self, "positions", p)
        if self.indices is None:
            object.__setattr__(self, "indices", tuple(range(len(p))))

    def __len__(self):
        return len(self.positions)


def _as_positions(traj):
    if isinstance(traj, Trajectory):
        return traj.positions
    return np.asarray(traj, dtype=float).reshape(-1, 3)


def horn_align(P, Q, with_scale=False):
    """Closed-form least-squares alignment mapping P onto Q.

    Returns (SE3Pose, scale); scale is 1.0 unless with_scale. The rotation
    comes from the SVD of the centred cross-covariance with a determinant
    correction, so it is always a proper rotation. Collinear point sets are
    rejected as degenerate.
    """
    p = _as_positions(P)
    q = _as_positions(Q)
    if p.shape != q.shape or len(p) < 3:
        raise ValueError("need matching trajectories with at least 3 points")
    pc = p - p.mean(axis=0)
    qc = q - q.mean(axis=0)
    H = pc.T @ qc
    U, sv, Vt = np.linalg.svd(H)
    spread = np.linalg.svd(pc, compute_uv=False)
    if spread[1] < 1e-12 * max(spread[0], 1.0):
        raise DegenerateProblemError("trajectory points are collinear")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    if with_scale:
        denom = np.sum(pc * pc)
        scale = float(np.trace(np.diag(sv) @ D) / denom)
    else:
        scale = 1.0
    t = q.mean(axis=0) - scale * R @ p.mean(axis=0)
    return SE3Pose(R, t), scale


def ate_rmse(P, Q, mode="similarity"):
    """Absolute trajectory error: RMSE of translational residuals.

    Aligns P to Q (rigid or similarity) and reports
    sqrt(mean ||s R p_i + t - q_i||^2), the translational magnitude of the
    per-frame error transforms.
    """
    if mode not in ("rigid", "similarity"):
        raise ValueError("mode must be 'rigid' or 'similarity'")
    p = _as_positions(P)
    q = _as_positions(Q)
    T, s = horn_align(p, q, with_scale=(mode == "similarity"))
    aligned = s * (p @ T.R.T) + T.t
    err = aligned - q
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


def snippet_eval(pred, gt, length=5, mode="similarity", stride=1):
    """Sliding-window ATE over short tracklets.

    Evaluates ate_rmse on every window of the given length (default 5,
    stride 1) and reports (mean, std, count). The sequence must be at least
    one window long.
    """
    p = _as_positions(pred)
    q = _as_positions(gt)
    if p.shape != q.shape:
        raise ValueError("trajectories must have matching lengths")
    if length < 3:
        raise ValueError("snippet length must be at least 3")
    n = len(p)
    if n < length:
        raise DegenerateProblemError(
            f"sequence of {n} frames is shorter than snippet length {length}")
    errors = []
    for start in range(0, n - length + 1, stride):
        errors.append(ate_rmse(p[start:start + length],
                               q[start:start + length], mode=mode))
    errors = np.array(errors)
    return float(errors.mean()), float(errors.std()), len(errors)
