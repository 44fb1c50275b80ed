"""Absolute-trajectory-error evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AteReport:
    rmse: float
    per_pose_errors: np.ndarray
    alignment: str  # "none" | "rigid"


def _rigid_align(src: np.ndarray, dst: np.ndarray):
    """SE(3) transform minimizing sum ||R src + t - dst||^2 (Kabsch)."""
    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    C = (src - src_mean).T @ (dst - dst_mean)
    U, _, Vt = np.linalg.svd(C)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    t = dst_mean - R @ src_mean
    return R, t


def ate_rmse(estimate, truth, align: str = "rigid") -> AteReport:
    """RMSE of per-pose translational errors between index-aligned trajectories.

    With ``align="rigid"`` the closed-form SE(3) transform minimizing the
    summed squared translation error is applied to the estimate first.
    """
    if align not in ("none", "rigid"):
        raise ValueError(f"align must be 'none' or 'rigid', got {align!r}")
    if len(estimate) != len(truth):
        raise ValueError(f"{len(estimate)} estimated poses vs {len(truth)} ground truth")
    est = np.stack([p.translation for p in estimate])
    ref = np.stack([p.translation for p in truth])
    if align == "rigid":
        if len(est) < 3:
            raise ValueError("rigid alignment needs at least 3 poses")
        R, t = _rigid_align(est, ref)
        est = est @ R.T + t
    errors = np.linalg.norm(est - ref, axis=1)
    return AteReport(
        rmse=float(np.sqrt(np.mean(errors**2))),
        per_pose_errors=errors,
        alignment=align,
    )
