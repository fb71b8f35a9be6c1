"""Trajectory error metrics: APE with alignment, scale error and gravity angle."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODES = ("se3_align", "sim3_align", "none")


@dataclass(frozen=True)
class ApeStats:
    mean: float
    median: float
    std: float
    max: float
    mode: str
    n: int
    scale: float = 1.0  # alignment scale (1 unless sim3_align)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "median": self.median, "std": self.std, "max": self.max,
                "mode": self.mode, "n": self.n, "scale": self.scale}


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = False):
    """Least-squares ``(s, R, t)`` with ``dst ~ s R src + t``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    var = np.mean(np.sum(xs**2, axis=1))
    s = float(np.trace(np.diag(S) @ D) / var) if with_scale and var > 0 else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def associate(t_est: np.ndarray, t_gt: np.ndarray, max_dt: float | None = None):
    """Nearest-neighbour timestamp matching; returns index pairs."""
    t_est = np.asarray(t_est, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    if max_dt is None:
        period = np.median(np.diff(t_gt)) if len(t_gt) > 1 else np.inf
        max_dt = 0.5 * period
    j = np.clip(np.searchsorted(t_gt, t_est), 1, max(len(t_gt) - 1, 1))
    left = j - 1
    if len(t_gt) > 1:
        j = np.where(np.abs(t_gt[left] - t_est) <= np.abs(t_gt[j] - t_est), left, j)
    else:
        j = np.zeros_like(j)
    ok = np.abs(t_gt[j] - t_est) <= max_dt + 1e-12
    return np.flatnonzero(ok), j[ok]


def ape(est_p: np.ndarray, gt_p: np.ndarray, mode: str = "se3_align",
        t_est: np.ndarray | None = None, t_gt: np.ndarray | None = None) -> ApeStats:
    """Absolute translational error after optional rigid or similarity alignment.

    Positions may be ``(M, 3)`` or poses ``(M, 4, 4)``.  With timestamps the
    samples are matched by nearest neighbour within half a sample period.
    """
    if mode not in MODES:
        raise ValueError(f"unknown alignment mode {mode!r}; expected one of {MODES}")
    est_p = np.asarray(est_p, dtype=float)
    gt_p = np.asarray(gt_p, dtype=float)
    if est_p.ndim == 3:
        est_p = est_p[:, :3, 3]
    if gt_p.ndim == 3:
        gt_p = gt_p[:, :3, 3]
    if t_est is not None and t_gt is not None:
        i, j = associate(t_est, t_gt)
        est_p, gt_p = est_p[i], gt_p[j]
    elif len(est_p) != len(gt_p):
        raise ValueError("trajectories differ in length and no timestamps were given")
    if len(est_p) < 3:
        raise ValueError("need at least three matched samples")
    s = 1.0
    if mode != "none":
        s, R, t = umeyama(est_p, gt_p, with_scale=mode == "sim3_align")
        est_p = s * est_p @ R.T + t
    e = np.linalg.norm(est_p - gt_p, axis=1)
    return ApeStats(float(e.mean()), float(np.median(e)), float(e.std()), float(e.max()),
                    mode, len(e), s)


def scale_error(scale_opt: float, scale_gt: float) -> float:
    if not scale_gt > 0:
        raise ValueError("ground-truth scale must be positive")
    return abs(scale_gt - scale_opt) / scale_gt


def gravity_error(g_opt, g_gt) -> float:
    """Angle between two gravity vectors in degrees."""
    a = np.asarray(g_opt, dtype=float)
    b = np.asarray(g_gt, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("gravity vectors must be nonzero")
    # atan2 form stays accurate near 0 and 180 degrees
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), a @ b)))


def scale_from_alignment(opt_p: np.ndarray, vo_p: np.ndarray, gt_p: np.ndarray) -> float:
    """Ground-truth scale of a VO track: the similarity scale mapping it onto metric truth,
    relative to the scale already applied in ``opt_p`` (``opt_p = scale * R vo_p``)."""
    return umeyama(np.asarray(vo_p, float), np.asarray(gt_p, float), with_scale=True)[0]
