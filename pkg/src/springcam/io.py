"""Trajectory CSV and JSON helpers."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import geometry as geo
from .spline import Kinematics

POSE_COLUMNS = ["t", "tx", "ty", "tz", "qx", "qy", "qz", "qw"]
KIN_COLUMNS = POSE_COLUMNS + ["ax", "ay", "az", "wx", "wy", "wz", "alx", "aly", "alz"]


def _fmt(x: float) -> str:
    return repr(float(x))  # shortest round-trip representation


def write_trajectory(path, t, T, acc=None, omega=None, alpha=None) -> None:
    """Write poses (and optionally world acceleration, body rates) as CSV."""
    t = np.asarray(t, dtype=float)
    T = np.asarray(T, dtype=float)
    q = geo.rot_to_quat(T[:, :3, :3])
    cols = [t[:, None], T[:, :3, 3], q]
    header = POSE_COLUMNS
    if acc is not None:
        cols += [np.asarray(acc, float), np.asarray(omega, float), np.asarray(alpha, float)]
        header = KIN_COLUMNS
    data = np.concatenate(cols, axis=1)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in data:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_kinematics(path, k: Kinematics) -> None:
    write_trajectory(path, k.t, k.T, k.acc, k.omega, k.alpha)


def read_trajectory(path) -> dict:
    """Read a trajectory CSV; returns ``t``, ``T`` and, when present, ``acc``, ``omega``, ``alpha``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trajectory file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if header[:len(POSE_COLUMNS)] != POSE_COLUMNS:
        raise ValueError(f"{path}: expected header starting with {','.join(POSE_COLUMNS)}")
    try:
        data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    except ValueError as exc:
        raise ValueError(f"{path}: malformed numeric data ({exc})") from None
    if len(data) and np.any(np.diff(data[:, 0]) < 0):
        raise ValueError(f"{path}: timestamps must be sorted")
    q = data[:, 4:8]
    norm = np.linalg.norm(q, axis=1)
    if np.any(np.abs(norm - 1.0) > 1e-6):
        raise ValueError(f"{path}: quaternions must have unit norm")
    out = {"t": data[:, 0], "T": geo.make_pose(geo.quat_to_rot(q / norm[:, None]), data[:, 1:4])}
    if header == KIN_COLUMNS:
        out.update(acc=data[:, 8:11], omega=data[:, 11:14], alpha=data[:, 14:17])
    elif len(header) != len(POSE_COLUMNS):
        raise ValueError(f"{path}: unexpected columns {header}")
    return out


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from None
