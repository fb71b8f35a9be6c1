"""SO(3) / SE(3) Lie group primitives.

Conventions used throughout the package:

* rotations are 3x3 matrices, poses are 4x4 homogeneous matrices (or the
  :class:`Pose` wrapper around a rotation and a translation);
* twists are 6-vectors ordered ``(angular, linear)``;
* every function broadcasts over leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
# series cutoff for the SE(3) Jacobian coefficients, which divide by theta^5
_JAC_SERIES = 1e-3


class GeometryError(ValueError):
    """Raised for non-finite or otherwise invalid geometric input."""


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise GeometryError(f"{what} contains non-finite values")


def hat(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _so3_coeffs(theta: np.ndarray):
    """sin(t)/t, (1-cos t)/t^2 and (t-sin t)/t^3 with small-angle fallbacks."""
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = t * t
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(t) / t)
    # 2 sin^2(t/2) avoids the cancellation in 1 - cos t
    b = np.where(small, 0.5 - theta**2 / 24.0, 2.0 * np.sin(0.5 * t) ** 2 / t2)
    c = np.where(small, 1.0 / 6.0 - theta**2 / 120.0, (t - np.sin(t)) / (t2 * t))
    return a, b, c


def rot_exp(v: np.ndarray) -> np.ndarray:
    """Rodrigues exponential of axis-angle vectors ``(..., 3) -> (..., 3, 3)``."""
    v = np.asarray(v, dtype=float)
    _check_finite(v, "rotation vector")
    theta = np.linalg.norm(v, axis=-1)
    a, b, _ = _so3_coeffs(theta)
    K = hat(v)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def is_rotation(R: np.ndarray, tol: float = 1e-6) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3) or not np.all(np.isfinite(R)):
        return False
    eye = np.eye(3)
    ortho = np.abs(np.swapaxes(R, -1, -2) @ R - eye).max() <= tol
    return bool(ortho and np.abs(np.linalg.det(R) - 1.0).max() <= tol)


def rot_log(R: np.ndarray, check: bool = True) -> np.ndarray:
    """Principal logarithm of rotation matrices, angle in ``[0, pi]``.

    Near ``pi`` the axis is recovered from the symmetric part of ``R``; the
    sign there is only fixed up to the numerical sign of ``R - R^T``.
    ``check=False`` skips the orthonormality test (integrator stages).
    """
    R = np.asarray(R, dtype=float)
    if check and not is_rotation(R):
        raise GeometryError("matrix is not a rotation (tolerance 1e-6)")
    w = vee(R - np.swapaxes(R, -1, -2)) * 0.5  # sin(theta) * axis
    s = np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)

    small = theta < SMALL_ANGLE
    safe_s = np.where(s > 0, s, 1.0)
    scale = np.where(small, 1.0 + theta**2 / 6.0, theta / safe_s)
    out = w * scale[..., None]

    near_pi = (c < 0) & (s < 1e-4)
    if np.any(near_pi):
        Rp = R[near_pi]
        cp = c[near_pi]
        B = 0.5 * (Rp + np.swapaxes(Rp, -1, -2)) - cp[:, None, None] * np.eye(3)
        diag = np.diagonal(B, axis1=-2, axis2=-1)
        idx = np.argmax(diag, axis=-1)
        col = np.take_along_axis(B, idx[:, None, None], axis=-1)[..., 0]
        axis = col / np.linalg.norm(col, axis=-1, keepdims=True)
        sign = np.sign(np.einsum("ij,ij->i", axis, w[near_pi]))
        sign = np.where(sign == 0, 1.0, sign)
        out[near_pi] = axis * (sign * theta[near_pi])[:, None]
    return out


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    _, b, c = _so3_coeffs(theta)
    K = hat(phi)
    return np.eye(3) + b[..., None, None] * K + c[..., None, None] * (K @ K)


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    d = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        1.0 / t**2 - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t)),
    )
    K = hat(phi)
    return np.eye(3) - 0.5 * K + d[..., None, None] * (K @ K)


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    return so3_left_jacobian(-np.asarray(phi, dtype=float))


# ---------------------------------------------------------------- SE(3) --


def make_pose(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    shape = np.broadcast_shapes(R.shape[:-2], t.shape[:-1])
    T = np.zeros(shape + (4, 4))
    T[..., :3, :3] = R
    T[..., :3, 3] = t
    T[..., 3, 3] = 1.0
    return T


def se3_exp(xi: np.ndarray) -> np.ndarray:
    """Exponential of twists ``(angular, linear)`` to 4x4 poses."""
    xi = np.asarray(xi, dtype=float)
    _check_finite(xi, "twist")
    phi, rho = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(phi, axis=-1)
    a, b, c = _so3_coeffs(theta)
    K = hat(phi)
    K2 = K @ K
    eye = np.eye(3)
    R = eye + a[..., None, None] * K + b[..., None, None] * K2
    V = eye + b[..., None, None] * K + c[..., None, None] * K2
    return make_pose(R, np.einsum("...ij,...j->...i", V, rho))


def se3_log(T: np.ndarray) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    _check_finite(T, "pose")
    phi = rot_log(T[..., :3, :3])
    Vinv = so3_left_jacobian_inv(phi)
    rho = np.einsum("...ij,...j->...i", Vinv, T[..., :3, 3])
    return np.concatenate([phi, rho], axis=-1)


def se3_inv(T: np.ndarray) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    Rt = np.swapaxes(T[..., :3, :3], -1, -2)
    return make_pose(Rt, -np.einsum("...ij,...j->...i", Rt, T[..., :3, 3]))


def se3_adjoint(T: np.ndarray) -> np.ndarray:
    """6x6 adjoint for ``(angular, linear)`` twists: ``Exp(Ad_T x) = T Exp(x) T^-1``."""
    T = np.asarray(T, dtype=float)
    R = T[..., :3, :3]
    out = np.zeros(T.shape[:-2] + (6, 6))
    out[..., :3, :3] = R
    out[..., 3:, 3:] = R
    out[..., 3:, :3] = hat(T[..., :3, 3]) @ R
    return out


def se3_ad(xi: np.ndarray) -> np.ndarray:
    """Lie bracket matrix, ``ad(x) y = [x, y]``."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    W = hat(xi[..., :3])
    out[..., :3, :3] = W
    out[..., 3:, 3:] = W
    out[..., 3:, :3] = hat(xi[..., 3:])
    return out


def _se3_q(xi: np.ndarray) -> np.ndarray:
    phi, rho = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < _JAC_SERIES
    t = np.where(small, 1.0, theta)
    t2 = theta**2
    c1 = np.where(small, 1 / 6 - t2 / 120, (t - np.sin(t)) / t**3)
    c2 = np.where(small, 1 / 24 - t2 / 720, (t**2 + 2 * np.cos(t) - 2) / (2 * t**4))
    c3 = np.where(
        small, 1 / 120 - t2 / 2520, (2 * t - 3 * np.sin(t) + t * np.cos(t)) / (2 * t**5)
    )
    P = hat(phi)
    Rh = hat(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    PP = P @ P
    return (
        0.5 * Rh
        + c1[..., None, None] * (PR + RP + PRP)
        + c2[..., None, None] * (PP @ Rh + RP @ P - 3 * PRP)
        + c3[..., None, None] * (PRP @ P + PP @ RP)
    )


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    """Left Jacobian: ``Exp(x + d) ~= Exp(J_l(x) d) Exp(x)``."""
    xi = np.asarray(xi, dtype=float)
    J = so3_left_jacobian(xi[..., :3])
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., 3:, 3:] = J
    out[..., 3:, :3] = _se3_q(xi)
    return out


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    Ji = so3_left_jacobian_inv(xi[..., :3])
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Ji
    out[..., 3:, 3:] = Ji
    out[..., 3:, :3] = -Ji @ _se3_q(xi) @ Ji
    return out


def se3_right_jacobian(xi: np.ndarray) -> np.ndarray:
    """Right Jacobian: ``Exp(x + d) ~= Exp(x) Exp(J_r(x) d)``."""
    return se3_left_jacobian(-np.asarray(xi, dtype=float))


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


def rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation taking direction ``a`` onto direction ``b``."""
    a = np.asarray(a, dtype=float) / np.linalg.norm(a)
    b = np.asarray(b, dtype=float) / np.linalg.norm(b)
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    c = float(np.dot(a, b))
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        # antiparallel: any perpendicular axis works
        perp = np.cross(a, np.eye(3)[np.argmin(np.abs(a))])
        return rot_exp(np.pi * perp / np.linalg.norm(perp))
    return rot_exp(axis / s * np.arctan2(s, c))


def project_to_rotation(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    D = np.ones(M.shape[:-2] + (3,))
    D[..., -1] = np.sign(np.linalg.det(U @ Vt))
    return (U * D[..., None, :]) @ Vt


def random_rotation(rng: np.random.Generator, size=None) -> np.ndarray:
    """Haar-uniform rotations via normalised quaternions."""
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    q = rng.standard_normal(shape + (4,))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return quat_to_rot(q)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternions ``(x, y, z, w)`` to rotation matrices."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - z * w)
    R[..., 0, 2] = 2 * (x * z + y * w)
    R[..., 1, 0] = 2 * (x * y + z * w)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - x * w)
    R[..., 2, 0] = 2 * (x * z - y * w)
    R[..., 2, 1] = 2 * (y * z + x * w)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrices to unit quaternions ``(x, y, z, w)`` with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, m in enumerate(flat):
        tr = np.trace(m)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
                 (m[1, 0] - m[0, 1]) / s, 0.25 * s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [0.25 * s, (m[0, 1] + m[1, 0]) / s,
                 (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 1] + m[1, 0]) / s, 0.25 * s,
                 (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s,
                 0.25 * s, (m[1, 0] - m[0, 1]) / s]
        q = np.asarray(q)
        out[i] = q / np.linalg.norm(q) * (1.0 if q[3] >= 0 else -1.0)
    return out.reshape(R.shape[:-2] + (4,))


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float)
        t = np.array(self.t, dtype=float).reshape(3)
        if not is_rotation(R):
            raise GeometryError("Pose rotation is not orthonormal")
        if not np.all(np.isfinite(t)):
            raise GeometryError("Pose translation is not finite")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def exp(cls, xi: np.ndarray) -> "Pose":
        return cls.from_matrix(se3_exp(xi))

    @property
    def matrix(self) -> np.ndarray:
        return make_pose(self.R, self.t)

    def log(self) -> np.ndarray:
        return se3_log(self.matrix)

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def act(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p, dtype=float) @ self.R.T + self.t


def compose(a: Pose, b: Pose) -> Pose:
    return a @ b


def inverse(a: Pose) -> Pose:
    return a.inverse()
