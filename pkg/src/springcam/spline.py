"""Cumulative uniform B-splines on SE(3).

A spline of order ``k`` over control poses ``T_0 .. T_N`` is evaluated on
segment ``i`` as ``T_i * prod_j Exp(Bc_j(u) * Omega_{i+j})`` where
``Omega_m = Log(T_{m-1}^-1 T_m)`` and ``Bc`` are the cumulative basis
functions built from :func:`blending_matrix`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import geometry as geo

log = logging.getLogger(__name__)

MAX_ORDER = 8


class SplineDomainError(ValueError):
    """Query time outside the evaluation interval of a spline."""


@dataclass(frozen=True)
class BlendingMatrix:
    order: int
    matrix: np.ndarray  # m[s, n]: weight of control s on power u^n
    cumulative: np.ndarray  # suffix sums over s

    def basis(self, u: np.ndarray, derivative: int = 0) -> np.ndarray:
        return _powers(u, self.order, derivative) @ self.matrix.T

    def cumulative_basis(self, u: np.ndarray, derivative: int = 0) -> np.ndarray:
        return _powers(u, self.order, derivative) @ self.cumulative.T


def _powers(u, k: int, derivative: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    out = np.zeros(u.shape + (k,))
    for n in range(derivative, k):
        coef = math.perm(n, derivative)
        out[..., n] = coef * u ** (n - derivative)
    return out


def blending_matrix(k: int) -> BlendingMatrix:
    """Uniform B-spline blending matrix of order ``k`` (degree ``k - 1``)."""
    if not isinstance(k, (int, np.integer)) or not 2 <= k <= MAX_ORDER:
        raise ValueError(f"spline order must be an integer in [2, {MAX_ORDER}], got {k!r}")
    k = int(k)
    # exact rational arithmetic so the cumulative sums carry no round-off
    exact = [[Fraction(0)] * k for _ in range(k)]
    for s in range(k):
        for n in range(k):
            acc = 0
            for l in range(s, k):
                acc += (-1) ** (l - s) * math.comb(k, l - s) * (k - 1 - l) ** (k - 1 - n)
            exact[s][n] = Fraction(math.comb(k - 1, n) * acc, math.factorial(k - 1))
    cum = [[sum(exact[j][n] for j in range(s, k)) for n in range(k)] for s in range(k)]
    m = np.array(exact, dtype=float)
    cumulative = np.array(cum, dtype=float)
    m.setflags(write=False)
    cumulative.setflags(write=False)
    return BlendingMatrix(k, m, cumulative)


@dataclass(frozen=True)
class Kinematics:
    """Time-stamped poses with their derivatives (struct of arrays).

    ``vel``/``acc`` are world-frame linear quantities, ``omega``/``alpha``
    body-frame angular velocity and acceleration.
    """

    t: np.ndarray
    T: np.ndarray
    vel: np.ndarray
    acc: np.ndarray
    omega: np.ndarray
    alpha: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, idx) -> "Kinematics":
        return Kinematics(*(np.asarray(getattr(self, f))[idx] for f in _KIN_FIELDS))

    def pose(self, i: int) -> geo.Pose:
        return geo.Pose.from_matrix(self.T[i])


_KIN_FIELDS = ("t", "T", "vel", "acc", "omega", "alpha")


@dataclass(frozen=True)
class SplineTrajectory:
    order: int
    dt: float
    t0: float
    control: np.ndarray  # (N+1, 4, 4)
    blend: BlendingMatrix = field(init=False, repr=False, compare=False)
    increments: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        control = np.array(self.control, dtype=float)
        if control.ndim != 3 or control.shape[1:] != (4, 4):
            raise ValueError("control poses must have shape (N+1, 4, 4)")
        if not self.dt > 0:
            raise ValueError("knot spacing must be positive")
        if len(control) < self.order:
            raise ValueError(f"order {self.order} needs at least {self.order} control poses")
        control.setflags(write=False)
        object.__setattr__(self, "control", control)
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "blend", blending_matrix(self.order))
        inc = geo.se3_log(geo.se3_inv(control[:-1]) @ control[1:])
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @property
    def n_segments(self) -> int:
        return len(self.control) - self.order + 1

    @property
    def domain(self) -> tuple[float, float]:
        return self.t0, self.t0 + self.n_segments * self.dt

    def with_control(self, control: np.ndarray) -> "SplineTrajectory":
        return SplineTrajectory(self.order, self.dt, self.t0, control)

    def knot_time(self, m) -> np.ndarray:
        """Time at which control pose ``m`` has its largest influence."""
        return self.t0 + (np.asarray(m) - (self.order - 2) / 2.0) * self.dt

    def _locate(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        lo, hi = self.domain
        slack = 1e-9 * self.dt
        bad = (t < lo - slack) | (t > hi + slack) | ~np.isfinite(t)
        if np.any(bad):
            raise SplineDomainError(
                f"time {t[bad][0]!r} outside spline domain [{lo}, {hi}]"
            )
        s = (t - self.t0) / self.dt
        i = np.clip(np.floor(s).astype(int), 0, self.n_segments - 1)
        return t, i, s - i

    def _factors(self, i, u, derivative=0):
        """Increments, cumulative weights and Exp factors for each query."""
        k = self.order
        omega = self.increments[i[:, None] + np.arange(k - 1)[None, :]]  # (M, k-1, 6)
        weights = [self.blend.cumulative_basis(u, d)[:, 1:] / self.dt**d
                   for d in range(derivative + 1)]
        A = geo.se3_exp(weights[0][..., None] * omega)
        return omega, weights, A

    def evaluate(self, t):
        """Pose at ``t``: a :class:`Pose` for scalar input, ``(M, 4, 4)`` otherwise."""
        scalar = np.ndim(t) == 0
        _, i, u = self._locate(t)
        _, _, A = self._factors(i, u)
        T = self.control[i].copy()
        for j in range(self.order - 1):
            T = T @ A[:, j]
        return geo.Pose.from_matrix(T[0]) if scalar else T

    def body_twists(self, t):
        """Pose, body velocity twist and its time derivative at ``t``."""
        _, i, u = self._locate(t)
        omega, (w0, w1, w2), A = self._factors(i, u, derivative=2)
        M = len(i)
        T = self.control[i].copy()
        xi = np.zeros((M, 6))
        dxi = np.zeros((M, 6))
        for j in range(self.order - 1):
            Aj = A[:, j]
            Ad_inv = geo.se3_adjoint(geo.se3_inv(Aj))
            Om = omega[:, j]
            xi = np.einsum("mab,mb->ma", Ad_inv, xi) + w1[:, j, None] * Om
            dxi = (
                np.einsum("mab,mb->ma", Ad_inv, dxi)
                + w2[:, j, None] * Om
                - w1[:, j, None] * np.einsum("mab,mb->ma", geo.se3_ad(Om), xi)
            )
            T = T @ Aj
        return T, xi, dxi

    def derivatives(self, t) -> Kinematics:
        """Analytic pose derivatives.

        The product-rule expansion of ``d/dt prod_j A_j(t)`` is evaluated as a
        recursion on body twists: with ``T_j = T_{j-1} A_j``,
        ``xi_j = Ad(A_j^-1) xi_{j-1} + dB_j Omega_j`` and its derivative picks
        up ``ddB_j Omega_j - dB_j [Omega_j, xi_j]``.
        """
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        T, xi, dxi = self.body_twists(t_arr)
        R = T[:, :3, :3]
        w, v = xi[:, :3], xi[:, 3:]
        dw, dv = dxi[:, :3], dxi[:, 3:]
        vel = np.einsum("mij,mj->mi", R, v)
        acc = np.einsum("mij,mj->mi", R, dv + np.cross(w, v))
        return Kinematics(t_arr, T, vel, acc, w, dw)

    def pose_jacobian(self, t):
        """Poses and their sensitivity to the active control poses.

        Returns ``(T, first, J)`` where ``J[q, m]`` (6x6) maps a right
        perturbation ``T_{first[q]+m} <- T Exp(d)`` of a control pose onto
        the right perturbation of the evaluated pose ``T(t_q)``.
        """
        _, i, u = self._locate(t)
        omega, (w0,), A = self._factors(i, u)
        k = self.order
        M = len(i)
        # suffix products S_j = A_{j+1} ... A_{k-1}; S[k-1] = I
        S = np.empty((M, k, 4, 4))
        S[:, k - 1] = np.eye(4)
        for j in range(k - 2, -1, -1):
            S[:, j] = A[:, j] @ S[:, j + 1]
        J = np.zeros((M, k, 6, 6))
        J[:, 0] = geo.se3_adjoint(geo.se3_inv(S[:, 0]))
        for j in range(1, k):
            Om = omega[:, j - 1]
            b = w0[:, j - 1]
            G = (geo.se3_adjoint(geo.se3_inv(S[:, j]))
                 @ geo.se3_right_jacobian(b[:, None] * Om)) * b[:, None, None]
            J[:, j] += G @ geo.se3_right_jacobian_inv(Om)
            J[:, j - 1] -= G @ geo.se3_left_jacobian_inv(Om)
        T = self.control[i] @ S[:, 0]
        return T, i, J


@dataclass(frozen=True)
class SplineFit:
    spline: SplineTrajectory
    rms: float  # translation residual RMS (m)
    rot_rms: float  # rotation residual RMS (rad)
    iterations: int
    converged: bool


def _segments_for(times: np.ndarray, t0: float, dt: float) -> int:
    span = times[-1] - t0
    return max(1, int(math.ceil(span / dt - 1e-9)))


def fit(times, poses, k: int = 4, dt: float = 0.1, *, t0: float | None = None,
        n_segments: int | None = None, max_iter: int = 50, tol: float = 1e-12,
        init: np.ndarray | None = None, robust: bool = False, prior: float = 0.0) -> SplineFit:
    """Least-squares spline through time-stamped poses.

    Minimises ``sum ||Log(T(t_i)^-1 P_i)||^2`` over the control poses with
    damped Gauss-Newton on right perturbations.  Controls start from the
    sample nearest to each control's peak-influence time unless ``init`` is
    given.  With ``robust`` the rotation and translation parts of each
    sample are scaled by their median residual norm and weighted by a
    Huber loss, so isolated outlier poses barely bend the curve.  A positive
    ``prior`` adds ``prior * ||Log(C0_j^-1 C_j)||^2`` per control pose, tying
    each control to its starting value (in the same units as one sample);
    it keeps weakly observed end controls from running away on noisy data.
    """
    times = np.asarray(times, dtype=float)
    poses = np.asarray(poses, dtype=float)
    if len(times) != len(poses) or len(times) < 2:
        raise ValueError("need matching time stamps and poses (at least two)")
    if np.any(np.diff(times) < 0):
        raise ValueError("sample times must be sorted")
    t0 = float(times[0]) if t0 is None else float(t0)
    S = _segments_for(times, t0, dt) if n_segments is None else int(n_segments)
    n_ctrl = S + k - 1
    seg = np.clip(np.floor((times - t0) / dt).astype(int), 0, S - 1)
    if np.any(times < t0 - 1e-9 * dt) or np.any(times > t0 + S * dt + 1e-9 * dt):
        raise ValueError("samples fall outside the requested spline domain")
    if len(np.unique(seg)) < S:
        raise ValueError("insufficient samples: every knot interval needs at least one sample")
    if 6 * len(times) < 6 * n_ctrl:
        raise ValueError("insufficient samples for the number of control poses")

    if init is None:
        centers = t0 + (np.arange(n_ctrl) - (k - 2) / 2.0) * dt
        nearest = np.abs(times[None, :] - centers[:, None]).argmin(axis=1)
        control = poses[nearest].copy()
    else:
        control = np.array(init, dtype=float)
    spline = SplineTrajectory(k, dt, t0, control)
    ref_inv = geo.se3_inv(control)

    def residuals(spl):
        T = spl.evaluate(times)
        return geo.se3_log(geo.se3_inv(T) @ poses)

    r = residuals(spline)
    scale = np.ones(6)
    if robust:
        # a plain fit first, so the robust scale reflects the noise rather than the initial guess
        plain = fit(times, poses, k, dt, t0=t0, n_segments=S, max_iter=max_iter, tol=tol,
                    init=control, prior=prior)
        spline = plain.spline
        r = residuals(spline)
        med = [np.median(np.linalg.norm(r[:, :3], axis=1)), np.median(np.linalg.norm(r[:, 3:], axis=1))]
        scale = np.repeat([max(m, 1e-12) for m in med], 3)

    def prior_cost(spl):
        if prior <= 0:
            return 0.0, None
        e = geo.se3_log(ref_inv @ spl.control)
        return prior * float(np.sum(e**2 / scale**2)), e

    def robust_cost(r):
        if not robust:
            return float(np.sum(r**2)), None
        z = r / scale
        n = np.stack([np.linalg.norm(z[:, :3], axis=1), np.linalg.norm(z[:, 3:], axis=1)], axis=1)
        k_h = 2.0
        c = np.where(n <= k_h, n**2, 2 * k_h * n - k_h**2)
        w = np.where(n <= k_h, 1.0, k_h / np.maximum(n, 1e-300))
        return float(np.sum(c)), np.repeat(w, 3, axis=1) / scale**2

    cost, wts = robust_cost(r)
    pc, e_prior = prior_cost(spline)
    cost += pc
    mu = 1e-6
    converged = False
    rows = (np.arange(6 * len(times)).reshape(-1, 6, 1, 1)
            * np.ones((1, 1, k, 6), dtype=int))
    it = 0
    for it in range(1, max_iter + 1):
        T, first, J = spline.pose_jacobian(times)
        Jr = -np.einsum("qab,qmbc->qmac", geo.se3_left_jacobian_inv(r), J)
        cols = (6 * (first[:, None, None, None] + np.arange(k)[None, None, :, None])
                + np.arange(6)[None, None, None, :])
        cols = np.broadcast_to(cols, (len(times), 6, k, 6))
        Jsp = sp.csr_matrix((Jr.transpose(0, 2, 1, 3).ravel(),
                             (rows.ravel(), cols.ravel())),
                            shape=(6 * len(times), 6 * n_ctrl))
        if wts is None:
            H = (Jsp.T @ Jsp).tocsc()
            g = Jsp.T @ r.ravel()
        else:
            W = sp.diags(wts.ravel())
            H = (Jsp.T @ W @ Jsp).tocsc()
            g = Jsp.T @ (wts.ravel() * r.ravel())
        if e_prior is not None:
            Jp = geo.se3_right_jacobian_inv(e_prior) / scale[None, :, None]
            blocks = prior * np.swapaxes(Jp, 1, 2) @ Jp
            H = H + sp.block_diag(list(blocks), format="csc")
            g = g + prior * np.einsum("mji,mj->mi", Jp, e_prior / scale).ravel()
        diag = H.diagonal()
        improved = False
        while mu < 1e10:
            A = H + sp.diags(mu * (diag + 1e-9))
            step = -spla.spsolve(A, g).reshape(n_ctrl, 6)
            trial = spline.with_control(spline.control @ geo.se3_exp(step))
            r_new = residuals(trial)
            new_cost, new_wts = robust_cost(r_new)
            new_pc, new_e = prior_cost(trial)
            new_cost += new_pc
            if new_cost <= cost:
                improved = True
                break
            mu *= 10.0
        if not improved:
            converged = True  # no descent direction left at working precision
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        spline, r, cost, wts, e_prior = trial, r_new, new_cost, new_wts, new_e
        mu = max(mu / 10.0, 1e-12)
        if rel < tol or cost < 1e-28 or np.abs(step).max() < 1e-13:
            converged = True
            break
    if not converged:
        log.warning("spline fit stopped after %d iterations without converging", max_iter)
    rms = float(np.sqrt(np.mean(np.sum(r[:, 3:] ** 2, axis=1))))
    rot_rms = float(np.sqrt(np.mean(np.sum(r[:, :3] ** 2, axis=1))))
    return SplineFit(spline, rms, rot_rms, it, converged)


# ------------------------------------------------------------ positions --

@dataclass
class PositionSpline:
    """Uniform cubic B-spline in R^3, linear in its control points.

    Segment ``i`` covers ``[t0 + i dt, t0 + (i + 1) dt]`` and blends controls
    ``i .. i + 3``.  The last segment is closed on the right.
    """

    dt: float
    t0: float
    control: np.ndarray  # (S + 3, 3)

    def __post_init__(self):
        self.control = np.asarray(self.control, dtype=float)
        if not self.dt > 0 or self.control.ndim != 2 or len(self.control) < 4:
            raise ValueError("need a positive spacing and at least four control points")

    @property
    def n_segments(self) -> int:
        return len(self.control) - 3

    @property
    def domain(self) -> tuple[float, float]:
        return self.t0, self.t0 + self.n_segments * self.dt

    def basis(self, t, derivative: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """First control index and the four blending weights at each time."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        lo, hi = self.domain
        if np.any(t < lo - 1e-9 * self.dt) or np.any(t > hi + 1e-9 * self.dt):
            raise SplineDomainError(f"times outside the position spline domain [{lo}, {hi}]")
        s = (t - self.t0) / self.dt
        i = np.clip(np.floor(s).astype(int), 0, self.n_segments - 1)
        B = blending_matrix(4).basis(s - i, derivative) / self.dt**derivative
        return i, B

    def design(self, t, derivative: int = 0) -> sp.csr_matrix:
        """Sparse map from the flattened controls to the flattened positions."""
        i, B = self.basis(t, derivative)
        M, n = len(i), len(self.control)
        rows = np.repeat(np.arange(M), 4)
        cols = (i[:, None] + np.arange(4)).ravel()
        return sp.csr_matrix((B.ravel(), (rows, cols)), shape=(M, n))

    def evaluate(self, t, derivative: int = 0) -> np.ndarray:
        i, B = self.basis(t, derivative)
        idx = i[:, None] + np.arange(4)
        return np.einsum("mj,mjd->md", B, self.control[idx])

    def with_control(self, control) -> "PositionSpline":
        return PositionSpline(self.dt, self.t0, control)

    @classmethod
    def fit(cls, t, points, dt: float, t0: float | None = None, n_segments: int | None = None,
            weights=None) -> "PositionSpline":
        """Weighted linear least-squares fit to time-stamped points."""
        t = np.asarray(t, dtype=float)
        points = np.asarray(points, dtype=float)
        t0 = float(t[0]) if t0 is None else float(t0)
        S = _segments_for(t, t0, dt) if n_segments is None else int(n_segments)
        proto = cls(dt, t0, np.zeros((S + 3, points.shape[1])))
        A = proto.design(t)
        W = sp.diags(np.ones(len(t)) if weights is None else np.asarray(weights, float))
        H = (A.T @ W @ A).tocsc() + sp.identity(S + 3, format="csc") * 1e-12
        ctrl = spla.spsolve(H, A.T @ (W @ points))
        return proto.with_control(np.asarray(ctrl).reshape(S + 3, -1))


# ------------------------------------------------------------ rotations --

@dataclass
class RotationSpline:
    """Cumulative cubic B-spline on SO(3) with control-point Jacobians.

    ``R(t) = R_i prod_j Exp(Bc_j(u) d_{i+j})`` with ``d_m = Log(R_m^T R_{m+1})``,
    the rotation part of :class:`SplineTrajectory`.  Angular velocity and
    acceleration are body-frame.  Jacobians are taken with respect to right
    perturbations ``R_m <- R_m Exp(e)`` of the controls.
    """

    dt: float
    t0: float
    control: np.ndarray  # (S + 3, 3, 3)

    def __post_init__(self):
        self.control = np.asarray(self.control, dtype=float)
        if not self.dt > 0 or self.control.ndim != 3 or len(self.control) < 4:
            raise ValueError("need a positive spacing and at least four control rotations")

    @property
    def n_segments(self) -> int:
        return len(self.control) - 3

    @property
    def domain(self) -> tuple[float, float]:
        return self.t0, self.t0 + self.n_segments * self.dt

    def with_control(self, control) -> "RotationSpline":
        return RotationSpline(self.dt, self.t0, control)

    def _locate(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        lo, hi = self.domain
        if np.any(t < lo - 1e-9 * self.dt) or np.any(t > hi + 1e-9 * self.dt):
            raise SplineDomainError(f"times outside the rotation spline domain [{lo}, {hi}]")
        s = (t - self.t0) / self.dt
        i = np.clip(np.floor(s).astype(int), 0, self.n_segments - 1)
        return i, s - i

    def evaluate(self, t) -> np.ndarray:
        i, u = self._locate(t)
        d = geo.rot_log(np.swapaxes(self.control[:-1], 1, 2) @ self.control[1:], check=False)
        b = blending_matrix(4).cumulative_basis(u)[:, 1:]
        R = self.control[i].copy()
        for j in range(3):
            R = R @ geo.rot_exp(b[:, j, None] * d[i + j])
        return R

    def kinematics(self, t, jacobian: bool = False):
        """``(R, omega, alpha)``, plus ``(first, JR, Jw, Ja)`` with ``jacobian``.

        ``JR[q, m]`` maps a perturbation of control ``first[q] + m`` to the
        right perturbation of ``R(t_q)``; ``Jw`` and ``Ja`` map it to the
        body angular velocity and acceleration.
        """
        i, u = self._locate(t)
        M = len(i)
        bm = blending_matrix(4)
        b0, b1, b2 = (bm.cumulative_basis(u, n)[:, 1:] / self.dt**n for n in range(3))
        d = geo.rot_log(np.swapaxes(self.control[i[:, None] + np.arange(3)], 2, 3)
                        @ self.control[i[:, None] + np.arange(1, 4)], check=False)  # (M, 3, 3)
        A = geo.rot_exp(b0[..., None] * d)  # (M, 3, 3, 3)
        I3 = np.eye(3)
        w = np.zeros((M, 3))
        a = np.zeros((M, 3))
        Dw = np.zeros((M, 3, 3, 3))  # d omega / d increment j
        Da = np.zeros((M, 3, 3, 3))
        for j in range(3):
            At = np.swapaxes(A[:, j], 1, 2)
            dj = d[:, j]
            Jr = geo.so3_right_jacobian(-b0[:, j, None] * dj)
            u_ = np.einsum("mab,mb->ma", At, w)
            if jacobian:
                Du = np.einsum("mab,mjbc->mjac", At, Dw)
                Du[:, j] = b0[:, j, None, None] * At @ geo.hat(w) @ Jr
                Dat = np.einsum("mab,mjbc->mjac", At, Da)
                Dat[:, j] = b0[:, j, None, None] * At @ geo.hat(a) @ Jr
                hd = geo.hat(dj)[:, None]
                Da = Dat - b1[:, j, None, None, None] * (hd @ Du)
                Da[:, j] += b1[:, j, None, None] * geo.hat(u_) + b2[:, j, None, None] * I3
                Dw = Du
                Dw[:, j] += b1[:, j, None, None] * I3
            a = (np.einsum("mab,mb->ma", At, a) + b1[:, j, None] * np.cross(u_, dj)
                 + b2[:, j, None] * dj)
            w = u_ + b1[:, j, None] * dj
        # suffix products S_j = A_{j+1} ... A_2
        S = np.empty((M, 4, 3, 3))
        S[:, 3] = I3
        for j in range(2, -1, -1):
            S[:, j] = A[:, j] @ S[:, j + 1]
        R = self.control[i] @ S[:, 0]
        if not jacobian:
            return R, w, a
        DR = np.stack([b0[:, j, None, None] * np.swapaxes(S[:, j + 1], 1, 2)
                       @ geo.so3_right_jacobian(b0[:, j, None] * d[:, j]) for j in range(3)], axis=1)
        Jinv_r = geo.so3_left_jacobian_inv(-d)  # d increment / d later control
        Jinv_l = geo.so3_left_jacobian_inv(d)  # minus d increment / d earlier control
        JR = np.zeros((M, 4, 3, 3))
        Jw = np.zeros((M, 4, 3, 3))
        Ja = np.zeros((M, 4, 3, 3))
        JR[:, 0] = np.swapaxes(S[:, 0], 1, 2)
        for j in range(3):
            for out, D in ((JR, DR), (Jw, Dw), (Ja, Da)):
                out[:, j + 1] += D[:, j] @ Jinv_r[:, j]
                out[:, j] -= D[:, j] @ Jinv_l[:, j]
        return R, w, a, i, JR, Jw, Ja

    @classmethod
    def fit(cls, t, R, dt: float, t0: float | None = None, n_segments: int | None = None,
            iters: int = 20) -> "RotationSpline":
        """Least-squares fit ``sum ||Log(R(t_i)^T R_i)||^2`` by Gauss-Newton."""
        t = np.asarray(t, dtype=float)
        R = np.asarray(R, dtype=float)
        t0 = float(t[0]) if t0 is None else float(t0)
        S = _segments_for(t, t0, dt) if n_segments is None else int(n_segments)
        n = S + 3
        centers = t0 + (np.arange(n) - 1.0) * dt
        spline = cls(dt, t0, R[np.abs(t[None, :] - centers[:, None]).argmin(axis=1)].copy())
        rows = np.broadcast_to(np.arange(3 * len(t)).reshape(-1, 1, 3, 1), (len(t), 4, 3, 3))
        cost = np.inf
        for _ in range(iters):
            Rt, _, _, first, JR, _, _ = spline.kinematics(t, jacobian=True)
            r = geo.rot_log(np.swapaxes(Rt, 1, 2) @ R, check=False)
            new = float(np.sum(r**2))
            if new > cost * (1 - 1e-12):
                break
            cost = new
            Jq = -geo.so3_left_jacobian_inv(r)[:, None] @ JR  # (M, 4, 3, 3)
            cols = 3 * (first[:, None, None, None] + np.arange(4)[None, :, None, None]) + np.arange(3)
            J = sp.csr_matrix((Jq.ravel(), (rows.ravel(), np.broadcast_to(cols, Jq.shape).ravel())),
                              shape=(3 * len(t), 3 * n))
            H = (J.T @ J).tocsc() + sp.identity(3 * n, format="csc") * 1e-9
            step = spla.spsolve(H, -(J.T @ r.ravel())).reshape(n, 3)
            spline = spline.with_control(spline.control @ geo.rot_exp(step))
        return spline
