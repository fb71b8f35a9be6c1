"""Scale, gravity and base-trajectory estimation from a scale-free camera track."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.stats import chi2

from . import geometry as geo
from . import spline as spl
from .dynamics import gravity_vector, static_equilibrium

log = logging.getLogger(__name__)


class InitializationError(RuntimeError):
    pass


# ---------------------------------------------------------- perturbation --

@dataclass(frozen=True)
class PerturbConfig:
    """Noise model that turns a metric camera track into a VO-like one.

    ``noise`` is the amplitude ``S``: every pose is composed with an se(3)
    increment whose rotation part has standard deviation ``S`` radians and
    whose translation part has standard deviation ``S`` times the track's
    bounding-box diagonal.  ``scale`` and ``rotation`` (axis-angle) fix the
    hidden similarity; when left as ``None`` they are drawn from the seed.
    ``knot_dt`` is the camera spline spacing, ``"auto"`` picks it from the
    measured noise level.
    """

    noise: float = 0.0
    outlier_ratio: float = 0.0
    outlier_translation: float = 0.2  # m
    outlier_rotation: float = 0.2  # rad
    seed: int = 0
    scale: float | None = None
    rotation: tuple | None = None
    scale_range: tuple = (0.05, 0.6)
    knot_dt: float | str = "auto"

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise amplitude must be non-negative")
        if not 0.0 <= self.outlier_ratio <= 0.5:
            raise ValueError("outlier ratio must lie in [0, 0.5]")
        if self.scale is not None and not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.outlier_translation < 0 or self.outlier_rotation < 0:
            raise ValueError("outlier magnitudes must be non-negative")
        if self.knot_dt != "auto" and not float(self.knot_dt) > 0:
            raise ValueError("knot_dt must be positive or 'auto'")


@dataclass
class VoTrack:
    """Scale-ambiguous camera track with the smoothed samples the estimator uses.

    ``T`` holds the measured poses.  ``T_fit``, ``acc`` (linear, VO world
    frame) and ``alpha`` (angular, body frame) are the fitted spline's
    values at the same times.  ``scale`` and ``rotation`` hold the hidden
    similarity when known (simulation): metric position
    ``= scale * rotation @ t_vo``.
    """

    t: np.ndarray
    T: np.ndarray
    spline: spl.SplineTrajectory
    fit_rms: float
    T_fit: np.ndarray
    acc: np.ndarray
    alpha: np.ndarray
    scale: float | None = None
    rotation: np.ndarray | None = None
    outliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return len(self.t)

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.t[0]), float(self.t[-1])


def _bbox_diagonal(p: np.ndarray) -> float:
    """Bounding-box diagonal in the track's principal axes (independent of the frame)."""
    c = p - p.mean(axis=0)
    axes = np.linalg.svd(c, full_matrices=False)[2]
    return float(np.linalg.norm(np.ptp(c @ axes.T, axis=0)))


INIT_RATE = 30.0  # Hz, samples used by the scale search
FINE_KNOT_DT = 0.05
COARSE_KNOT_DT = 0.2


def auto_knot_dt(t, T) -> float:
    """Camera spline spacing from the track's noise level.

    A fine fit's residual, relative to the bounding-box diagonal, estimates
    the pose noise.  Clean tracks keep the fine spacing needed for the
    mount's oscillation; noisy ones get a coarser, smoothing spline.  The
    spacing interpolates log-linearly between relative noise 1e-3 and 1e-2.
    """
    fit = spl.fit(t, T, 4, FINE_KNOT_DT, robust=True, tol=1e-8)
    r = geo.se3_log(geo.se3_inv(fit.spline.evaluate(t)) @ T)
    sigma = np.median(np.linalg.norm(r[:, 3:], axis=1)) / max(_bbox_diagonal(T[:, :3, 3]), 1e-12)
    sigma = max(sigma, np.median(np.linalg.norm(r[:, :3], axis=1)))
    u = np.clip((np.log10(max(sigma, 1e-12)) + 3.0), 0.0, 1.0)
    return float(FINE_KNOT_DT * (COARSE_KNOT_DT / FINE_KNOT_DT) ** u)


def fit_track(t, T, knot_dt: float | str = "auto", **extra) -> VoTrack:
    """Robust spline fit of a camera track and its derivatives at the sample times."""
    t = np.asarray(t, dtype=float)
    T = np.asarray(T, dtype=float)
    dt = auto_knot_dt(t, T) if knot_dt == "auto" else float(knot_dt)
    fit = spl.fit(t, T, 4, dt, robust=True, tol=1e-8)
    kin = fit.spline.derivatives(t)
    return VoTrack(t, T, fit.spline, fit.rms, kin.T, kin.acc, kin.alpha, **extra)


def exact_track(t, T, acc, alpha, knot_dt: float = FINE_KNOT_DT, **extra) -> VoTrack:
    """Track whose derivatives are known exactly (no smoothing error).

    The spline is still fitted for initialisation; the residual samples use
    the given poses and accelerations.
    """
    t = np.asarray(t, dtype=float)
    T = np.asarray(T, dtype=float)
    fit = spl.fit(t, T, 4, knot_dt)
    return VoTrack(t, T, fit.spline, fit.rms, T.copy(), np.asarray(acc, float),
                   np.asarray(alpha, float), **extra)


def perturb(t, T, cfg: PerturbConfig = PerturbConfig()) -> VoTrack:
    """Noisy, outlier-laden, similarity-transformed copy of a metric track.

    The random draws do not depend on the noise amplitude or outlier ratio,
    so sweeping either with a fixed seed gives nested perturbations.
    Increments are composed on the right (camera frame), which keeps the
    perturbation independent of the world frame.
    """
    t = np.asarray(t, dtype=float)
    T = np.asarray(T, dtype=float)
    M = len(t)
    streams = [np.random.Generator(np.random.Philox(s))
               for s in np.random.SeedSequence([cfg.seed, 17]).spawn(4)]
    noise_rng, outlier_rng, order_rng, global_rng = streams

    n = noise_rng.standard_normal((M, 6))
    order = order_rng.permutation(M)
    dirs = outlier_rng.standard_normal((M, 2, 3))
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    lo, hi = np.log(cfg.scale_range)
    scale_draw = float(np.exp(global_rng.uniform(lo, hi)))
    G_draw = geo.random_rotation(global_rng)

    out = T.copy()
    if cfg.noise > 0:
        n[:, :3] *= cfg.noise
        n[:, 3:] *= cfg.noise * _bbox_diagonal(T[:, :3, 3])
        out = out @ geo.make_pose(geo.rot_exp(n[:, :3]), n[:, 3:])
    n_out = int(round(cfg.outlier_ratio * M))
    idx = np.sort(order[:n_out])
    if n_out:
        bump = geo.make_pose(geo.rot_exp(cfg.outlier_rotation * dirs[idx, 0]),
                             cfg.outlier_translation * dirs[idx, 1])
        out[idx] = out[idx] @ bump

    scale = scale_draw if cfg.scale is None else float(cfg.scale)
    G = G_draw if cfg.rotation is None else geo.rot_exp(np.asarray(cfg.rotation, dtype=float))
    T_vo = geo.make_pose(G.T @ out[:, :3, :3], out[:, :3, 3] @ G / scale)
    return fit_track(t, T_vo, cfg.knot_dt, scale=scale, rotation=G, outliers=idx)


# ----------------------------------------------------------------- state --

@dataclass
class CameraPath:
    """Refined VO camera track: rotation and position splines on one knot grid.

    Parameters are ordered as all rotation increments (right) followed by
    all position shifts, in VO units.
    """

    rot: spl.RotationSpline
    pos: spl.PositionSpline

    @property
    def n_control(self) -> int:
        return len(self.pos.control)

    @property
    def n_params(self) -> int:
        return 6 * self.n_control

    def copy(self) -> "CameraPath":
        return CameraPath(self.rot.with_control(self.rot.control.copy()),
                          self.pos.with_control(self.pos.control.copy()))

    def retract(self, step: np.ndarray) -> "CameraPath":
        n = 3 * self.n_control
        return CameraPath(self.rot.with_control(self.rot.control @ geo.rot_exp(step[:n].reshape(-1, 3))),
                          self.pos.with_control(self.pos.control + step[n:].reshape(-1, 3)))

    def poses(self, t) -> np.ndarray:
        return geo.make_pose(self.rot.evaluate(t), self.pos.evaluate(t))


@dataclass
class EstimatorState:
    """Scale, VO-to-optimisation rotation and base spline.

    ``origin`` is the VO point mapped to the optimisation origin.  The
    solver puts it at the track centroid, so the scale and rotation act
    about the track rather than an arbitrary VO origin.  ``camera``, when
    set, is a refined VO camera path (positions in VO units) that replaces
    the fitted track's positions and accelerations.
    """

    scale: float
    R: np.ndarray
    base: spl.SplineTrajectory
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    camera: CameraPath | None = None

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        self.origin = np.asarray(self.origin, dtype=float)

    @property
    def n_params(self) -> int:
        n = 4 + 6 * len(self.base.control)
        return n if self.camera is None else n + self.camera.n_params

    def copy(self) -> "EstimatorState":
        cam = None if self.camera is None else self.camera.copy()
        return EstimatorState(self.scale, self.R.copy(),
                              self.base.with_control(self.base.control.copy()), self.origin.copy(),
                              cam)

    def retract(self, step: np.ndarray) -> "EstimatorState":
        """Apply ``(d log scale, d rotation (left), knot increments (right), camera shifts)``."""
        nb = 4 + 6 * len(self.base.control)
        scale = self.scale * math.exp(step[0])
        R = geo.rot_exp(step[1:4]) @ self.R
        control = self.base.control @ geo.se3_exp(step[4:nb].reshape(-1, 6))
        cam = None if self.camera is None else self.camera.retract(step[nb:])
        return EstimatorState(scale, R, self.base.with_control(control), self.origin, cam)


def _map_vo(scale: float, R: np.ndarray, T_vo, origin=None) -> np.ndarray:
    T_vo = np.asarray(T_vo, dtype=float)
    t = T_vo[..., :3, 3] if origin is None else T_vo[..., :3, 3] - origin
    return geo.make_pose(R @ T_vo[..., :3, :3], scale * np.einsum("ij,...j->...i", R, t))


def camera_pose_opt(state: EstimatorState, T_vo) -> np.ndarray:
    """Map VO camera poses into the optimisation frame: ``(R R_vo, scale R (t_vo - origin))``."""
    return _map_vo(state.scale, state.R, T_vo, state.origin)


# -------------------------------------------------------------- residual --

@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 200
    tol_cost: float = 1e-10
    tol_grad: float = 1e-8
    huber: bool = True
    huber_k: float = 1.345
    knot_dt: float = 0.5
    rate: float | None = 60.0  # residual samples per second; None uses every VO sample
    mu_init: float = 1e-4
    mu_max: float = 1e8
    gauge_damping: float = 1e-9
    angular_weight: float = 1.0
    vo_units: bool = True  # linear rows in VO acceleration units (divided by the scale)
    camera_knot_dt: float | None = 0.05  # refine the camera path on this spacing; None keeps the fit
    reweight: int = 0  # noise-scale re-estimation rounds when the camera path is refined
    scale_starts: tuple = (1.0, 2.5, 6.0)  # multiples of the initial scale tried with the camera path

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class Samples:
    """VO quantities at the residual times."""

    t: np.ndarray
    T_vo: np.ndarray
    acc: np.ndarray  # VO world frame
    alpha: np.ndarray  # body frame

    def __len__(self) -> int:
        return len(self.t)


def residual_samples(vo: VoTrack, rate: float | None = None, domain=None) -> Samples:
    """VO poses and accelerations at the residual times.

    On a regular grid (``rate`` in Hz) they come from the fitted spline;
    with ``rate=None`` the track's stored smoothed samples are used.  Raw
    measurements never enter, so noise and outliers act only through the fit.
    """
    lo, hi = vo.domain if domain is None else domain
    lo, hi = max(lo, vo.t[0]), min(hi, vo.t[-1])
    if rate is None:
        keep = (vo.t >= lo - 1e-9) & (vo.t <= hi + 1e-9)
        return Samples(vo.t[keep], vo.T_fit[keep], vo.acc[keep], vo.alpha[keep])
    t = np.arange(lo, hi + 1e-9, 1.0 / rate)
    kin = vo.spline.derivatives(t)
    return Samples(t, kin.T, kin.acc, kin.alpha)


def _vo_at(state: EstimatorState, s: Samples):
    """VO poses, linear and angular accelerations at the samples.

    They come from the refined camera path when the state has one.
    """
    if state.camera is None:
        return s.T_vo, s.acc, s.alpha
    R, _, alpha = state.camera.rot.kinematics(s.t)
    return geo.make_pose(R, state.camera.pos.evaluate(s.t)), state.camera.pos.evaluate(s.t, 2), alpha


def _residual_parts(state: EstimatorState, s: Samples, net, g):
    T_vo, acc, alpha = _vo_at(state, s)
    Tc = camera_pose_opt(state, T_vo)
    Tb = state.base.evaluate(s.t)
    if Tb.ndim == 2:
        Tb = Tb[None]
    rel = geo.se3_inv(Tb) @ Tc
    x = geo.se3_log(rel)
    Rc = Tc[:, :3, :3]
    return Tc, Tb, x, Rc, acc, alpha


def residual(state: EstimatorState, s: Samples, net, g=None) -> np.ndarray:
    """Per-sample 6-vector: predicted minus observed specific acceleration.

    Linear rows, world frame: ``R_c N_lin(x) + g - scale * R a_vo``.
    Angular rows, world frame: ``R_c (N_ang(x) - alpha_vo)``; the angular
    acceleration is scale free and is compared in the camera's own axes.
    """
    g = gravity_vector() if g is None else np.asarray(g, dtype=float)
    _, _, x, Rc, acc, alpha = _residual_parts(state, s, net, g)
    n = net.forward(x)
    lin = np.einsum("mij,mj->mi", Rc, n[:, :3]) + g - state.scale * acc @ state.R.T
    ang = np.einsum("mij,mj->mi", Rc, n[:, 3:] - alpha)
    return np.concatenate([lin, ang], axis=1)


@dataclass
class _Linearization:
    """Residuals with their Jacobian in blocks.

    ``glob`` (M, 6, 4) holds the scale and rotation columns, ``base`` (M, k,
    6, 6) the blocks of the ``k`` base controls from ``base_first``.  With a
    camera path, ``cam_rot`` and ``cam_pos`` (M, 4, 6, 3) hold those of its
    rotation and position controls from ``cam_first``.
    """

    r: np.ndarray
    glob: np.ndarray
    base_first: np.ndarray
    base: np.ndarray
    cam_first: np.ndarray | None = None
    cam_rot: np.ndarray | None = None
    cam_pos: np.ndarray | None = None

    def sparse(self, n_base: int, n_params: int) -> sp.csr_matrix:
        """Jacobian as a (6 M, n_params) sparse matrix; ``n_base`` counts base controls."""
        M = len(self.r)
        row = np.arange(6 * M).reshape(M, 6)
        rows, cols, vals = [], [], []

        def add(first, blocks, offset, width):
            k = blocks.shape[1]
            c = offset + width * (first[:, None, None] + np.arange(k)[None, :, None]) + np.arange(width)
            rows.append(np.broadcast_to(row[:, None, :, None], blocks.shape).ravel())
            cols.append(np.broadcast_to(c[:, :, None, :], blocks.shape).ravel())
            vals.append(blocks.ravel())

        add(np.zeros(M, dtype=int), self.glob[:, None], 0, 4)
        add(self.base_first, self.base, 4, 6)
        if self.cam_rot is not None:
            off = 4 + 6 * n_base
            n_cam = (n_params - off) // 6
            add(self.cam_first, self.cam_rot, off, 3)
            add(self.cam_first, self.cam_pos, off + 3 * n_cam, 3)
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(6 * M, n_params))

    def scaled(self, norm: np.ndarray, scale: float | None = None) -> "_Linearization":
        """Divide all rows by ``norm`` and, given ``scale``, the linear rows by it.

        Dividing by the scale adds ``-r`` to the log-scale column.
        """
        f = np.r_[np.full(3, 1.0 if scale is None else 1.0 / scale), np.ones(3)] / norm
        r = self.r * f
        glob = self.glob * f[None, :, None]
        if scale is not None:
            glob[:, :3, 0] -= r[:, :3]

        def blk(b):
            return None if b is None else b * f[None, None, :, None]
        return _Linearization(r, glob, self.base_first, blk(self.base), self.cam_first,
                              blk(self.cam_rot), blk(self.cam_pos))


def _linearize(state: EstimatorState, s: Samples, net, g) -> _Linearization:
    Tc, Tb, x, Rc, acc, alpha = _residual_parts(state, s, net, g)
    n, Jn = net.forward(x), net.input_jacobian(x)
    M = len(s)
    a_w = state.scale * acc @ state.R.T
    lin_pred = np.einsum("mij,mj->mi", Rc, n[:, :3])
    ang_pred = np.einsum("mij,mj->mi", Rc, n[:, 3:] - alpha)
    r = np.concatenate([lin_pred + g - a_w, ang_pred], axis=1)

    # d r / d x through the network
    RcJn = np.concatenate([Rc @ Jn[:, :3], Rc @ Jn[:, 3:]], axis=1)  # (M,6,6)
    Jl_inv = geo.se3_left_jacobian_inv(x)
    Ad_binv = geo.se3_adjoint(geo.se3_inv(Tb))
    dr_deta = RcJn @ (Jl_inv @ Ad_binv)  # left perturbation of the camera pose

    glob = np.zeros((M, 6, 4))
    # log-scale: camera translation grows, acceleration term scales
    eta = np.zeros((M, 6))
    eta[:, 3:] = Tc[:, :3, 3]
    glob[:, :, 0] = np.einsum("mij,mj->mi", dr_deta, eta)
    glob[:, :3, 0] -= a_w
    # rotation (left): camera pose and acceleration both rotate
    glob[:, :, 1:4] = dr_deta[:, :, :3]
    glob[:, :3, 1:4] += -geo.hat(lin_pred) + geo.hat(a_w)
    glob[:, 3:, 1:4] += -geo.hat(ang_pred)
    # base control poses
    _, first, Jsp = state.base.pose_jacobian(s.t)
    D = -(RcJn @ Jl_inv)  # (M,6,6) w.r.t. right perturbation of the base pose
    base = np.einsum("mab,mkbc->mkac", D, Jsp)  # (M,k,6,6)
    out = _Linearization(r, glob, np.asarray(first), base)
    if state.camera is not None:
        cam = state.camera
        # rotation controls: right perturbation of the camera attitude and its angular acceleration
        _, _, _, i0, JR, _, Ja = cam.rot.kinematics(s.t, jacobian=True)
        G = (RcJn @ geo.se3_right_jacobian_inv(x))[:, :, :3]
        G[:, :3] -= Rc @ geo.hat(n[:, :3])
        G[:, 3:] -= Rc @ geo.hat(n[:, 3:] - alpha)
        rot = G[:, None] @ JR
        rot[:, :, 3:] -= Rc[:, None] @ Ja
        # position controls move the camera translation and its acceleration
        _, B0 = cam.pos.basis(s.t)
        _, B2 = cam.pos.basis(s.t, 2)
        sR = state.scale * state.R
        pos = B0[:, :, None, None] * (dr_deta[:, :, 3:] @ sR)[:, None]
        pos[:, :, :3, :] -= B2[:, :, None, None] * sR
        out.cam_first, out.cam_rot, out.cam_pos = i0, rot, pos
    return out


def residual_jacobian(state: EstimatorState, s: Samples, net, g=None):
    """Residuals and their Jacobian in the :meth:`EstimatorState.retract` chart.

    Returns ``(r (M, 6), J (M, 6, n_params))``.
    """
    g = gravity_vector() if g is None else np.asarray(g, dtype=float)
    lin = _linearize(state, s, net, g)
    J = lin.sparse(len(state.base.control), state.n_params).toarray()
    return lin.r, J.reshape(len(s), 6, -1)


# ---------------------------------------------------------- initialisation --

class _SplineProjector:
    """Residual of a linear least-squares cubic B-spline fit on fixed sample times."""

    def __init__(self, t: np.ndarray, knot_dt: float):
        t = np.asarray(t, dtype=float)
        n_seg = max(1, int(math.ceil((t[-1] - t[0]) / knot_dt - 1e-9)))
        s = (t - t[0]) / knot_dt
        i = np.clip(np.floor(s).astype(int), 0, n_seg - 1)
        B = spl.blending_matrix(4).basis(s - i)
        A = np.zeros((len(t), n_seg + 3))
        for j in range(4):
            A[np.arange(len(t)), i + j] = B[:, j]
        self.Q = np.linalg.qr(A)[0]

    def residual(self, y: np.ndarray) -> np.ndarray:
        return y - self.Q @ (self.Q.T @ y)


def _roughness(T: np.ndarray, proj: _SplineProjector, length: float) -> float:
    """Mean squared misfit of a pose track to a smooth spline, in metres.

    Rotations use rotation vectors relative to the track's first sample and
    are weighted by ``length``.
    """
    rv = geo.rot_log(T[0, :3, :3].T @ T[:, :3, :3], check=False)
    y = np.concatenate([T[:, :3, 3], length * rv], axis=1)
    return float(np.mean(np.sum(proj.residual(y) ** 2, axis=1)))


def invert_net(net, y: np.ndarray, x0: np.ndarray, iters: int = 30, tol: float = 1e-10):
    """Solve ``net(x) = y`` sample-wise by damped Newton from ``x0``."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    x = np.broadcast_to(np.asarray(x0, dtype=float), y.shape).copy()
    for _ in range(iters):
        f, Jf = net.forward_jacobian(x)
        r = f - y
        if np.abs(r).max() < tol:
            break
        A = np.swapaxes(Jf, 1, 2) @ Jf + 1e-9 * np.eye(x.shape[1])
        step = -np.linalg.solve(A, np.einsum("mji,mj->mi", Jf, r)[..., None])[..., 0]
        # keep steps modest: the net is only trustworthy near its data
        size = np.linalg.norm(step, axis=1, keepdims=True)
        x = x + step * np.minimum(1.0, 0.05 / np.maximum(size, 1e-300))
    return x


def equilibrium_input(net, g=None, x0=None, iters: int = 100) -> np.ndarray:
    """Relative-pose log at which the net balances gravity along base ``-y``."""
    gmag = np.linalg.norm(gravity_vector() if g is None else g)
    x = np.zeros(6) if x0 is None else np.asarray(x0, float).copy()
    up = np.array([0.0, gmag, 0.0])
    for _ in range(iters):
        R = geo.rot_exp(x[:3])
        f, Jf = net.forward_jacobian(x[None])
        r = f[0] - np.r_[R.T @ up, 0.0, 0.0, 0.0]
        # the target rotates with x; a finite-difference correction is enough here
        Jt = np.zeros((6, 6))
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1e-7
            Jt[:3, i] = (geo.rot_exp(x[:3] + e).T @ up - R.T @ up) / 1e-7
        step = -np.linalg.lstsq(Jf[0] - Jt, r, rcond=None)[0]
        size = np.linalg.norm(step)
        x = x + step * min(1.0, 0.05 / max(size, 1e-300))
        if size < 1e-12:
            break
    return x


@dataclass
class InitReport:
    grid: np.ndarray
    cost: np.ndarray
    x_eq: np.ndarray


def _search_scale(f, grid):
    costs = np.array([f(ll) for ll in grid])
    best = int(np.argmin(costs))
    # golden-section refinement between the neighbours of the best grid point
    lo, hi = grid[max(best - 1, 0)], grid[min(best + 1, len(grid) - 1)]
    phi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - phi * (b - a), a + phi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(15):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = f(d)
    return math.exp(0.5 * (a + b)), costs


def initialize(vo: VoTrack, net, g=None, params=None, cfg: SolverConfig = SolverConfig(),
               *, rest: geo.Pose | None = None, grid: np.ndarray | None = None,
               length: float = 0.1, report: bool = False, scale: float | None = None):
    """Starting scale, rotation and base knots.

    Gravity in VO axes follows from the camera orientations and the mount's
    gravity-loaded equilibrium (a bounded motion has near-zero mean
    acceleration).  For every scale on a log grid the network is inverted
    sample by sample to find the relative pose explaining the observed
    specific acceleration; the implied base track is smoothest at the right
    scale.  Base knots are then fitted to that base track.  A given ``scale``
    skips the search.
    """
    g = gravity_vector() if g is None else np.asarray(g, dtype=float)
    s = residual_samples(vo, INIT_RATE)
    acc_var = float(np.sum(np.var(s.acc, axis=0)))
    span = float(np.linalg.norm(np.ptp(vo.T[:, :3, 3], axis=0)))
    if not np.isfinite(acc_var) or span <= 0 or acc_var < 1e-10 * span**2:
        raise InitializationError("camera track is (nearly) static; record richer motion "
                                  "so that the mount deflects")
    if rest is None and params is not None:
        rest = static_equilibrium(params, np.array([0.0, -np.linalg.norm(g), 0.0]))
    x_eq = equilibrium_input(net, g, None if rest is None else rest.log())

    Rc = s.T_vo[:, :3, :3]
    n_eq = net.forward(x_eq[None])[0]
    g_vo = -np.mean(Rc @ n_eq[:3], axis=0)
    R0 = geo.rotation_between(g_vo, g)

    proj = _SplineProjector(s.t, cfg.knot_dt)
    grid = np.linspace(-4.0, 2.0, 31) if grid is None else np.asarray(grid, float)

    warm = {"x": x_eq}
    origin = vo.T[:, :3, 3].mean(axis=0)

    def implied_base(lam, R):
        Tc = _map_vo(lam, R, s.T_vo, origin)
        f = np.einsum("mji,mj->mi", Tc[:, :3, :3], lam * s.acc @ R.T - g)
        x = invert_net(net, np.concatenate([f, s.alpha], axis=1), warm["x"])
        warm["x"] = x
        return Tc @ geo.se3_inv(geo.se3_exp(x))

    def f(ll):
        return _roughness(implied_base(math.exp(ll), R0), proj, length)

    if scale is not None:
        lam, costs = float(scale), np.full(len(grid), np.nan)
    else:
        lam, costs = _search_scale(f, grid)

    base_T = implied_base(lam, R0)
    n_seg = max(1, int(math.ceil((vo.t[-1] - vo.t[0]) / cfg.knot_dt - 1e-9)))
    # the end controls are weakly observed; a unit prior keeps them near the track
    fit = spl.fit(s.t, base_T, 4, cfg.knot_dt, t0=float(vo.t[0]), n_segments=n_seg,
                  robust=True, prior=1.0)
    state = EstimatorState(lam, R0, fit.spline, origin)
    if report:
        return state, InitReport(grid, costs, x_eq)
    return state


# ----------------------------------------------------------------- solve --

@dataclass
class Solution:
    state: EstimatorState
    cost: list
    converged: bool
    iterations: int
    reason: str
    residual_rms: np.ndarray  # linear, angular
    scales: np.ndarray  # robust normalisers for linear and angular rows

    @property
    def final_cost(self) -> float:
        return float(self.cost[-1])


def _huber(a: np.ndarray, k: float):
    """Huber cost and IRLS weights of non-negative residual magnitudes."""
    quad = a <= k
    cost = np.where(quad, 0.5 * a**2, k * a - 0.5 * k * k)
    w = np.where(quad, 1.0, k / np.maximum(a, 1e-300))
    return cost, w


# median of a chi distribution with three degrees of freedom
_CHI3_MEDIAN = math.sqrt(chi2.ppf(0.5, 3))


def robust_scales(r: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Per-component noise scale of the linear and angular blocks.

    Estimated from the median 3-vector norm, so it does not depend on the
    axes the residuals are expressed in.
    """
    return np.array([max(float(np.median(np.linalg.norm(r[:, :3], axis=1))) / _CHI3_MEDIAN, floor),
                     max(float(np.median(np.linalg.norm(r[:, 3:], axis=1))) / _CHI3_MEDIAN, floor)])


class _PoseRows:
    """Raw VO poses against the refined camera path, rotation then position (VO units)."""

    def __init__(self, vo: VoTrack, path: CameraPath):
        self.t = vo.t
        self.R = vo.T[:, :3, :3]
        self.p = vo.T[:, :3, 3]
        self.A = sp.kron(path.pos.design(vo.t), sp.identity(3), format="csr")
        self.floor = np.array([1e-9, 1e-9 * max(_bbox_diagonal(self.p), 1e-12)])
        M, n = len(vo.t), path.n_control
        self.rows = np.broadcast_to(np.arange(6 * M).reshape(M, 6)[:, None, :3, None], (M, 4, 3, 3))
        pr = (np.arange(M)[:, None] * 6 + 3 + np.arange(3)).ravel()
        A = self.A.tocoo()
        self.pos_part = (pr[A.row], A.col + 3 * n, A.data)

    def residual(self, path: CameraPath) -> np.ndarray:
        R = path.rot.evaluate(self.t)
        rot = geo.rot_log(np.swapaxes(R, 1, 2) @ self.R, check=False)
        return np.concatenate([rot, path.pos.evaluate(self.t) - self.p], axis=1)

    def scale(self, path: CameraPath) -> np.ndarray:
        r = self.residual(path)
        med = [np.median(np.linalg.norm(r[:, :3], axis=1)), np.median(np.linalg.norm(r[:, 3:], axis=1))]
        return np.maximum(np.array(med) / _CHI3_MEDIAN, self.floor)

    def jacobian(self, path: CameraPath, n_params: int, r: np.ndarray | None = None) -> sp.csr_matrix:
        """Sparse (6 M, n_params) Jacobian; camera columns sit at the end."""
        R, _, _, first, JR, _, _ = path.rot.kinematics(self.t, jacobian=True)
        if r is None:
            r = self.residual(path)
        Jq = -geo.so3_left_jacobian_inv(r[:, :3])[:, None] @ JR  # (M, 4, 3, 3)
        off = n_params - path.n_params
        cols = off + 3 * (first[:, None, None, None] + np.arange(4)[None, :, None, None]) + np.arange(3)
        pr, pc, pv = self.pos_part
        rows = np.concatenate([self.rows.ravel(), pr])
        cols = np.concatenate([np.broadcast_to(cols, Jq.shape).ravel(), pc + off])
        return sp.csr_matrix((np.concatenate([Jq.ravel(), pv]), (rows, cols)),
                             shape=(6 * len(self.t), n_params))


def camera_path(vo: VoTrack, knot_dt: float) -> CameraPath:
    """Camera track on fine rotation and position splines through the smoothed VO fit."""
    t0 = float(vo.t[0])
    n = max(1, int(math.ceil((vo.t[-1] - t0) / knot_dt - 1e-9)))
    return CameraPath(spl.RotationSpline.fit(vo.t, vo.T_fit[:, :3, :3], knot_dt, t0, n),
                      spl.PositionSpline.fit(vo.t, vo.T_fit[:, :3, 3], knot_dt, t0, n))


def solve(vo: VoTrack, net, g=None, init: EstimatorState | None = None,
          cfg: SolverConfig = SolverConfig(), *, params=None, samples: Samples | None = None,
          scales: np.ndarray | None = None) -> Solution:
    """Levenberg-Marquardt over log scale, the VO rotation and the base knots.

    Residual rows are normalised by robust noise scales (linear and angular
    separately) and, with ``cfg.vo_units``, the linear rows are expressed in
    VO units.  The Huber loss acts on each 3-vector block, with threshold
    ``cfg.huber_k`` per component, so the cost is invariant to rotations of
    the optimisation frame.

    With ``cfg.camera_knot_dt`` the camera positions become unknowns too: a
    fine cubic path tied to the raw VO positions by a second set of robust
    rows.  The dynamics then smooth the track instead of a fixed spline, so
    neither pose noise nor smoothing of the mount's oscillation biases the
    scale.  The noise scales are re-estimated ``cfg.reweight`` times.
    """
    g = gravity_vector() if g is None else np.asarray(g, dtype=float)
    if init is None:
        init = initialize(vo, net, g, params, cfg)
    state = init.copy()
    if samples is None:
        if state.camera is None and cfg.camera_knot_dt is not None and cfg.rate is not None:
            state.camera = camera_path(vo, cfg.camera_knot_dt)
        s = residual_samples(vo, cfg.rate, init.base.domain)
    else:
        s = samples
    pose = None if state.camera is None else _PoseRows(vo, state.camera)
    n_base = len(state.base.control)
    weights = np.repeat([1.0, max(cfg.angular_weight, 1e-12)], 3)

    def divisor(st):
        return st.scale if cfg.vo_units else None

    def dynamics(st):
        r = residual(st, s, net, g)
        if cfg.vo_units:
            r[:, :3] /= st.scale
        return r

    def system(st, sc, ps, jac):
        norm = np.repeat(sc, 3) / weights
        if jac:
            lin = _linearize(st, s, net, g).scaled(norm, divisor(st))
            z, J = lin.r.ravel(), lin.sparse(n_base, st.n_params)
        else:
            z, J = (dynamics(st) / norm).ravel(), None
        if pose is not None:
            pn = np.repeat(ps, 3)
            rp = pose.residual(st.camera)
            z = np.concatenate([z, (rp / pn).ravel()])
            if jac:
                Jp = sp.diags(np.tile(1.0 / pn, len(rp))) @ pose.jacobian(st.camera, st.n_params, rp)
                J = sp.vstack([J, Jp], format="csr")
        return z, J

    sc = robust_scales(dynamics(state)) if scales is None else np.asarray(scales, float)
    ps = None if pose is None else pose.scale(state.camera)
    rounds = cfg.reweight if pose is not None and scales is None else 0
    starts = [state]
    if pose is not None and len(cfg.scale_starts) > 1:
        # noise biases the initial scale low and the landscape above it is flat,
        # so larger starts are solved too and the lowest cost under common scales wins
        for ratio in cfg.scale_starts[1:]:
            st = initialize(vo, net, g, params, cfg, scale=init.scale * ratio)
            st.camera = state.camera.copy()
            starts.append(st)
    total = 0
    best = None
    for st in starts:
        run = _levenberg_marquardt(st, lambda x, jac: system(x, sc, ps, jac), cfg)
        total += run[4]
        log.info("start at scale %.4g: cost %.6g, scale %.4g", st.scale, run[1][-1], run[0].scale)
        if best is None or run[1][-1] < best[1][-1]:
            best = run
    state, costs, converged, reason, _ = best
    for _ in range(rounds):
        sc_new, ps_new = robust_scales(dynamics(state)), pose.scale(state.camera)
        change = np.abs(np.log(np.r_[sc_new / sc, ps_new / ps])).max()
        sc, ps = sc_new, ps_new
        if change < math.log(1.1):
            break
        state, costs, converged, reason, it = _levenberg_marquardt(
            state, lambda x, jac: system(x, sc, ps, jac), cfg)
        total += it
    r = residual(state, s, net, g)
    rms = np.sqrt([np.mean(r[:, :3] ** 2), np.mean(r[:, 3:] ** 2)])
    if not converged:
        log.warning("solver stopped (%s) after %d iterations", reason, total)
    return Solution(state, costs, converged, total, reason, rms, sc)


def _levenberg_marquardt(state: EstimatorState, system, cfg: SolverConfig):
    """Damped Gauss-Newton on ``system(state, jac) -> (z, J)``; returns the final round."""
    hk = cfg.huber_k * math.sqrt(3.0)

    def evaluate(z):
        if cfg.huber:
            c, wb = _huber(np.linalg.norm(z.reshape(-1, 3), axis=1), hk)
            return float(c.sum()), np.repeat(wb, 3)
        return float(0.5 * np.sum(z**2)), np.ones(z.size)

    z, J = system(state, True)
    cost, w = evaluate(z)
    costs = [cost]
    mu = cfg.mu_init
    converged, reason = False, "max_iters"
    it = 0
    for it in range(1, cfg.max_iters + 1):
        Jw = sp.diags(w) @ J
        H = (J.T @ Jw).tocsc()
        grad = Jw.T @ z
        if np.linalg.norm(grad, np.inf) < cfg.tol_grad:
            converged, reason = True, "gradient"
            break
        diag = H.diagonal().copy()
        # the rotation block is damped isotropically so steps do not depend on the frame
        diag[1:4] = diag[1:4].mean()
        accepted = False
        while mu <= cfg.mu_max:
            A = H + sp.diags(mu * diag + cfg.gauge_damping + 1e-12 * diag.max(), format="csc")
            step = spla.spsolve(A, -grad)
            if not np.all(np.isfinite(step)):
                mu *= 10.0
                continue
            trial = state.retract(step)
            z_new, _ = system(trial, False)
            new_cost, w_new = evaluate(z_new)
            if np.isfinite(new_cost) and new_cost <= cost:
                accepted = True
                break
            mu *= 10.0
        if not accepted:
            reason = "damping"
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        state, cost, w = trial, new_cost, w_new
        costs.append(cost)
        mu = max(mu / 3.0, 1e-12)
        if rel < cfg.tol_cost:
            converged, reason = True, "cost"
            break
        z, J = system(state, True)
    return state, costs, converged, reason, it
