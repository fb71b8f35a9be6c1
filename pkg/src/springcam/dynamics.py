"""Spring-mounted camera physics and base motion patterns.

The camera is a rigid body tied to a moving base by a Duffing spring
(translation) and a linear torsion spring (rotation).  Forces are expressed
in the base frame, torques in the camera body frame; gravity acts in the
world frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry as geo
from .spline import Kinematics, SplineTrajectory

GRAVITY = 9.81


def gravity_vector(direction=(0.0, -1.0, 0.0), magnitude: float = GRAVITY) -> np.ndarray:
    d = np.asarray(direction, dtype=float)
    n = np.linalg.norm(d)
    if not n > 0 or not np.all(np.isfinite(d)):
        raise ValueError("gravity direction must be a finite non-zero vector")
    return magnitude * d / n


class SimulationDivergence(RuntimeError):
    def __init__(self, time: float, stretch: float):
        super().__init__(f"spring diverged at t={time:.4f} s (deflection {stretch:.3g} m)")
        self.time = time


@dataclass(frozen=True)
class SpringParams:
    """Mount parameters.

    The translational spring acts on an attachment point ``attach`` (camera
    body frame) rather than on the centre of mass, so spring forces also
    tilt the camera like a pendulum bob.
    """

    mass: float = 0.25
    k1: float = 40.0
    k3: float = 2000.0
    damping: float = 0.05
    k_theta: float = 0.05
    c_theta: float = 1e-4
    inertia: tuple = (1e-3, 1e-3, 1e-3)
    rest_translation: tuple = (0.12, -0.12, 0.0)
    rest_rotation: tuple = (0.0, 0.0, 0.0)  # axis-angle
    attach: tuple = (0.0, 0.05, 0.0)

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if not self.k1 > 0:
            raise ValueError("k1 must be positive")
        if self.damping < 0 or self.c_theta < 0 or self.k3 < 0 or self.k_theta < 0:
            raise ValueError("stiffness and damping coefficients must be non-negative")
        if len(self.inertia) != 3 or min(self.inertia) <= 0:
            raise ValueError("inertia must be three positive values")

    @property
    def rest(self) -> geo.Pose:
        """Camera pose in the base frame at rest without gravity."""
        return geo.Pose(geo.rot_exp(np.asarray(self.rest_rotation, float)),
                        np.asarray(self.rest_translation, float))

    @property
    def rest_anchor(self) -> np.ndarray:
        """Attachment point position in the base frame at rest."""
        rest = self.rest
        return rest.t + rest.R @ np.asarray(self.attach, float)

    def undamped(self) -> "SpringParams":
        return replace(self, damping=0.0, c_theta=0.0)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SpringParams":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _rotation_error(params: SpringParams, R_rel: np.ndarray) -> np.ndarray:
    R0 = geo.rot_exp(np.asarray(params.rest_rotation, float))
    return geo.rot_log(np.swapaxes(R0, -1, -2) @ R_rel, check=False)


def deflection(params: SpringParams, rel) -> np.ndarray:
    """Attachment-point displacement towards rest, base frame."""
    T = rel.matrix if isinstance(rel, geo.Pose) else np.asarray(rel, dtype=float)
    attach = np.asarray(params.attach, float)
    current = T[..., :3, 3] + T[..., :3, :3] @ attach
    return params.rest_anchor - current


def spring_wrench(params: SpringParams, rel, rel_rate=None) -> np.ndarray:
    """Force (base frame) and torque (camera frame) the mount applies to the camera.

    ``rel`` is the camera pose in the base frame (a :class:`Pose` or 4x4
    array, batched allowed).  ``rel_rate`` is ``(omega_rel, v_rel)``: the
    camera's angular velocity relative to the base in camera axes and the
    time derivative of the relative translation in base axes.

    The deflection is measured towards the rest pose, ``dx = rest - current``
    at the attachment point, so ``k1*dx + k3*dx**3 + c*d(dx)/dt`` is the
    restoring force itself.  The torque is the moment of that force about
    the centre of mass plus the torsion spring ``k_theta*dtheta - c_theta*omega_rel``.
    """
    T = rel.matrix if isinstance(rel, geo.Pose) else np.asarray(rel, dtype=float)
    R_rel = T[..., :3, :3]
    attach = np.asarray(params.attach, float)
    dx = deflection(params, T)
    dtheta = -_rotation_error(params, R_rel)
    force = params.k1 * dx + params.k3 * dx**3
    torque = params.k_theta * dtheta
    if rel_rate is not None:
        rate = np.asarray(rel_rate, dtype=float)
        w_rel, v_rel = rate[..., :3], rate[..., 3:]
        ddx = -(v_rel + np.einsum("...ij,...j->...i", R_rel, np.cross(w_rel, attach)))
        force = force + params.damping * ddx
        torque = torque - params.c_theta * w_rel
    force_cam = np.einsum("...ji,...j->...i", R_rel, force)
    torque = torque + np.cross(attach, force_cam)
    return np.concatenate([force, torque], axis=-1)


def static_equilibrium(params: SpringParams, g_base: np.ndarray) -> geo.Pose:
    """Relative pose where the mount balances gravity ``g_base`` (base frame).

    Solved by Newton iteration on the undamped wrench balance.
    """
    g_base = np.asarray(g_base, dtype=float)
    undamped = params.undamped()
    x = params.rest.log()

    def balance(xi):
        rel = geo.se3_exp(xi)
        w = spring_wrench(undamped, rel)
        return np.concatenate([rel[:3, :3] @ (rel[:3, :3].T @ w[:3]) + params.mass * g_base,
                               w[3:]])

    for _ in range(100):
        r = balance(x)
        if np.abs(r).max() < 1e-13:
            break
        J = np.empty((6, 6))
        for i in range(6):
            e = np.zeros(6)
            e[i] = 1e-7
            J[:, i] = (balance(x + e) - balance(x - e)) / 2e-7
        step = np.linalg.solve(J, -r)
        x = x + step
        if np.abs(step).max() < 1e-15:
            break
    return geo.Pose.exp(x)


@dataclass(frozen=True)
class CameraState:
    T: np.ndarray  # world pose, 4x4
    vel: np.ndarray  # world linear velocity
    omega: np.ndarray  # body angular velocity


@dataclass(frozen=True)
class SimulatedSequence:
    rate: float
    base: Kinematics
    camera: Kinematics
    gravity: np.ndarray
    params: SpringParams = field(default_factory=SpringParams)
    base_spline: SplineTrajectory | None = field(default=None, compare=False)
    rel_rate: np.ndarray | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.camera)

    @property
    def t(self) -> np.ndarray:
        return self.camera.t

    def relative_poses(self) -> np.ndarray:
        return geo.se3_inv(self.base.T) @ self.camera.T

    def transformed(self, G: geo.Pose) -> "SimulatedSequence":
        """The same motion expressed in a world frame moved by ``G``."""
        def move(k: Kinematics) -> Kinematics:
            return Kinematics(k.t, G.matrix @ k.T, k.vel @ G.R.T, k.acc @ G.R.T,
                              k.omega, k.alpha)
        return replace(self, base=move(self.base), camera=move(self.camera),
                       gravity=G.R @ self.gravity, base_spline=None)


def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


def _hat(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def _small_log(R):
    """Rotation log for the integrator; relative rotations stay far from pi."""
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = math.sqrt(w @ w)
    c = 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)
    if c < 0:
        return geo.rot_log(R, check=False)
    if s < 1e-8:
        return w
    return w * (math.atan2(s, c) / s)


def simulate(base: SplineTrajectory, params: SpringParams = SpringParams(),
             g=None, rate: float = 360.0, duration: float = 30.0,
             initial: CameraState | None = None, t_start: float | None = None
             ) -> SimulatedSequence:
    """Integrate the camera with fixed-step RK4 at ``rate`` Hz.

    Samples are taken at ``t_start + j / rate`` for ``j < round(duration*rate)``.
    The recorded camera accelerations are the ODE right-hand side at each
    sample, not differences of positions.
    """
    if rate < 100:
        raise ValueError("simulation rate must be at least 100 Hz")
    g = gravity_vector() if g is None else np.asarray(g, dtype=float)
    t_start = base.t0 if t_start is None else float(t_start)
    n = int(round(duration * rate))
    h = 1.0 / rate
    lo, hi = base.domain
    if t_start < lo - 1e-9 or t_start + (n - 1) * h > hi + 1e-9:
        raise ValueError(f"base spline domain [{lo}, {hi}] does not cover the simulation")

    half = base.derivatives(t_start + 0.5 * h * np.arange(2 * n - 1))
    bT, bvel = half.T, half.vel
    bomega = half.omega
    m = params.mass
    inv_I = 1.0 / np.asarray(params.inertia, float)
    I = np.asarray(params.inertia, float)
    rest_len = max(np.linalg.norm(params.rest_translation), 0.1)

    if initial is None:
        Tb0 = bT[0]
        eq = static_equilibrium(params, Tb0[:3, :3].T @ g)
        Tc0 = Tb0 @ eq.matrix
        lever = Tb0[:3, :3] @ np.cross(bomega[0], eq.t)
        initial = CameraState(Tc0, bvel[0] + lever, eq.R.T @ bomega[0])

    bR, bp = bT[:, :3, :3].copy(), bT[:, :3, 3].copy()
    attach = np.asarray(params.attach, float)
    anchor = params.rest_anchor
    R0t = params.rest.R.T
    kl, kc, c, kt, ct = params.k1, params.k3, params.damping, params.k_theta, params.c_theta

    def rhs(j, p, v, R, w):
        Rb = bR[j]
        p_rel = Rb.T @ (p - bp[j])
        R_rel = Rb.T @ R
        v_rel = Rb.T @ (v - bvel[j]) - _cross(bomega[j], p_rel)
        w_rel = w - R_rel.T @ bomega[j]
        dx = anchor - p_rel - R_rel @ attach
        ddx = -(v_rel + R_rel @ _cross(w_rel, attach))
        force = kl * dx + kc * dx**3 + c * ddx
        torque = (_cross(attach, R_rel.T @ force) - kt * _small_log(R0t @ R_rel)
                  - ct * w_rel)
        a = Rb @ force / m + g
        dw = inv_I * (torque - _cross(w, I * w))
        return v, a, R @ _hat(w), dw, dx, w_rel, v_rel

    p = initial.T[:3, 3].copy()
    R = initial.T[:3, :3].copy()
    v = np.asarray(initial.vel, float).copy()
    w = np.asarray(initial.omega, float).copy()
    cam_T = np.empty((n, 4, 4))
    cam = np.empty((n, 4, 3))  # vel, acc, omega, alpha
    rel_rates = np.empty((n, 6))
    t = t_start + h * np.arange(n)
    for i in range(n):
        j = 2 * i
        k1 = rhs(j, p, v, R, w)
        stretch = np.linalg.norm(k1[4])
        if not np.isfinite(stretch) or stretch > 10 * rest_len:
            raise SimulationDivergence(float(t[i]), float(stretch))
        cam_T[i] = geo.make_pose(R, p)
        cam[i] = (v, k1[1], w, k1[3])
        rel_rates[i, :3] = k1[5]
        rel_rates[i, 3:] = k1[6]
        if i == n - 1:
            break
        k2 = rhs(j + 1, p + 0.5 * h * k1[0], v + 0.5 * h * k1[1],
                 R + 0.5 * h * k1[2], w + 0.5 * h * k1[3])
        k3 = rhs(j + 1, p + 0.5 * h * k2[0], v + 0.5 * h * k2[1],
                 R + 0.5 * h * k2[2], w + 0.5 * h * k2[3])
        k4 = rhs(j + 2, p + h * k3[0], v + h * k3[1], R + h * k3[2], w + h * k3[3])
        p = p + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        v = v + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        R = R + h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        w = w + h / 6 * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
        R = 0.5 * R @ (3.0 * np.eye(3) - R.T @ R)  # re-orthonormalise

    camera = Kinematics(t, cam_T, cam[:, 0], cam[:, 1], cam[:, 2], cam[:, 3])
    base_k = half[::2]
    return SimulatedSequence(rate, base_k, camera, g, params, base, rel_rates)


def mechanical_energy(seq: SimulatedSequence) -> np.ndarray:
    """Kinetic + spring + gravitational energy of the camera (static base only)."""
    p = seq.params
    rel = seq.relative_poses()
    dx = deflection(p, rel)
    dth = _rotation_error(p, rel[:, :3, :3])
    kin = 0.5 * p.mass * np.sum(seq.camera.vel**2, axis=1)
    rot = 0.5 * np.sum(np.asarray(p.inertia) * seq.camera.omega**2, axis=1)
    spring = (0.5 * p.k1 * np.sum(dx**2, axis=1) + 0.25 * p.k3 * np.sum(dx**4, axis=1)
              + 0.5 * p.k_theta * np.sum(dth**2, axis=1))
    grav = -p.mass * seq.camera.T[:, :3, 3] @ seq.gravity
    return kin + rot + spring + grav


# ------------------------------------------------------------ patterns --

PATTERNS = ("A", "B", "C", "D")


@dataclass(frozen=True)
class PatternConfig:
    horizontal_amplitude: tuple = (0.1, 0.3)  # m, per sinusoid
    vertical_amplitude: tuple = (0.04, 0.12)  # m
    yaw_amplitude: tuple = (0.3, 0.9)  # rad
    frequency: tuple = (0.1, 0.6)  # Hz
    components: int = 2
    knot_dt: float = 0.5
    up: tuple = (0.0, 1.0, 0.0)

    def __post_init__(self):
        for name in ("horizontal_amplitude", "vertical_amplitude", "yaw_amplitude", "frequency"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"invalid range for {name}: {(lo, hi)}")
        if self.components < 1 or not self.knot_dt > 0:
            raise ValueError("components must be >= 1 and knot_dt positive")


def _sinusoids(rng, cfg, amp_range, n_axes):
    amp = rng.uniform(*amp_range, size=(n_axes, cfg.components))
    freq = rng.uniform(*cfg.frequency, size=(n_axes, cfg.components))
    phase = rng.uniform(0, 2 * np.pi, size=(n_axes, cfg.components))

    def f(t):
        t = np.asarray(t, float)[..., None, None]
        return np.sum(amp * np.sin(2 * np.pi * freq * t + phase), axis=-1)
    return f


def gen_pattern(pattern: str, duration: float = 30.0, cfg: PatternConfig = PatternConfig(),
                seed: int | np.random.Generator = 0, *, strict_duration: bool = True
                ) -> SplineTrajectory:
    """Base trajectory for one of the motion patterns.

    A: planar sinusoidal translation, fixed orientation.
    B: yaw oscillation about the base origin.
    C: A plus a sinusoid along the gravity axis.
    D: B plus a sinusoid along the gravity axis.

    The sinusoids are sampled at the control-pose times of an order-4
    spline with ``cfg.knot_dt`` spacing, so the result is the spline itself.
    """
    pattern = str(pattern).upper()
    if pattern not in PATTERNS:
        raise ValueError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")
    if strict_duration and not 25.0 <= duration <= 45.0:
        raise ValueError("pattern duration must lie in [25, 45] s (pass strict_duration=False)")
    if not duration > 0:
        raise ValueError("duration must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    up = np.asarray(cfg.up, float)
    up /= np.linalg.norm(up)
    # horizontal basis orthogonal to ``up``
    e1 = np.cross(up, np.eye(3)[np.argmin(np.abs(up))])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(e1, up)

    # draw every family in a fixed order so patterns sharing a seed share motion
    horiz = _sinusoids(rng, cfg, cfg.horizontal_amplitude, 2)
    yaw = _sinusoids(rng, cfg, cfg.yaw_amplitude, 1)
    vert = _sinusoids(rng, cfg, cfg.vertical_amplitude, 1)

    k = 4
    n_seg = int(math.ceil(duration / cfg.knot_dt - 1e-9))
    n_ctrl = n_seg + k - 1
    tk = (np.arange(n_ctrl) - (k - 2) / 2.0) * cfg.knot_dt
    trans = np.zeros((n_ctrl, 3))
    rot = np.zeros((n_ctrl, 3))
    if pattern in ("A", "C"):
        h = horiz(tk)
        trans += h[:, 0:1] * e1 + h[:, 1:2] * e2
    if pattern in ("B", "D"):
        rot += yaw(tk)[:, 0:1] * up
    if pattern in ("C", "D"):
        trans += vert(tk)[:, 0:1] * up
    control = geo.make_pose(geo.rot_exp(rot), trans)
    return SplineTrajectory(k, cfg.knot_dt, 0.0, control)
