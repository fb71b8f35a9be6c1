"""A camera hanging from a spring mount on a moving base.

Builds one of the four base motion patterns, integrates the camera and
checks that the recorded camera acceleration is exactly what the spring
law predicts.  Run: python3 demos/01_mount_simulation.py
"""
import numpy as np

from springcam import geometry as geo
from springcam.dynamics import SpringParams, gen_pattern, simulate, spring_wrench, static_equilibrium

params = SpringParams()
print("mount:", f"mass {params.mass} kg, k1 {params.k1} N/m, k3 {params.k3} N/m^3")

# the camera sags under gravity until the spring carries its weight
eq = static_equilibrium(params, np.array([0.0, -9.81, 0.0]))
sag = eq.t - np.asarray(params.rest_translation)
print(f"static sag {1000 * np.linalg.norm(sag):.2f} mm, tilt {np.degrees(np.linalg.norm(eq.log()[:3])):.2f} deg")

# pattern D: yaw oscillation plus a vertical bob
base = gen_pattern("D", 30.0, seed=1)
seq = simulate(base, params, duration=30.0, rate=360.0)
rel = geo.se3_log(seq.relative_poses())
print(f"{len(seq)} samples at {seq.rate:.0f} Hz")
print(f"deflection range: {1000 * np.ptp(rel[:, 3:], axis=0).round(5)} mm, "
      f"{np.degrees(np.ptp(rel[:, :3], axis=0)).round(3)} deg")

# Newton balance: m (a - g) is the spring force, rotated into the world
w = spring_wrench(params, seq.relative_poses(), seq.rel_rate)
force = np.einsum("mij,mj->mi", seq.base.T[:, :3, :3], w[:, :3])
imbalance = np.abs(params.mass * (seq.camera.acc - seq.gravity) - force).max()
print(f"largest force imbalance {imbalance:.1e} N")
