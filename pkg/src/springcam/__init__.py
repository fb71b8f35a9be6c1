"""Scale, gravity and base-trajectory recovery for a camera on an elastic mount.

Modules: ``geometry`` (SO(3)/SE(3)), ``spline`` (cumulative B-splines),
``dynamics`` (spring-mount simulator), ``dfn`` (deformation-force network),
``estimator`` (perturbation, initialisation, Levenberg-Marquardt),
``metrics``, ``io``, ``experiment`` and ``cli``.
"""

__version__ = "0.1.0"
