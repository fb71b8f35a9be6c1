"""Simulation study: training data, perturbation sweeps and result tables.

Every random draw flows from ``ExperimentManifest.seed`` through
``numpy.random.SeedSequence`` children feeding Philox generators, so
training sequences, evaluation sequences and perturbations are
independent streams that do not shift when the sweep grows.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import dfn
from . import estimator as est
from . import metrics
from .dynamics import (PATTERNS, PatternConfig, SimulatedSequence, SpringParams, gen_pattern,
                       simulate)

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("APE Mean", "APE Median", "APE STD", "err_lambda", "err_G(deg)")
_METRIC_KEYS = ("ape_mean", "ape_median", "ape_std", "err_lambda", "err_g")


@dataclass(frozen=True)
class ExperimentManifest:
    seed: int = 0
    patterns: tuple = PATTERNS
    n_sequences: int = 6  # training sequences
    duration: float = 30.0
    rate: float = 360.0
    spring: dict = field(default_factory=dict)  # SpringParams overrides
    pattern: dict = field(default_factory=dict)  # PatternConfig overrides
    noise_levels: tuple = (0.0, 0.03, 0.05, 0.10)
    outlier_ratios: tuple = (0.0, 0.01, 0.03, 0.05)
    outlier_noise: float = 0.03  # noise amplitude under the outlier sweep
    trials: int = 6
    profile: str = "tiny"
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    solver: dict = field(default_factory=dict)  # SolverConfig overrides
    gate_linear: float = 0.05  # held-out L1 / label std, per linear axis
    gate_angular: float = 0.10
    workers: int = 1

    def __post_init__(self):
        if self.trials < 1 or self.n_sequences < 1:
            raise ValueError("trials and n_sequences must be at least 1")
        if any(x < 0 for x in self.noise_levels) or any(x < 0 for x in self.outlier_ratios):
            raise ValueError("noise levels and outlier ratios must be non-negative")
        if not self.patterns or any(str(p).upper() not in PATTERNS for p in self.patterns):
            raise ValueError(f"patterns must be drawn from {PATTERNS}")
        if self.profile not in dfn.PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        object.__setattr__(self, "patterns", tuple(str(p).upper() for p in self.patterns))
        object.__setattr__(self, "noise_levels", tuple(float(x) for x in self.noise_levels))
        object.__setattr__(self, "outlier_ratios", tuple(float(x) for x in self.outlier_ratios))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentManifest":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("patterns", "noise_levels", "outlier_ratios"):
            d[k] = list(d[k])
        return d

    @property
    def spring_params(self) -> SpringParams:
        return SpringParams.from_dict(self.spring) if self.spring else SpringParams()

    @property
    def pattern_cfg(self) -> PatternConfig:
        cfg = {k: tuple(v) if isinstance(v, list) else v for k, v in self.pattern.items()}
        return PatternConfig(**cfg)

    @property
    def train_cfg(self) -> dfn.TrainConfig:
        over = {k: tuple(v) if isinstance(v, list) else v for k, v in self.train.items()}
        over.setdefault("seed", self.seed)
        return dfn.TrainConfig.profile(self.profile, **over)

    @property
    def solver_cfg(self) -> est.SolverConfig:
        return est.SolverConfig.from_dict(self.solver)


# ------------------------------------------------------------- streams --

def _streams(seed: int, purpose: int, n: int) -> list:
    """``n`` independent seed sequences for one purpose (training, trials, ...)."""
    return np.random.SeedSequence([int(seed), purpose]).spawn(n)


def _generator(ss: np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(ss))


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _sequence(pattern: str, ss, manifest: ExperimentManifest) -> SimulatedSequence:
    base = gen_pattern(pattern, manifest.duration, manifest.pattern_cfg, _generator(ss),
                       strict_duration=False)
    return simulate(base, manifest.spring_params, rate=manifest.rate,
                    duration=manifest.duration)


def training_sequences(manifest: ExperimentManifest, patterns=None,
                       n: int | None = None) -> list:
    """Ground-truth sequences for network training, cycling through ``patterns``."""
    patterns = manifest.patterns if patterns is None else tuple(patterns)
    n = manifest.n_sequences if n is None else n
    ss = _streams(manifest.seed, 1, n)
    return [_sequence(patterns[i % len(patterns)], ss[i], manifest) for i in range(n)]


@dataclass
class Trial:
    index: int
    pattern: str
    sequence: SimulatedSequence
    perturb_seed: int


def trial_sequences(manifest: ExperimentManifest) -> list:
    """Held-out evaluation sequences, one per trial, with their perturbation seeds."""
    out = []
    for i, ss in enumerate(_streams(manifest.seed, 2, manifest.trials)):
        sim_ss, pert_ss = ss.spawn(2)
        pattern = manifest.patterns[i % len(manifest.patterns)]
        out.append(Trial(i, pattern, _sequence(pattern, sim_ss, manifest), _int_seed(pert_ss)))
    return out


# ------------------------------------------------------------ training --

@dataclass
class TrainingReport:
    result: dfn.TrainResult
    rel_error: np.ndarray  # held-out per-axis mean L1 / label std
    passed: bool

    def to_dict(self) -> dict:
        return {"rel_error_linear": self.rel_error[:3].tolist(),
                "rel_error_angular": self.rel_error[3:].tolist(),
                "final_train_l1": self.result.train_l1[-1],
                "final_val_l1": self.result.val_l1[-1],
                "passed": self.passed}


def train_network(sequences, manifest: ExperimentManifest, cfg: dfn.TrainConfig | None = None
                  ) -> TrainingReport:
    """Train on pooled sequences and check the held-out (test split) gate."""
    data = dfn.make_dataset(sequences)
    cfg = manifest.train_cfg if cfg is None else cfg
    res = dfn.train(dfn.PROFILES[manifest.profile], data, cfg)
    err, std = dfn.axis_errors(res.net, data.subset(res.split.test))
    rel = err / np.maximum(std, 1e-12)
    passed = bool(np.all(rel[:3] < manifest.gate_linear) and np.all(rel[3:] < manifest.gate_angular))
    return TrainingReport(res, rel, passed)


# -------------------------------------------------------------- trials --

def evaluate_sim(seq: SimulatedSequence, vo: est.VoTrack, sol: est.Solution) -> dict:
    """Metrics for one simulated run, using the known hidden similarity.

    Scale error compares against the true VO scale.  The fixed optimisation
    gravity is mapped back to the simulation world through the true VO
    rotation; the base APE uses rigid alignment, so scale stays estimated.
    """
    state = sol.state
    base = state.base.evaluate(seq.t)
    stats = metrics.ape(base, seq.base.T, "se3_align")
    g_opt = np.array([0.0, -np.linalg.norm(seq.gravity), 0.0])
    g_world = vo.rotation @ state.R.T @ g_opt
    return {"ape_mean": stats.mean, "ape_median": stats.median, "ape_std": stats.std,
            "err_lambda": metrics.scale_error(state.scale, vo.scale),
            "err_g": metrics.gravity_error(g_world, seq.gravity),
            "lambda": state.scale, "lambda_gt": vo.scale,
            "converged": sol.converged, "iterations": sol.iterations}


def run_trial(trial: Trial, net, manifest: ExperimentManifest, noise: float,
              outlier_ratio: float) -> dict:
    """Perturb, fit, initialise and solve one trial; failures are reported, not raised."""
    row = {"trial": trial.index, "pattern": trial.pattern, "noise": noise,
           "outlier_ratio": outlier_ratio}
    try:
        cfg = est.PerturbConfig(noise=noise, outlier_ratio=outlier_ratio, seed=trial.perturb_seed)
        vo = est.perturb(trial.sequence.t, trial.sequence.camera.T, cfg)
        solver = manifest.solver_cfg
        init = est.initialize(vo, net, params=manifest.spring_params, cfg=solver)
        sol = est.solve(vo, net, init=init, cfg=solver, params=manifest.spring_params)
        row.update(evaluate_sim(trial.sequence, vo, sol), failed=False, error="")
    except Exception as exc:  # a failed cell is marked and the sweep continues
        log.warning("trial %d (noise %g, outliers %g) failed: %s", trial.index, noise,
                    outlier_ratio, exc)
        row.update({k: float("nan") for k in _METRIC_KEYS}, failed=True, error=str(exc))
    return row


def _run_job(args):
    return run_trial(*args)


def sweep_cells(manifest: ExperimentManifest) -> list:
    """(table, level, noise, outlier ratio) for every row of both tables."""
    cells = [("noise", x, x, 0.0) for x in manifest.noise_levels]
    cells += [("outlier", r, manifest.outlier_noise, r) for r in manifest.outlier_ratios]
    return cells


def run_sweep(manifest: ExperimentManifest, net, trials: list | None = None) -> dict:
    """Per-trial results for every sweep cell, gathered in manifest order.

    A (noise, outlier) pair shared by both tables is solved once.
    """
    trials = trial_sequences(manifest) if trials is None else trials
    keys = []
    for _, _, noise, ratio in sweep_cells(manifest):
        if (noise, ratio) not in keys:
            keys.append((noise, ratio))
    jobs = [(tr, net, manifest, n, r) for n, r in keys for tr in trials]
    if manifest.workers > 1:
        with ProcessPoolExecutor(manifest.workers) as pool:
            rows = list(pool.map(_run_job, jobs))
    else:
        rows = [_run_job(j) for j in jobs]
    out = {k: [] for k in keys}
    for job, row in zip(jobs, rows):
        out[(job[3], job[4])].append(row)
    return out


@dataclass
class TableRow:
    level: float
    values: dict  # metric key -> mean over successful trials
    n_ok: int
    n_total: int

    @property
    def failed(self) -> bool:
        return self.n_ok < self.n_total


def summarize(manifest: ExperimentManifest, results: dict) -> dict:
    """Average each sweep cell into the two result tables."""
    tables = {"noise": [], "outlier": []}
    for table, level, noise, ratio in sweep_cells(manifest):
        rows = results[(noise, ratio)]
        ok = [r for r in rows if not r["failed"]]
        vals = {k: float(np.mean([r[k] for r in ok])) if ok else float("nan") for k in _METRIC_KEYS}
        tables[table].append(TableRow(level, vals, len(ok), len(rows)))
    return tables


def table_csv(rows: list, label: str) -> str:
    lines = [",".join([label, *TABLE_COLUMNS, "failed_trials"])]
    for row in rows:
        vals = [repr(row.values[k]) for k in _METRIC_KEYS]
        lines.append(",".join([f"{row.level:g}", *vals, str(row.n_total - row.n_ok)]))
    return "\n".join(lines) + "\n"


def table_text(rows: list, label: str) -> str:
    """Fixed-width rendering in the layout of the published tables."""
    head = f"{label:<8} | {'APE Mean':>8} | {'Median':>8} | {'STD':>8} | {'err_l':>8} | {'err_G(deg)':>10}"
    lines = [head, "-" * len(head)]
    for row in rows:
        v = row.values
        cells = [f"{v[k]:8.3f}" for k in _METRIC_KEYS[:4]] + [f"{v['err_g']:10.3f}"]
        mark = f"  ({row.n_total - row.n_ok} failed)" if row.failed else ""
        lines.append(f"{100 * row.level:>6.0f}%  | " + " | ".join(cells) + mark)
    return "\n".join(lines) + "\n"


def nondecreasing(rows: list, key: str, rtol: float = 0.0) -> bool:
    vals = [r.values[key] for r in rows]
    return all(math.isfinite(a) and math.isfinite(b) and b >= a * (1 - rtol)
               for a, b in zip(vals, vals[1:]))

