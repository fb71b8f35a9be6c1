"""Command-line harness: simulate, train, estimate, evaluate, reproduce.

Exit codes: 0 on success, 2 when a validation gate fails, 1 otherwise.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import dfn
from . import estimator as est
from . import experiment as ex
from . import geometry as geo
from . import io
from . import metrics
from .dynamics import SimulatedSequence, SpringParams, gravity_vector
from .spline import Kinematics

log = logging.getLogger("springcam")

EXIT_OK, EXIT_ERROR, EXIT_GATE = 0, 1, 2


class GateFailure(RuntimeError):
    pass


def _load_config(path) -> dict:
    return {} if path is None else io.read_json(path)


def _manifest(args) -> ex.ExperimentManifest:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "profile", None):
        cfg["profile"] = args.profile
    return ex.ExperimentManifest.from_dict(cfg)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------- simulate --

def _write_sequences(out: Path, sequences, patterns) -> list:
    names = []
    for i, (seq, p) in enumerate(zip(sequences, patterns)):
        stem = f"seq{i:03d}_{p}"
        io.write_kinematics(out / f"{stem}_base.csv", seq.base)
        io.write_kinematics(out / f"{stem}_camera.csv", seq.camera)
        names.append(stem)
    return names


def cmd_simulate(args) -> int:
    m = _manifest(args)
    out = _out_dir(args)
    seqs = ex.training_sequences(m)
    patterns = [m.patterns[i % len(m.patterns)] for i in range(len(seqs))]
    names = _write_sequences(out, seqs, patterns)
    io.write_json(out / "manifest.json", m.to_dict())
    io.write_json(out / "sequences.json", {"sequences": names, "rate": m.rate,
                                           "gravity": seqs[0].gravity.tolist()})
    print(f"wrote {len(names)} sequences to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- train --

def _kinematics(d: dict) -> Kinematics:
    if "acc" not in d:
        raise ValueError("trajectory file has no acceleration columns")
    # velocities are not stored; training and estimation never read them
    return Kinematics(d["t"], d["T"], np.full_like(d["acc"], np.nan), d["acc"], d["omega"],
                      d["alpha"])


def load_sequences(data_dir) -> list:
    data_dir = Path(data_dir)
    index = data_dir / "sequences.json"
    if not index.exists():
        raise FileNotFoundError(f"no simulated data in {data_dir} (missing sequences.json); "
                                "run `simulate` first")
    meta = io.read_json(index)
    g = np.asarray(meta.get("gravity", gravity_vector()), float)
    seqs = []
    for stem in meta["sequences"]:
        base = _kinematics(io.read_trajectory(data_dir / f"{stem}_base.csv"))
        cam = _kinematics(io.read_trajectory(data_dir / f"{stem}_camera.csv"))
        seqs.append(SimulatedSequence(float(meta["rate"]), base, cam, g))
    return seqs


def cmd_train(args) -> int:
    m = _manifest(args)
    out = _out_dir(args)
    seqs = load_sequences(args.data)
    report = ex.train_network(seqs, m)
    report.result.net.save(out / "dfn.json")
    (out / "loss.csv").write_text(report.result.loss_csv())
    io.write_json(out / "train_report.json", report.to_dict())
    lin, ang = report.rel_error[:3], report.rel_error[3:]
    print("held-out L1 / std  linear " + " ".join(f"{x:.4f}" for x in lin)
          + "  angular " + " ".join(f"{x:.4f}" for x in ang))
    if not report.passed:
        raise GateFailure(f"validation gate failed (limits {m.gate_linear} linear, "
                          f"{m.gate_angular} angular)")
    return EXIT_OK


# ------------------------------------------------------------- estimate --

def _solver_inputs(args):
    cfg = _load_config(args.config)
    solver = est.SolverConfig.from_dict(cfg.get("solver", cfg))
    spring = cfg.get("spring")
    params = SpringParams.from_dict(spring) if spring else SpringParams()
    return solver, params, cfg


def cmd_estimate(args) -> int:
    weights = Path(args.weights)
    if not weights.exists():
        raise FileNotFoundError(f"network weights not found: {weights}")
    net = dfn.DeformationNet.load(weights)
    solver, params, cfg = _solver_inputs(args)
    out = _out_dir(args)
    truth = {}
    if args.vo is not None:
        d = io.read_trajectory(args.vo)
        vo = est.fit_track(d["t"], d["T"], cfg.get("knot_dt", "auto"))
    elif args.gt is not None:
        d = io.read_trajectory(args.gt)
        seed = args.seed if args.seed is not None else cfg.get("perturb_seed", 0)
        pcfg = est.PerturbConfig(noise=args.noise, outlier_ratio=args.outliers, seed=seed)
        vo = est.perturb(d["t"], d["T"], pcfg)
        io.write_trajectory(out / "vo.csv", vo.t, vo.T)
        truth = {"lambda": vo.scale, "rotation": geo.rot_to_quat(vo.rotation).tolist()}
    else:
        raise ValueError("give either --vo or --gt")
    try:
        init = est.initialize(vo, net, params=params, cfg=solver)
    except est.InitializationError as exc:
        raise est.InitializationError(f"initialization failed: {exc}") from None
    sol = est.solve(vo, net, init=init, cfg=solver, params=params)
    st = sol.state

    base = st.base.evaluate(vo.t)
    io.write_trajectory(out / "base.csv", vo.t, base)
    io.write_trajectory(out / "camera_opt.csv", vo.t, est.camera_pose_opt(st, vo.T))
    io.write_trajectory(out / "knots.csv", st.base.knot_time(np.arange(len(st.base.control))),
                        st.base.control)
    doc = {"lambda": st.scale, "r_vo_opt": geo.rot_to_quat(st.R).tolist(), "vo_origin": st.origin.tolist(),
           "knots": "knots.csv", "knot_dt": st.base.dt, "iterations": sol.iterations,
           "converged": sol.converged, "final_cost": sol.final_cost, "reason": sol.reason,
           "camera_opt": "camera_opt.csv", "base": "base.csv",
           "gravity_opt": gravity_vector().tolist()}
    if truth:
        doc["truth"] = truth
    io.write_json(out / "solution.json", doc)
    print(f"lambda {st.scale:.6g}  converged {sol.converged} ({sol.reason}, "
          f"{sol.iterations} iterations)")
    return EXIT_OK


# ------------------------------------------------------------- evaluate --

def evaluate_files(est_path, gt_path, solution_path=None, gt_camera_path=None) -> dict:
    """Metrics JSON for an estimated base track against ground truth.

    Base APE uses rigid alignment.  With a ground-truth camera track and a
    solution whose optimised camera track is on disk, the reference scale
    is the similarity scale between the two camera tracks and gravity is
    compared after aligning their orientations.
    """
    est_d = io.read_trajectory(est_path)
    gt_d = io.read_trajectory(gt_path)
    stats = metrics.ape(est_d["T"], gt_d["T"], "se3_align", est_d["t"], gt_d["t"])
    doc = {"ape": stats.to_dict(), "err_lambda": None, "err_g_deg": None,
           "lambda": None, "lambda_gt": None,
           "alignment": {"base": "se3_align", "scale_reference": None}}
    if solution_path is None:
        return doc
    sol = io.read_json(solution_path)
    lam = float(sol["lambda"])
    doc["lambda"] = lam
    g_opt = np.asarray(sol.get("gravity_opt", gravity_vector()), float)
    if gt_camera_path is not None and "camera_opt" in sol:
        cam_opt = io.read_trajectory(Path(solution_path).parent / sol["camera_opt"])
        cam_gt = io.read_trajectory(gt_camera_path)
        i, j = metrics.associate(cam_opt["t"], cam_gt["t"])
        s, _, _ = metrics.umeyama(cam_opt["T"][i, :3, 3], cam_gt["T"][j, :3, 3], with_scale=True)
        # the optimised camera is already scaled by lambda; the residual scale is lambda_gt/lambda
        lam_gt = lam * s
        R_align = geo.project_to_rotation(np.sum(cam_gt["T"][j, :3, :3]
                                                 @ np.swapaxes(cam_opt["T"][i, :3, :3], 1, 2), axis=0))
        g_gt = np.asarray(sol.get("gravity_gt", gravity_vector()), float)
        doc.update(lambda_gt=lam_gt, err_lambda=metrics.scale_error(lam, lam_gt),
                   err_g_deg=metrics.gravity_error(R_align @ g_opt, g_gt))
        doc["alignment"]["scale_reference"] = "camera_sim3"
    elif "truth" in sol:
        lam_gt = float(sol["truth"]["lambda"])
        G = geo.quat_to_rot(np.asarray(sol["truth"]["rotation"], float))
        R = geo.quat_to_rot(np.asarray(sol["r_vo_opt"], float))
        doc.update(lambda_gt=lam_gt, err_lambda=metrics.scale_error(lam, lam_gt),
                   err_g_deg=metrics.gravity_error(G @ R.T @ g_opt, gravity_vector()))
        doc["alignment"]["scale_reference"] = "perturbation_truth"
    return doc


def cmd_evaluate(args) -> int:
    doc = evaluate_files(args.est, args.gt, args.solution, args.gt_camera)
    out = _out_dir(args)
    io.write_json(out / "metrics.json", doc)
    a = doc["ape"]
    line = f"APE mean {a['mean']:.4f} median {a['median']:.4f} std {a['std']:.4f}"
    if doc["err_lambda"] is not None:
        line += f"  err_lambda {doc['err_lambda']:.4f}  err_G {doc['err_g_deg']:.3f} deg"
    print(line)
    return EXIT_OK


# ------------------------------------------------------------ reproduce --

def cmd_reproduce(args) -> int:
    m = _manifest(args)
    out = _out_dir(args)
    io.write_json(out / "manifest.json", m.to_dict())
    if args.weights:
        net = dfn.DeformationNet.load(args.weights)
    else:
        report = ex.train_network(ex.training_sequences(m), m)
        net = report.result.net
        net.save(out / "dfn.json")
        (out / "loss.csv").write_text(report.result.loss_csv())
        io.write_json(out / "train_report.json", report.to_dict())
        if not report.passed:
            raise GateFailure("network failed the held-out validation gate")
    results = ex.run_sweep(m, net)
    tables = ex.summarize(m, results)
    rows = [r for cell in results.values() for r in cell]
    io.write_json(out / "trials.json", {"trials": rows})
    (out / "table_noise.csv").write_text(ex.table_csv(tables["noise"], "noise"))
    (out / "table_outlier.csv").write_text(ex.table_csv(tables["outlier"], "outlier"))
    text = ("Average performance under varying noise magnitudes\n"
            + ex.table_text(tables["noise"], "Noise")
            + "\nAverage performance under varying outlier proportions\n"
            + ex.table_text(tables["outlier"], "Outlier"))
    (out / "tables.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


# ----------------------------------------------------------------- main --

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--profile", choices=sorted(dfn.PROFILES), default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="springcam", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write ground-truth sequences")
    t = sub.add_parser("train", parents=[common], help="train the deformation-force network")
    t.add_argument("--data", required=True, help="directory written by simulate")
    e = sub.add_parser("estimate", parents=[common], help="recover scale, gravity and base")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--vo", help="scale-free camera trajectory CSV")
    src.add_argument("--gt", help="metric camera trajectory CSV to perturb")
    e.add_argument("--weights", required=True, help="network weights (dfn-v1 JSON)")
    e.add_argument("--noise", type=float, default=0.0)
    e.add_argument("--outliers", type=float, default=0.0)
    v = sub.add_parser("evaluate", parents=[common], help="metrics of an estimate")
    v.add_argument("--est", required=True, help="estimated base trajectory CSV")
    v.add_argument("--gt", required=True, help="ground-truth base trajectory CSV")
    v.add_argument("--solution", default=None, help="solution JSON from estimate")
    v.add_argument("--gt-camera", default=None, help="ground-truth camera trajectory CSV")
    r = sub.add_parser("reproduce", parents=[common], help="run the noise and outlier sweeps")
    r.add_argument("--weights", default=None, help="skip training and use these weights")
    return p


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "estimate": cmd_estimate,
            "evaluate": cmd_evaluate, "reproduce": cmd_reproduce}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except GateFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
