"""Command-line interface: ``sparsepose <command> [flags]``.

Exit codes: 0 success, 2 bad input or file format (including usage errors),
3 dictionary learning failed, 4 a solver invariant was violated.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import io
from .bcd import InitStrategy, InvariantViolation, initialize, run_bcd
from .dictlearn import TrainingDataError, learn_dictionary, preprocess
from .em import GridMap, run_em
from .geom import (
    CROP_SIZE, ORTHOGRAPHIC, PERSPECTIVE, GeometryError, Hyperparams, PoseSequence3D,
    calibration_matrix, camera_frame_pose, human15, project, validate_solution,
)
from .metrics import DegeneratePoseError, pcp, per_joint_errors, reconstruction_errors, rescale_to_limb_length
from .solvers import SolverError
from .synth import SynthConfig, generate_sequence, render_heatmaps, training_poses

log = logging.getLogger("sparsepose")

EXIT_OK, EXIT_INPUT, EXIT_LEARNING, EXIT_SOLVER = 0, 2, 3, 4

_CAMERAS = {"ortho": ORTHOGRAPHIC, "persp": PERSPECTIVE}


class InputError(Exception):
    """Bad flag values or inconsistent inputs detected after parsing."""


class LearningError(Exception):
    pass


# -- parser -------------------------------------------------------------------


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Shows ``(default: ...)`` only for flags that have a real default."""

    def _get_help_string(self, action):
        if action.default is None or isinstance(action.default, bool):
            return action.help
        return super()._get_help_string(action)


def _formatter(prog):
    return _HelpFormatter(prog, max_help_position=32)


def _add_common(p):
    p.add_argument("--config", metavar="FILE", help="JSON file of flag values; explicit flags win")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_model_flags(p):
    p.add_argument("--dict", required=True, metavar="FILE", help="dictionary file")
    p.add_argument("--camera", choices=sorted(_CAMERAS), default="ortho", help="camera model")
    p.add_argument("--calib", metavar="FX,FY,CX,CY",
                   help="perspective intrinsics in normalized image units")
    p.add_argument("--alpha", type=float, default=0.5, help="L1 weight on the coefficients")
    p.add_argument("--beta", type=float, default=20, help="temporal smoothness weight on C")
    p.add_argument("--gamma", type=float, default=2, help="temporal smoothness weight on R")
    p.add_argument("--nu", type=float, default=1, help="precision of the 2D likelihood")
    p.add_argument("--max-iter", type=int, default=200, help="block coordinate descent rounds")
    p.add_argument("--tol", type=float, default=1e-6, help="relative objective change to stop at")
    p.add_argument("--init", default="mean", metavar="mean|file:PARAMS",
                   help="initialization: the dictionary mean pose or a parameter file")
    p.add_argument("--trace", metavar="FILE", help="write the optimization trace (JSON)")
    p.add_argument("--params-out", metavar="FILE", help="write the fitted parameters (JSON)")
    p.add_argument("--out", required=True, metavar="FILE", help="reconstructed 3D poses")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsepose", formatter_class=_formatter,
        description="3D pose sequences from 2D joints or heat maps with a sparse pose dictionary.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("training-poses", formatter_class=_formatter,
                       help="sample 3D training poses from the built-in body model")
    _add_common(p)
    p.add_argument("--m", type=int, default=2000, help="number of poses")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, metavar="FILE", help="pose3d file to write")

    p = sub.add_parser("learn-dict", formatter_class=_formatter,
                       help="learn a pose dictionary from 3D training poses")
    _add_common(p)
    p.add_argument("--train", required=True, metavar="FILE", help="pose3d training file")
    p.add_argument("--k", type=int, default=64, help="number of atoms")
    p.add_argument("--alpha", type=float, default=0.5, help="sparse-coding weight during learning")
    p.add_argument("--seed", type=int, default=0, help="seed for the atom initialization")
    p.add_argument("--rounds", type=int, default=30, help="maximum outer rounds")
    p.add_argument("--out", required=True, metavar="FILE", help="dictionary file to write")

    p = sub.add_parser("reconstruct", formatter_class=_formatter,
                       help="reconstruct 3D poses from given 2D joints")
    _add_common(p)
    p.add_argument("--poses2d", required=True, metavar="FILE", help="pose2d input file")
    _add_model_flags(p)
    p.add_argument("--plot-data", metavar="FILE", help="CSV of the objective per iteration")

    p = sub.add_parser("reconstruct-em", formatter_class=_formatter,
                       help="reconstruct 3D poses from per-joint heat maps with EM")
    _add_common(p)
    p.add_argument("--heatmaps", required=True, metavar="FILE", help="binary heat-map file")
    _add_model_flags(p)
    p.add_argument("--em-iters", type=int, default=20, help="maximum EM iterations")
    p.add_argument("--crop-size", type=float, default=CROP_SIZE,
                   help="side of the normalized frame the heat-map grid spans")
    p.add_argument("--expected2d", metavar="FILE", help="write the final expected 2D poses")

    p = sub.add_parser("eval", formatter_class=_formatter,
                       help="compare estimated and ground-truth 3D poses")
    _add_common(p)
    p.add_argument("--est", required=True, metavar="FILE", help="estimated pose3d file")
    p.add_argument("--gt", required=True, metavar="FILE", help="ground-truth pose3d file")
    p.add_argument("--metric", action="append", choices=["pje", "rec", "pcp"],
                   help="metric to report (repeatable; all three when omitted)")
    p.add_argument("--tau", type=float, default=0.5, help="PCP threshold")
    p.add_argument("--rescale-to", metavar="DICT",
                   help="rescale both sequences to this dictionary's mean limb length first")
    p.add_argument("--report", metavar="FILE", help="JSON report")
    p.add_argument("--plot-data", metavar="FILE", help="CSV of the per-frame errors")

    p = sub.add_parser("synth", formatter_class=_formatter,
                       help="generate a synthetic instance with known ground truth")
    _add_common(p)
    p.add_argument("--dict", required=True, metavar="FILE", help="dictionary file")
    p.add_argument("--frames", type=int, default=30, help="number of frames")
    p.add_argument("--active-atoms", type=int, default=3, help="atoms active per frame")
    p.add_argument("--coef-scale", type=float, default=200.0, help="sum of active coefficients")
    p.add_argument("--camera", choices=sorted(_CAMERAS), default="ortho", help="camera model")
    p.add_argument("--focal", type=float, default=400.0, help="focal length (perspective)")
    p.add_argument("--depth", type=float, default=400.0, help="subject distance (perspective)")
    p.add_argument("--noise", type=float, default=0.0, help="2D noise standard deviation")
    p.add_argument("--heatmap-sigma", type=float, default=1.0, help="heat-map blob std in pixels")
    p.add_argument("--grid", type=int, default=64, help="heat-map side in pixels")
    p.add_argument("--distractors", type=int, default=0, help="distractor blobs per frame")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out-prefix", required=True, metavar="PATH", help="prefix of the output files")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv):
    """Parse ``argv``; values from ``--config`` act as defaults for the subcommand."""
    argv = sys.argv[1:] if argv is None else list(argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config_path = pre.parse_known_args(argv)[0].config
    if command is None or not config_path:
        return parser.parse_args(argv)
    try:
        cfg = json.loads(Path(config_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config {config_path}: {exc}")
    if not isinstance(cfg, dict):
        parser.error("config must be a JSON object")
    subparser = choices[command]
    known = {a.dest for a in subparser._actions}
    known.add("calibration")
    defaults = {}
    for key, value in cfg.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            parser.error(f"unknown config key {key!r} for {command}")
        defaults[dest] = value
    subparser.set_defaults(**defaults)
    # required flags satisfied by the config no longer need to be given
    for action in subparser._actions:
        if action.dest in defaults:
            action.required = False
    return parser.parse_args(argv)


# -- helpers ------------------------------------------------------------------


def _hyper(args) -> Hyperparams:
    calibration = None
    camera = _CAMERAS[args.camera]
    full = getattr(args, "calibration", None)
    if full is not None:
        calibration = np.array(full, dtype=float)
    elif args.calib:
        try:
            fx, fy, cx, cy = (float(v) for v in str(args.calib).split(","))
        except ValueError:
            raise InputError(f"--calib expects fx,fy,cx,cy, got {args.calib!r}") from None
        calibration = calibration_matrix(fx, fy, cx, cy)
    if camera == PERSPECTIVE and calibration is None:
        raise InputError("--camera persp needs --calib")
    return Hyperparams(alpha=float(args.alpha), beta=float(args.beta), gamma=float(args.gamma),
                       nu=float(args.nu),
                       calibration=calibration, bcd_tol=args.tol, bcd_max_iter=args.max_iter,
                       em_max_iter=getattr(args, "em_iters", 20))


def _strategy(args, camera) -> InitStrategy:
    if args.init == "mean":
        return InitStrategy.mean_pose_rigid()
    if str(args.init).startswith("file:"):
        params = io.read_params(args.init[5:])
        if params.camera != camera:
            raise InputError(f"initial parameters are {params.camera}, requested {camera}")
        return InitStrategy.provided(params)
    raise InputError(f"--init must be 'mean' or 'file:<params>', got {args.init!r}")


def _check_init(params, n, dictionary):
    if params.n != n or params.k != dictionary.k:
        raise InputError(f"initial parameters cover {params.n} frames and {params.k} atoms; "
                         f"input has {n} frames, dictionary {dictionary.k} atoms")


def _write_outputs(args, params, dictionary, trace_dict):
    io.write_poses(args.out, camera_frame_pose(params, dictionary), dictionary.skeleton,
                   units="dictionary")
    if args.params_out:
        io.write_params(args.params_out, params)
    if args.trace:
        io.write_json(args.trace, trace_dict)
    for issue in validate_solution(params, dictionary):
        print(f"warning: {issue}", file=sys.stderr)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                             for v in row])


# -- commands -----------------------------------------------------------------


def cmd_training_poses(args):
    poses = training_poses(args.m, args.seed)
    io.write_poses(args.out, PoseSequence3D(poses), human15(), units="mm")
    print(f"wrote {args.m} poses to {args.out}")


def cmd_learn_dict(args):
    poses, skeleton, _ = io.read_poses(args.train, "pose3d")
    try:
        train = preprocess(poses.coords, skeleton)
    except TrainingDataError as exc:
        raise LearningError(str(exc)) from None
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            dictionary, report = learn_dictionary(train, k=args.k, alpha=args.alpha,
                                                  seed=args.seed, rounds=args.rounds)
    except (AssertionError, GeometryError, SolverError, ValueError) as exc:
        raise LearningError(str(exc)) from None
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    io.write_dictionary(args.out, dictionary)
    print(f"training reconstruction error: {report.reconstruction_error:.6g} "
          f"({report.rounds} rounds, {report.reseeded} atoms reseeded)")


def cmd_reconstruct(args):
    hyper = _hyper(args)
    camera = _CAMERAS[args.camera]
    dictionary = io.read_dictionary(args.dict)
    W, skeleton, _ = io.read_poses(args.poses2d, "pose2d")
    if W.p != dictionary.p:
        raise InputError(f"2D poses have {W.p} joints, dictionary has {dictionary.p}")
    strategy = _strategy(args, camera)
    init = initialize(W, dictionary, hyper, strategy, camera)
    _check_init(init, W.n, dictionary)
    params, trace = run_bcd(W, dictionary, hyper, init)
    _write_outputs(args, params, dictionary, trace.to_dict())
    if args.plot_data:
        _write_csv(args.plot_data, ["iteration", "objective"], enumerate(trace.objective))
    print(f"objective {trace.objective[-1]:.6g} after {trace.iterations} iterations "
          f"({trace.termination})")


def cmd_reconstruct_em(args):
    hyper = _hyper(args)
    camera = _CAMERAS[args.camera]
    dictionary = io.read_dictionary(args.dict)
    probe = io.read_heatmaps(args.heatmaps)
    H, Wpx = probe.shape
    heatmaps = io.read_heatmaps(args.heatmaps, GridMap.crop(H, Wpx, args.crop_size))
    if heatmaps.p != dictionary.p:
        raise InputError(f"heat maps have {heatmaps.p} joints, dictionary has {dictionary.p}")
    strategy = _strategy(args, camera)
    if strategy.params is not None:
        _check_init(strategy.params, heatmaps.n, dictionary)
    params, trace = run_em(heatmaps, dictionary, hyper, strategy, camera)
    _write_outputs(args, params, dictionary, trace.to_dict())
    if args.expected2d:
        W = trace.expected[-1] if trace.expected else heatmaps.argmax()
        io.write_poses(args.expected2d, W, dictionary.skeleton, units="normalized")
    if not trace.surrogate_after:
        print("no EM iterations run; wrote the initialization")
        return
    print(f"surrogate {trace.surrogate_after[-1]:.6g} after {trace.iterations} EM iterations "
          f"({trace.termination})")


def cmd_eval(args):
    est, skeleton, _ = io.read_poses(args.est, "pose3d")
    gt, _, _ = io.read_poses(args.gt, "pose3d")
    if est.coords.shape != gt.coords.shape:
        raise InputError(f"estimate has shape {est.coords.shape}, ground truth {gt.coords.shape}")
    if args.rescale_to:
        target = io.read_dictionary(args.rescale_to).mean_limb_length
        est = rescale_to_limb_length(est, skeleton, target)
        gt = rescale_to_limb_length(gt, skeleton, target)
    metrics = args.metric or ["pje", "rec", "pcp"]
    report = {"frames": est.n, "joints": est.p, "rescaled": bool(args.rescale_to), "metrics": {}}
    columns = {}
    if "pje" in metrics:
        e = per_joint_errors(est, gt, skeleton)
        report["metrics"]["pje"] = {"mean": float(e.mean()), "per_frame": e.tolist()}
        columns["pje"] = e
    if "rec" in metrics:
        e = reconstruction_errors(est, gt, skeleton)
        report["metrics"]["rec"] = {"mean": float(e.mean()), "per_frame": e.tolist()}
        columns["rec"] = e
    if "pcp" in metrics:
        res = pcp(est, gt, skeleton, args.tau)
        report["metrics"]["pcp"] = {"score": res.score, "tau": args.tau, "per_group": res.per_group,
                                    "per_frame": res.per_frame.tolist(), "skipped": res.skipped}
        columns["pcp"] = res.per_frame
    if args.report:
        io.write_json(args.report, report)
    if args.plot_data:
        names = list(columns)
        _write_csv(args.plot_data, ["frame"] + names,
                   ([t] + [float(columns[c][t]) for c in names] for t in range(est.n)))
    for name, value in report["metrics"].items():
        shown = value["score"] if name == "pcp" else value["mean"]
        print(f"{name}: {shown:.6g}")


def cmd_synth(args):
    dictionary = io.read_dictionary(args.dict)
    camera = _CAMERAS[args.camera]
    config = SynthConfig(seed=args.seed, frames=args.frames, active_atoms=args.active_atoms,
                         coef_scale=args.coef_scale, noise=args.noise,
                         heatmap_sigma=args.heatmap_sigma, grid=(args.grid, args.grid),
                         camera=camera, focal=args.focal, depth=args.depth,
                         distractors=args.distractors)
    seq = generate_sequence(dictionary, config)
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        heatmaps = render_heatmaps(seq.clean, config)
    prefix = str(args.out_prefix)
    sk = dictionary.skeleton
    io.write_poses(prefix + "_truth3d.json", seq.camera_poses, sk, units="dictionary")
    io.write_params(prefix + "_params.json", seq.params)
    io.write_poses(prefix + "_clean2d.json", seq.clean, sk, units="normalized")
    io.write_poses(prefix + "_noisy2d.json", seq.noisy, sk, units="normalized")
    io.write_heatmaps(prefix + "_heatmaps.mchm", heatmaps)
    run_cfg = {"camera": args.camera}
    if camera == PERSPECTIVE:
        c = 0.5 * CROP_SIZE
        run_cfg["calib"] = f"{args.focal!r},{args.focal!r},{c!r},{c!r}"
    io.write_json(prefix + "_config.json", run_cfg)
    # sanity: the clean 2D is the exact projection of the truth parameters
    hyper = Hyperparams(calibration=seq.calibration)
    gap = np.abs(project(seq.params, dictionary, hyper).coords - seq.clean.coords).max()
    print(f"wrote {prefix}_*.json and {prefix}_heatmaps.mchm (max reprojection gap {gap:.2g})")


_COMMANDS = {
    "training-poses": cmd_training_poses,
    "learn-dict": cmd_learn_dict,
    "reconstruct": cmd_reconstruct,
    "reconstruct-em": cmd_reconstruct_em,
    "eval": cmd_eval,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _COMMANDS[args.command](args)
    except LearningError as exc:
        print(f"error: dictionary learning failed: {exc}", file=sys.stderr)
        return EXIT_LEARNING
    except (InvariantViolation, SolverError) as exc:
        print(f"error: solver invariant violated: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (InputError, io.FormatError, GeometryError, DegeneratePoseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
