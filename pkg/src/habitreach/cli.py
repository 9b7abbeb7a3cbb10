"""Command-line entry point: ``habitreach <subcommand> ...``.

Exit codes: 0 success, 2 bad configuration or usage, 3 simulation failure,
4 malformed input file.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .arm import ExcitationProfile, default_arm, load_arm, simulate
from .calibration import CalibrationRequest, append_records, calibrate_batch
from .errors import ConfigError, DynamicsError, HashMismatchError, SchemaError
from .experiment import ExperimentConfig, plot_data_csv, run_experiment
from .planner import DEFAULT_N_TEMPLATES, plan
from .templates import WaveformSpec, generate_library, load_library, save_library

log = logging.getLogger("habitreach")

EXIT_OK, EXIT_CONFIG, EXIT_SIMULATION, EXIT_SCHEMA = 0, 2, 3, 4


def _arm(args):
    return default_arm() if args.arm is None else load_arm(args.arm)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(args, doc: dict, rows: list[list] | None = None) -> None:
    """Print ``doc`` as JSON, or ``rows`` (header first) as CSV."""
    if args.format == "json" or rows is None:
        print(json.dumps(doc, indent=1))
    else:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        sys.stdout.write(buf.getvalue())


def cmd_gen_templates(args) -> int:
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    model = _arm(args)
    library = generate_library(model, args.count, args.seed, WaveformSpec(args.max_amplitude))
    path = _out(args) / args.name
    save_library(library, path)
    lo, hi = library.positions.min(0), library.positions.max(0)
    _emit(args, {"path": str(path), "count": len(library), "seed": args.seed,
                 "bbox": [lo.tolist(), hi.tolist()]},
          [["path", "count", "seed", "x_min", "y_min", "x_max", "y_max"],
           [str(path), len(library), args.seed, *map(repr, lo.tolist()), *map(repr, hi.tolist())]])
    return EXIT_OK


def cmd_plan(args) -> int:
    model = _arm(args)
    library = load_library(args.library, model)
    p = plan(args.target, library, args.n)
    if args.save:
        Path(args.save).write_text(json.dumps(p.blended_excitations.to_dict()))
    doc = {k: v for k, v in p.to_dict().items() if k != "blended_excitations"}
    rows = [["template_id", "x", "y", "weight"]]
    rows += [[i, repr(x), repr(y), repr(w)] for i, (x, y), w
             in zip(p.template_ids, p.template_positions.tolist(), p.weights.tolist())]
    _emit(args, doc, rows)
    return EXIT_OK


def cmd_simulate(args) -> int:
    model = _arm(args)
    if args.excitations:
        try:
            doc = json.loads(Path(args.excitations).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{args.excitations}: {exc.msg} at byte {exc.pos}", offset=exc.pos) from exc
        try:
            prof = ExcitationProfile.from_dict(doc)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{args.excitations}: {exc}") from exc
    elif args.template:
        if not args.library:
            raise ConfigError("--template needs --library")
        library = load_library(args.library, model)
        if args.template not in library.by_id:
            raise ConfigError(f"no template {args.template!r} in {args.library}")
        prof = library.by_id[args.template].excitations
    else:
        prof = ExcitationProfile(model.integrator_dt, np.zeros((model.n_steps, 6)))
    traj = simulate(prof, model)
    if args.trajectory:
        path = _out(args) / args.trajectory
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "q1", "q2", "x", "y"])
            for t, q, p in zip(traj.times, traj.q, traj.hand_positions):
                w.writerow([repr(float(t)), repr(float(q[0])), repr(float(q[1])),
                            repr(float(p[0])), repr(float(p[1]))])
    x, y = traj.final_position.tolist()
    _emit(args, {"final_position": [x, y]}, [["x", "y"], [repr(x), repr(y)]])
    return EXIT_OK


def cmd_calibrate(args) -> int:
    model = _arm(args)
    library = load_library(args.library, model)
    p = plan(args.target, library, args.n)
    (_, rec), = calibrate_batch([CalibrationRequest(p)], model, library,
                                range(args.n_min, args.n_max + 1))
    if args.records:
        append_records(args.records, [rec])
    rows = [["stage", "actual_x", "actual_y"] + [f"w{i + 1}" for i in range(len(p.weights))]
            + ["chosen_n", "error"],
            ["plan", *map(repr, rec.achieved_before.tolist()), *map(repr, rec.planner_weights.tolist()),
             "", repr(rec.error_before)],
            ["offline", *map(repr, rec.achieved_after.tolist()), *map(repr, rec.offline_weights.tolist()),
             "none" if rec.chosen_n is None else rec.chosen_n, repr(rec.error_after)]]
    _emit(args, rec.to_dict(), rows)
    return EXIT_OK


def cmd_experiment(args) -> int:
    doc = {} if args.config is None else ExperimentConfig.load(args.config).to_dict()
    overrides = {"seed": args.seed, "arm": args.arm, "library": args.library,
                 "rounds": args.rounds, "target_count": args.targets}
    for k, v in overrides.items():
        if v is not None and (k != "seed" or args.config is None or args.seed_given):
            doc[k] = v
    config = ExperimentConfig.from_dict(doc)
    report = run_experiment(config)
    out = _out(args)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.json").write_text(report.to_json())
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1) + "\n")
    means = report.round_means()
    rows = [["stage", "round", "mean_error"], ["plan", 0, repr(means["plan"])],
            ["offline", 0, repr(means["offline"])]]
    rows += [["online", k, repr(v)] for k, v in means["online"].items()]
    _emit(args, {"out": str(out), "partial": report.partial, "means": means}, rows)
    if report.partial:
        log.error("experiment stopped early: %s", report.failure)
        return EXIT_SIMULATION
    return EXIT_OK


def cmd_plot_data(args) -> int:
    try:
        doc = json.loads(Path(args.report).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{args.report}: {exc.msg} at byte {exc.pos}", offset=exc.pos) from exc
    try:
        text = plot_data_csv(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{args.report}: missing or bad field ({exc})") from exc
    if args.out_file:
        path = _out(args) / args.out_file
        path.write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; the copy on
    # the subcommands suppresses defaults so it cannot clobber earlier values
    def flags(suppress):
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--arm", default=d(None), help="arm parameter file (default: packaged arm)")
        g.add_argument("--seed", type=int, default=d(None), help="random seed (default: 0)")
        g.add_argument("--out", default=d("."), help="output directory (default: .)")
        g.add_argument("--format", choices=("csv", "json"), default=d("csv"),
                       help="format of what is printed to stdout (default: csv)")
        g.add_argument("-v", "--verbose", action="store_true", default=d(False))
        return g

    top, common = flags(False), flags(True)
    parser = argparse.ArgumentParser(prog="habitreach", parents=[top],
                                     description="Template-blending reach planner for a muscle-driven arm.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-templates", parents=[common], help="generate a template library")
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--max-amplitude", type=float, default=0.6)
    p.add_argument("--name", default="library.json", help="file name inside --out")
    p.set_defaults(func=cmd_gen_templates)

    p = sub.add_parser("plan", parents=[common], help="blend templates for one target")
    p.add_argument("--library", required=True)
    p.add_argument("--target", type=float, nargs=2, required=True, metavar=("X", "Y"))
    p.add_argument("--n", type=int, default=DEFAULT_N_TEMPLATES)
    p.add_argument("--save", default=None, help="write the blended excitations to this JSON file")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", parents=[common], help="simulate one excitation profile")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--excitations", default=None, help="JSON file with dt and samples")
    src.add_argument("--template", default=None, help="template id (needs --library)")
    p.add_argument("--library", default=None)
    p.add_argument("--trajectory", default=None, help="write the trajectory CSV to this file inside --out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", parents=[common], help="plan and off-line calibrate one target")
    p.add_argument("--library", required=True)
    p.add_argument("--target", type=float, nargs=2, required=True, metavar=("X", "Y"))
    p.add_argument("--n", type=int, default=DEFAULT_N_TEMPLATES)
    p.add_argument("--n-min", type=int, default=0)
    p.add_argument("--n-max", type=int, default=20)
    p.add_argument("--records", default=None, help="append the calibration record to this JSON-lines file")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("experiment", parents=[common], help="run the full three-stage experiment")
    p.add_argument("--config", default=None, help="JSON experiment config")
    p.add_argument("--library", default=None)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--targets", type=int, default=None, help="number of targets")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("plot-data", parents=[common], help="turn a JSON report into plot-ready CSV")
    p.add_argument("--report", required=True)
    p.add_argument("--out-file", default=None, help="file name inside --out (default: stdout)")
    p.set_defaults(func=cmd_plot_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"habitreach: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DynamicsError as exc:
        print(f"habitreach: simulation failed: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except (SchemaError, HashMismatchError) as exc:
        print(f"habitreach: bad input file: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except FileNotFoundError as exc:
        print(f"habitreach: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
