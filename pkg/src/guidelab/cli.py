"""Command-line entry point: ``guidelab {sample,sweep,calibrate,verify,plotdata}``.

Exit codes: 0 success, 1 configuration or input error, 2 numeric failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from guidelab import harness
from guidelab.classifier import TrainingDiverged
from guidelab.config import (
    SWEEP_AXES, ConfigError, RunConfig, from_dict, load_config, parse_axis_value,
)
from guidelab.plots import svg_line_plot
from guidelab.records import StagedDir, csv_text, dumps_json, load_run, read_csv
from guidelab.verify import format_report, run_checks

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which would collide with EXIT_NUMERIC
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out = args.out
    return from_dict(cfg.to_dict())


def cmd_sample(args) -> int:
    cfg = _load(args)
    clf = harness.build_classifier(cfg)
    run = harness.run_config(cfg, clf)
    summary = harness.summarize(run, cfg, clf)
    harness.write_run_dir(run, cfg, summary, cfg.out)
    print(summary.line())
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {args.axis!r}; valid axes: {sorted(SWEEP_AXES)}")
    texts = [v for v in args.values.split(",") if v.strip()]
    if not texts:
        raise ConfigError("--values must list at least one value")
    values = [parse_axis_value(args.axis, v) for v in texts]
    seeds = [cfg.seed + i for i in range(args.repeats)]
    rows = harness.sweep(cfg, args.axis, values, seeds)
    K = cfg.build_mixture().K
    with StagedDir(cfg.out) as staged:
        staged.write("sweep.csv", csv_text(harness.sweep_header(K), rows))
        staged.write("config.json", dumps_json(cfg.snapshot()))
        staged.commit()
    for row in rows:
        print(f"{args.axis}={row[1]} seed={row[2]} accuracy={row[3]:.4f} "
              f"moment_distance={row[4]:.6g} integral_ece={row[6]:.6g}")
    return EXIT_OK


def _run_dir(path) -> Path:
    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"run directory {d} does not exist")
    return d


def cmd_calibrate(args) -> int:
    d = _run_dir(args.run_dir)
    run = load_run(d)
    cfg = _load(args) if args.config else from_dict(run.config)
    if args.bins is not None:
        cfg.calibration.bins = args.bins
    if args.input is not None:
        cfg.guidance.input = args.input
    cfg = from_dict(cfg.to_dict())
    clf = harness.build_classifier(cfg)
    summary = harness.summarize(run, cfg, clf)
    files = harness.calibration_files(summary.calibration, cfg.calibration.reliability_steps)
    out = Path(args.out) if args.out else d / "calibration"
    with StagedDir(out) as staged:
        for name, text in files.items():
            staged.write(name, text)
        staged.commit()
    print(f"integral_ece={summary.calibration.integral:.6g}")
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = run_checks(corrupt_spd=args.corrupt_spd)
    report = format_report(checks)
    sys.stdout.write(report)
    return EXIT_OK if all(c.passed for c in checks) else EXIT_VERIFY


def _columns(path: Path, wanted: list[str]) -> dict[str, np.ndarray]:
    header, rows = read_csv(path)
    missing = [c for c in wanted if c not in header]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    idx = {c: header.index(c) for c in wanted}
    return {c: np.array([float(r[i]) for r in rows]) for c, i in idx.items()}


def cmd_plotdata(args) -> int:
    d = _run_dir(args.run_dir)
    needed = ["meta.json", "trajectory.csv", "calibration.csv"]
    missing = [n for n in needed if not (d / n).is_file()]
    if missing:
        raise FileNotFoundError(f"{d}: missing {', '.join(missing)}")
    meta = json.loads((d / "meta.json").read_text())
    cfg = from_dict(meta["config"])

    cal = _columns(d / "calibration.csv", ["step", "t", "ece"])
    traj = _columns(d / "trajectory.csv", ["step", "t", "grad_norm_mean", "grad_norm_max"])
    sched = harness.schedule_curves(cfg)
    sched_arr = np.array(sched, dtype=float)

    out = Path(args.out) if args.out else d / "plots"
    with StagedDir(out) as staged:
        staged.write("ece_curve.csv", (d / "calibration.csv").read_text())
        staged.write("ece_curve.svg", svg_line_plot(
            cal["t"], {"ECE_t": cal["ece"]}, "calibration error along the trajectory", "t", "ECE"))
        staged.write("schedule_curve.csv", csv_text(harness.SCHEDULE_COLUMNS, sched))
        staged.write("schedule_curve.svg", svg_line_plot(
            sched_arr[:, 0], {"linear": sched_arr[:, 1], "sine": sched_arr[:, 2]},
            "guidance scale schedule", "t", "scale"))
        staged.write("grad_norm_curve.csv", csv_text(
            ["step", "t", "grad_norm_mean", "grad_norm_max"],
            zip(traj["step"].astype(int), traj["t"].astype(int), traj["grad_norm_mean"],
                traj["grad_norm_max"])))
        staged.write("grad_norm_curve.svg", svg_line_plot(
            traj["t"], {"mean": traj["grad_norm_mean"]}, "guidance gradient norm", "t", "norm"))
        staged.commit()
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="guidelab", description="Classifier-guided diffusion on Gaussian mixtures.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help="output directory (overrides the config)"):
        sp.add_argument("--config", help="JSON run configuration (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="sampling seed (overrides the config)")
        sp.add_argument("--out", help=out_help)

    sp = sub.add_parser("sample", help="run one sampler and write a run directory")
    common(sp)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("sweep", help="paired-seed sweep over one configuration axis")
    common(sp)
    sp.add_argument("--axis", required=True, help=f"one of {', '.join(sorted(SWEEP_AXES))}")
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--repeats", type=int, default=1,
                    help="number of consecutive seeds starting at the config seed")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("calibrate", help="trajectory ECE for an existing run directory")
    sp.add_argument("run_dir")
    common(sp, "directory for calibration files (default: <run_dir>/calibration)")
    sp.add_argument("--bins", type=int)
    sp.add_argument("--input", choices=["noisy_sample", "predicted_x0"])
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("verify", help="run the oracle self-checks")
    sp.add_argument("--_corrupt-spd", dest="corrupt_spd", action="store_true",
                    help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("plotdata", help="curve CSVs and SVGs for a run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--out", help="output directory (default: <run_dir>/plots)")
    sp.set_defaults(func=cmd_plotdata)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "repeats", 1) < 1:
        print("error: --repeats must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with np.errstate(over="ignore", under="ignore"):
            return args.func(args)
    except (ArithmeticError, TrainingDiverged) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
