"""Command-line entry points: run, sweep, compare, predict, audit."""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from . import harness, lattice, predictor
from .harness import ExperimentConfig
from .kernels import ExpansionParams


def _cmd_run(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    try:
        rec = harness.run(cfg, outdir=args.outdir)
    except harness.StageError as err:
        print(f"run failed: {err}", file=sys.stderr)
        return 1
    print(f"run {'reused' if rec.reused else 'complete'}: {rec.run_dir}")
    for row in rec.estimates:
        print(f"  {row['kind']}: {row['value']} +- {row['stderr']}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    values = [float(v) for v in args.values.split(",")]
    rows = harness.sweep(cfg, args.axis, values, outdir=args.outdir, point_workers=args.point_workers)
    failed = [r for r in rows if r["error"]]
    for r in rows:
        status = r["error"] or "ok"
        print(f"  {args.axis}={r['x']}: mc={r['mc_value']} v_main={r['v_main']} [{status}]")
    print(f"sweep table: {args.outdir}/sweep_{args.axis}.csv")
    return 1 if failed else 0


def _cmd_compare(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    rec = harness.run(cfg, outdir=args.outdir)  # reuses the completed run
    report = harness.compare(rec, z_flag=args.z_flag)
    for row in report.rows:
        mark = " FLAG" if row["flag"] else ""
        print(f"  {row['prediction']}: predicted={row['predicted']:.6e} z={row['z']:+.2f}{mark}")
    return 0 if report.ok else 1


def _cmd_predict(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    geom = cfg.build_geometry()
    op = lattice.dft_symbol(geom)
    window = cfg.build_window()
    phi1, phi2 = cfg.build_test_functions()
    params = ExpansionParams.from_eta(window.eta, geom.M)
    moments = lattice.moment_tensors(geom)
    report = predictor.build_prediction_report(
        op,
        window,
        phi1,
        phi2,
        params,
        beta=int(cfg.ensemble["beta"]),
        moments=moments,
        tau=float(cfg.prediction["tau"]),
        tol=float(cfg.prediction["tol"]),
        n_cap=cfg.prediction["n_cap"],
    )
    print(report.to_json())
    return 0


def _cmd_audit(args) -> int:
    geom = lattice.build_geometry(args.d, args.L, args.W)
    op = lattice.dft_symbol(geom)
    gap = 4.0 / geom.M + (geom.W / geom.L) ** 2
    theta_min = 2.0 * math.asin(min(1.0, gap / 2.0)) * 1.05
    thetas = np.linspace(theta_min, math.pi, args.count)
    alphas = [complex(math.cos(t), math.sin(t)) for t in thetas]
    report = lattice.bound_audit(op, alphas, b_max=args.b_max)
    print(f"spectral floor margin c = {report.spectral_floor:.4f}")
    print(f"local decay constant (max over b) = {report.lclt_constant:.4f}")
    print("alpha_re,alpha_im,resolvent_norm_constant,max_entry_constant")
    for e in report.entries:
        print(
            f"{e.alpha.real:+.4f},{e.alpha.imag:+.4f},"
            f"{e.resolvent_norm_constant:.4f},{e.max_entry_constant:.4f}"
        )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(
                {
                    "spectral_floor": report.spectral_floor,
                    "lclt_constant": report.lclt_constant,
                    "entries": report.to_rows(),
                },
                f,
                indent=2,
            )
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bandlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment config")
    p_run.add_argument("config", help="path to the JSON config file")
    p_run.add_argument("--outdir", default="runs")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a config along one axis")
    p_sweep.add_argument("config")
    p_sweep.add_argument("axis", choices=["omega", "eta", "W", "L"])
    p_sweep.add_argument("values", help="comma-separated axis values")
    p_sweep.add_argument("--outdir", default="runs")
    p_sweep.add_argument("--point-workers", type=int, default=1)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_cmp = sub.add_parser("compare", help="z-scores of a run against its predictions")
    p_cmp.add_argument("config")
    p_cmp.add_argument("--outdir", default="runs")
    p_cmp.add_argument("--z-flag", type=float, default=3.0)
    p_cmp.set_defaults(func=_cmd_compare)

    p_pred = sub.add_parser("predict", help="predictions only, no sampling")
    p_pred.add_argument("config")
    p_pred.set_defaults(func=_cmd_predict)

    p_aud = sub.add_parser("audit", help="measured constants of the operator bounds")
    p_aud.add_argument("-d", type=int, default=1)
    p_aud.add_argument("-L", type=int, default=256)
    p_aud.add_argument("-W", type=int, default=8)
    p_aud.add_argument("--count", type=int, default=20)
    p_aud.add_argument("--b-max", type=int, default=None)
    p_aud.add_argument("--out", default=None)
    p_aud.set_defaults(func=_cmd_audit)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
