"""Experiment orchestration: configs, runs, sweeps, and comparisons.

A run is one (geometry, ensemble, window, kernels) configuration: sample R
replicas, estimate the mean densities and the normalized covariance, attach
the requested predictions, and persist everything under a directory named by
the config hash.  Sweeps repeat runs along one axis and emit long-format
tables ready for external plotting.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime
import hashlib
import json
import math
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import estimator, lattice, predictor
from .estimator import CorrelationEstimate, Window
from .kernels import ExpansionParams, TestFunction, make_test_function
from .lattice import CustomProfile, StepProfile

__all__ = [
    "ExperimentConfig",
    "RunRecord",
    "ComparisonReport",
    "StageError",
    "run",
    "sweep",
    "compare",
]


class StageError(RuntimeError):
    """Failure wrapper naming the pipeline stage that raised."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _require_keys(block: dict, allowed: set[str], where: str) -> None:
    unknown = set(block) - allowed
    if unknown:
        raise ValueError(f"unknown keys {sorted(unknown)} in config block {where!r}")


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description, loadable from a six-block JSON file."""

    geometry: dict
    ensemble: dict
    window: dict
    functions: dict
    method: dict
    prediction: dict

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        _require_keys(
            data,
            {"geometry", "ensemble", "window", "functions", "method", "prediction"},
            "<root>",
        )
        geo = dict(data["geometry"])
        _require_keys(geo, {"d", "L", "W", "profile"}, "geometry")
        geo.setdefault("profile", {"kind": "step"})
        ens = dict(data["ensemble"])
        _require_keys(ens, {"beta", "seed", "replicas"}, "ensemble")
        win = dict(data["window"])
        _require_keys(win, {"E1", "E2", "eta", "rho", "kappa"}, "window")
        win.setdefault("kappa", 0.05)
        fns = dict(data["functions"])
        _require_keys(fns, {"phi1", "phi2"}, "functions")
        met = dict(data.get("method", {}))
        _require_keys(met, {"mode", "n_max", "trace_mode", "probes", "workers", "store_replicas"}, "method")
        met.setdefault("mode", "exact")
        met.setdefault("trace_mode", "exact")
        met.setdefault("probes", 64)
        met.setdefault("workers", 1)
        met.setdefault("n_max", None)
        met.setdefault("store_replicas", True)
        pred = dict(data.get("prediction", {}))
        _require_keys(pred, {"forms", "tol", "n_cap", "tau"}, "prediction")
        pred.setdefault("forms", ["v_main", "theta"])
        pred.setdefault("tol", 1e-8)
        pred.setdefault("n_cap", None)
        pred.setdefault("tau", 0.1)
        cfg = ExperimentConfig(geometry=geo, ensemble=ens, window=win, functions=fns, method=met, prediction=pred)
        cfg.build_geometry()  # validate cross-field constraints eagerly
        cfg.build_window()
        cfg.build_test_functions()
        return cfg

    @staticmethod
    def from_file(path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as f:
            return ExperimentConfig.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry,
            "ensemble": self.ensemble,
            "window": self.window,
            "functions": self.functions,
            "method": self.method,
            "prediction": self.prediction,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- constructors for the underlying objects

    def build_geometry(self) -> lattice.TorusGeometry:
        prof_cfg = self.geometry["profile"]
        if prof_cfg.get("kind") == "step":
            profile: lattice.BandProfile = StepProfile()
        elif prof_cfg.get("kind") == "custom":
            profile = CustomProfile(
                samples=tuple(
                    (tuple(int(c) for c in s["offset"]), float(s["value"]))
                    for s in prof_cfg["samples"]
                )
            )
        else:
            raise ValueError(f"unknown profile kind {prof_cfg.get('kind')!r}")
        return lattice.build_geometry(
            int(self.geometry["d"]), int(self.geometry["L"]), int(self.geometry["W"]), profile
        )

    def resolution(self, M: float) -> float:
        if "eta" in self.window and self.window["eta"] is not None:
            return float(self.window["eta"])
        rho = float(self.window["rho"])
        if not 0.0 < rho < 1.0 / 3.0:
            raise ValueError(f"rho must lie in (0, 1/3), got {rho}")
        return float(M) ** (-rho)

    def build_window(self) -> Window:
        geom_m = self.build_geometry().M
        return Window(
            E1=float(self.window["E1"]),
            E2=float(self.window["E2"]),
            eta=self.resolution(geom_m),
            kappa=float(self.window["kappa"]),
        )

    def build_test_functions(self) -> tuple[TestFunction, TestFunction]:
        def build(cfg: dict) -> TestFunction:
            kind = cfg.get("kind")
            params = {k: v for k, v in cfg.items() if k != "kind"}
            return make_test_function(kind, **params)

        return build(self.functions["phi1"]), build(self.functions["phi2"])


def _environment_fingerprint() -> dict:
    import scipy

    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "platform": platform.platform(),
    }


@dataclasses.dataclass
class RunRecord:
    """Everything one run produced, as persisted on disk."""

    config: dict
    config_hash: str
    started: str
    finished: str
    y_pairs: np.ndarray | None
    estimates: list[dict]
    predictions: dict
    environment: dict
    run_dir: str
    reused: bool = False


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _load_existing(run_dir: Path, cfg: ExperimentConfig) -> RunRecord | None:
    marker = run_dir / "COMPLETE"
    if not marker.exists():
        return None
    with open(run_dir / "config.json", "r", encoding="utf-8") as f:
        stored = json.load(f)
    if ExperimentConfig.from_dict(stored).config_hash() != cfg.config_hash():
        raise ValueError(f"run directory {run_dir} holds a different config")
    with open(run_dir / "predictions.json", "r", encoding="utf-8") as f:
        predictions = json.load(f)
    estimates = []
    with open(run_dir / "estimates.csv", newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            estimates.append(row)
    ys = None
    replica_file = run_dir / "replicas" / "y_pairs.csv"
    if replica_file.exists():
        ys = np.loadtxt(replica_file, delimiter=",", skiprows=1).reshape(-1, 2)
    meta = json.loads((run_dir / "meta.json").read_text(encoding="utf-8"))
    return RunRecord(
        config=stored,
        config_hash=cfg.config_hash(),
        started=meta["started"],
        finished=meta["finished"],
        y_pairs=ys,
        estimates=estimates,
        predictions=predictions,
        environment=meta["environment"],
        run_dir=str(run_dir),
        reused=True,
    )


def run(config: ExperimentConfig | dict, outdir="runs") -> RunRecord:
    """Execute sampling, estimation, and predictions; persist under the config hash.

    Re-running with an identical config reuses the completed directory after
    verifying the stored hash.  On failure, partial results and a
    FAILED.<stage> marker are left behind and a StageError is raised.
    """
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    chash = config.config_hash()
    run_dir = Path(outdir) / f"run_{chash}"
    existing = _load_existing(run_dir, config)
    if existing is not None:
        return existing
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "replicas").mkdir(exist_ok=True)
    log_lines: list[str] = []
    started = _utc_now()

    def log(msg: str) -> None:
        log_lines.append(f"{_utc_now()} {msg}")

    def persist_failure(stage: str, err: Exception) -> None:
        log(f"FAILED at stage {stage}: {err}")
        (run_dir / "log.txt").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
        (run_dir / f"FAILED.{stage}").write_text(str(err) + "\n", encoding="utf-8")
        with open(run_dir / "config.json", "w", encoding="utf-8") as f:
            json.dump(config.to_dict(), f, indent=2, sort_keys=True)

    stage = "geometry"
    try:
        geom = config.build_geometry()
        op = lattice.dft_symbol(geom)
        window = config.build_window()
        phi1, phi2 = config.build_test_functions()
        params = ExpansionParams.from_eta(window.eta, geom.M)
        beta = int(config.ensemble["beta"])
        seed = int(config.ensemble["seed"])
        replicas = int(config.ensemble["replicas"])
        log(f"geometry d={geom.d} L={geom.L} W={geom.W} N={geom.N} M={geom.M}")
    except Exception as err:
        persist_failure(stage, err)
        raise StageError(stage, err) from err

    stage = "sampling"
    try:
        ys = estimator.mc_density_pairs(
            geom,
            beta,
            [(phi1, window.E1), (phi2, window.E2)],
            window.eta,
            replicas,
            seed,
            method=config.method["mode"],
            workers=int(config.method["workers"]),
            n_max=config.method["n_max"],
            trace_mode=config.method["trace_mode"],
            probes=int(config.method["probes"]),
        )
        method_label = "ExactDiag" if config.method["mode"] == "exact" else "Chebyshev"
        mean1 = CorrelationEstimate(
            value=float(ys[:, 0].mean()),
            stderr=estimator.batch_stderr(ys[:, 0]) if replicas > 1 else math.nan,
            nsamples=replicas,
            seed=seed,
            method=method_label,
        )
        mean2 = CorrelationEstimate(
            value=float(ys[:, 1].mean()),
            stderr=estimator.batch_stderr(ys[:, 1]) if replicas > 1 else math.nan,
            nsamples=replicas,
            seed=seed,
            method=method_label,
        )
        cov = (
            estimator.covariance_from_pairs(ys[:, 0], ys[:, 1], seed=seed, method=method_label)
            if replicas >= 16
            else None
        )
        log(f"sampling R={replicas} meanY=({mean1.value:.5f},{mean2.value:.5f})")
    except Exception as err:
        persist_failure(stage, err)
        raise StageError(stage, err) from err

    stage = "prediction"
    try:
        forms = config.prediction["forms"]
        predictions: dict[str, Any] = {}
        if "v_main" in forms or "theta" in forms:
            moments = lattice.moment_tensors(geom)
            report = predictor.build_prediction_report(
                op,
                window,
                phi1,
                phi2,
                params,
                beta,
                moments=moments,
                tau=float(config.prediction["tau"]),
                tol=float(config.prediction["tol"]),
                n_cap=config.prediction["n_cap"],
                mean_densities=(mean1.value, mean2.value),
            )
            lwd = float(geom.L * geom.W) ** geom.d
            predictions["v_main"] = report.v_main
            predictions["ratio_v_main"] = report.v_main_theta / lwd
            if report.theta is not None:
                predictions["theta"] = report.theta
                predictions["theta_general"] = report.theta_general
                predictions["ratio_theta"] = report.theta_general / lwd
                predictions["form"] = report.form
            predictions["constants"] = report.constants
            predictions["diagnostics"] = report.diagnostics
        if "wigner" in forms:
            form = "omega_zero" if window.omega == 0.0 else "omega_large"
            try:
                predictions["wigner_theta"] = predictor.wigner_theta(
                    geom.N, beta, window, phi1, phi2, form, tau=float(config.prediction["tau"])
                )
            except ValueError as e:
                predictions["wigner_theta_error"] = str(e)
        if "poisson" in forms:
            predictions["ratio_poisson"] = predictor.poisson_baseline(
                geom.N, phi1, phi2, window.eta, window.omega
            )
        log(f"predictions: {sorted(predictions)}")
    except Exception as err:
        persist_failure(stage, err)
        raise StageError(stage, err) from err

    stage = "persist"
    try:
        rows = []
        w_for_row = window
        rows.append(estimator.estimate_csv_row(geom, beta, w_for_row, phi1, phi2, mean1) | {"kind": "mean1"})
        rows.append(estimator.estimate_csv_row(geom, beta, w_for_row, phi1, phi2, mean2) | {"kind": "mean2"})
        if cov is not None:
            rows.append(estimator.estimate_csv_row(geom, beta, w_for_row, phi1, phi2, cov) | {"kind": "covariance"})
        with open(run_dir / "estimates.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=estimator.CSV_FIELDS + ["kind"])
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
        with open(run_dir / "predictions.json", "w", encoding="utf-8") as f:
            json.dump(predictions, f, indent=2, sort_keys=True, default=float)
        with open(run_dir / "config.json", "w", encoding="utf-8") as f:
            json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        if config.method["store_replicas"]:
            with open(run_dir / "replicas" / "y_pairs.csv", "w", encoding="utf-8") as f:
                f.write("y1,y2\n")
                for a, b in ys:
                    f.write(f"{float(a)!r},{float(b)!r}\n")
        finished = _utc_now()
        meta = {
            "started": started,
            "finished": finished,
            "environment": _environment_fingerprint(),
            "config_hash": chash,
        }
        (run_dir / "meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
        (run_dir / "log.txt").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
        (run_dir / "COMPLETE").write_text(chash + "\n", encoding="utf-8")
    except Exception as err:
        persist_failure(stage, err)
        raise StageError(stage, err) from err

    return RunRecord(
        config=config.to_dict(),
        config_hash=chash,
        started=started,
        finished=finished,
        y_pairs=ys,
        estimates=rows,
        predictions=predictions,
        environment=meta["environment"],
        run_dir=str(run_dir),
    )


# ---------------------------------------------------------------------------
# sweeps


def _config_with_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    data = json.loads(json.dumps(config.to_dict()))  # deep copy
    if axis == "omega":
        center = 0.5 * (float(data["window"]["E1"]) + float(data["window"]["E2"]))
        data["window"]["E1"] = center - value / 2.0
        data["window"]["E2"] = center + value / 2.0
    elif axis == "eta":
        data["window"]["eta"] = float(value)
        data["window"].pop("rho", None)
    elif axis == "W":
        data["geometry"]["W"] = int(value)
    elif axis == "L":
        data["geometry"]["L"] = int(value)
    else:
        raise ValueError(f"unknown sweep axis {axis!r}")
    return ExperimentConfig.from_dict(data)


def sweep(
    config: ExperimentConfig | dict,
    axis: str,
    values: Sequence[float],
    outdir="runs",
    point_workers: int = 1,
) -> list[dict]:
    """One run per axis value; emits a long CSV and a plot-data file.

    Per-point failures are recorded in the table and the sweep continues.
    When points run in parallel, each point's internal replica parallelism
    is forced to one so the total worker count stays at ``point_workers``.
    """
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    if axis not in ("omega", "eta", "W", "L"):
        raise ValueError(f"unknown sweep axis {axis!r}")

    def one(v):
        try:
            c = _config_with_axis(config, axis, v)
            if point_workers > 1:
                data = c.to_dict()
                data["method"]["workers"] = 1
                c = ExperimentConfig.from_dict(data)
            rec = run(c, outdir=outdir)
            covrow = next((r for r in rec.estimates if r.get("kind") == "covariance"), None)
            return {
                "axis": axis,
                "x": v,
                "mc_value": float(covrow["value"]) if covrow else math.nan,
                "mc_stderr": float(covrow["stderr"]) if covrow else math.nan,
                "v_main": rec.predictions.get("v_main", math.nan),
                "ratio_v_main": rec.predictions.get("ratio_v_main", math.nan),
                "theta": rec.predictions.get("theta", math.nan),
                "ratio_theta": rec.predictions.get("ratio_theta", math.nan),
                "run_dir": rec.run_dir,
                "error": "",
            }
        except Exception as err:  # per-point failure: record, continue
            return {
                "axis": axis,
                "x": v,
                "mc_value": math.nan,
                "mc_stderr": math.nan,
                "v_main": math.nan,
                "ratio_v_main": math.nan,
                "theta": math.nan,
                "ratio_theta": math.nan,
                "run_dir": "",
                "error": str(err),
            }

    if point_workers > 1:
        with ThreadPoolExecutor(max_workers=point_workers) as pool:
            rows = list(pool.map(one, values))
    else:
        rows = [one(v) for v in values]

    outpath = Path(outdir)
    outpath.mkdir(parents=True, exist_ok=True)
    fields = ["axis", "x", "mc_value", "mc_stderr", "v_main", "ratio_v_main", "theta", "ratio_theta", "run_dir", "error"]
    with open(outpath / f"sweep_{axis}.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    with open(outpath / f"plotdata_{axis}.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "mc_value", "mc_stderr", "v_main", "theta"])
        for r in rows:
            writer.writerow([r["x"], r["mc_value"], r["mc_stderr"], r["v_main"], r["theta"]])
    return rows


# ---------------------------------------------------------------------------
# comparison


@dataclasses.dataclass(frozen=True)
class ComparisonReport:
    rows: tuple[dict, ...]
    flagged: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.flagged


def compare(record: RunRecord, z_flag: float = 3.0) -> ComparisonReport:
    """z-scores of the measured covariance against every available prediction."""
    covrow = next((r for r in record.estimates if r.get("kind") == "covariance"), None)
    if covrow is None:
        raise ValueError("run record holds no covariance estimate")
    mc = float(covrow["value"])
    stderr = float(covrow["stderr"])
    rows = [{"prediction": "self", "predicted": mc, "z": 0.0, "flag": False}]
    flagged = []
    for key in ("ratio_v_main", "ratio_theta", "ratio_poisson"):
        if key not in record.predictions:
            continue
        pred = float(record.predictions[key])
        z = (mc - pred) / stderr if stderr > 0 else math.inf
        flag = abs(z) > z_flag
        rows.append({"prediction": key, "predicted": pred, "z": z, "flag": flag})
        if flag:
            flagged.append(key)
    return ComparisonReport(rows=tuple(rows), flagged=tuple(flagged))
