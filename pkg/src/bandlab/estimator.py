"""Monte Carlo measurement of smoothed spectral densities and their covariance.

Per replica the smoothed density Y = (1/N) tr phi^eta(H/2 - E) is evaluated
either from a dense eigendecomposition (exact, guarded in size) or from the
nonbacktracking trace expansion.  Covariances of per-sample Y pairs are
normalized by the product of means; error bars come from batch means so the
heavy-tailed summands at small eta do not fool the estimate.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

from . import ensemble
from .ensemble import BandMatrix, DENSE_GUARD
from .kernels import ExpansionParams, TestFunction, smoothed_gamma_row
from .lattice import TorusGeometry

__all__ = [
    "Window",
    "CorrelationEstimate",
    "DensityCurve",
    "smoothed_density_exact",
    "smoothed_density_from_eigs",
    "smoothed_density_chebyshev",
    "nb_traces",
    "batch_stderr",
    "mean_density",
    "mc_density_pairs",
    "covariance_from_pairs",
    "mc_covariance",
    "poisson_mc_covariance",
    "estimate_csv_row",
    "write_estimates_csv",
    "write_config_sidecar",
]

N_BATCHES = 8


@dataclasses.dataclass(frozen=True)
class Window:
    """Pair of energies inside the bulk with resolution eta.

    E1 <= E2 is enforced by swapping; both must stay kappa away from the
    spectral edges +-1.
    """

    E1: float
    E2: float
    eta: float
    kappa: float = 0.05

    def __post_init__(self):
        if self.E2 < self.E1:
            lo, hi = self.E2, self.E1
            object.__setattr__(self, "E1", lo)
            object.__setattr__(self, "E2", hi)
        if self.eta <= 0.0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        lim = 1.0 - self.kappa
        for e in (self.E1, self.E2):
            if not -lim <= e <= lim:
                raise ValueError(
                    f"energy {e} outside [-1+kappa, 1-kappa] with kappa={self.kappa}"
                )

    @property
    def E(self) -> float:
        return 0.5 * (self.E1 + self.E2)

    @property
    def omega(self) -> float:
        return self.E2 - self.E1


@dataclasses.dataclass(frozen=True)
class CorrelationEstimate:
    """A Monte Carlo statistic with its batch-means standard error."""

    value: float
    stderr: float
    nsamples: int
    seed: int
    method: str

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"estimate value {self.value} is not finite")
        if math.isfinite(self.stderr) and self.stderr < 0.0:
            raise ValueError("stderr must be nonnegative")


def _replica_seed(seed: int, replica: int) -> int:
    """SplitMix64-style mix of (seed, replica); stable across platforms."""
    z = (seed + (replica + 1) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def batch_stderr(values: np.ndarray) -> float:
    """Standard error of the mean from >= 8 contiguous batches."""
    r = values.shape[0]
    if r < 2:
        return math.nan
    if r < 2 * N_BATCHES:
        return float(values.std(ddof=1) / math.sqrt(r))
    means = np.array([chunk.mean() for chunk in np.array_split(values, N_BATCHES)])
    return float(means.std(ddof=1) / math.sqrt(N_BATCHES))


# ---------------------------------------------------------------------------
# single-sample densities


def half_spectrum(H: BandMatrix) -> np.ndarray:
    """Eigenvalues of H/2 via a dense decomposition (guarded in size)."""
    if H.N > DENSE_GUARD:
        raise ValueError(f"exact diagonalization guarded to N <= {DENSE_GUARD}, got {H.N}")
    return np.linalg.eigvalsh(ensemble.dense(H)) / 2.0


def smoothed_density_from_eigs(eigs: np.ndarray, phi: TestFunction, eta: float, E: float) -> float:
    return float(np.mean(phi.phi_eta(eigs - E, eta)))


def smoothed_density_exact(H: BandMatrix, phi: TestFunction, eta: float, E: float) -> float:
    """Y = (1/N) sum_i phi^eta(lambda_i - E) over the spectrum of H/2."""
    return smoothed_density_from_eigs(half_spectrum(H), phi, eta, E)


def nb_traces(
    H: BandMatrix,
    n_max: int,
    trace_mode: str = "exact",
    probes: int = 64,
    probe_seed: int = 0,
    block: int = 256,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Traces tr H^(n) for n = 0..n_max.

    "exact" sweeps identity columns in blocks (N*n_max matrix-vector budget);
    "probes" uses Hutchinson estimation with Rademacher +-1 vectors and
    returns a per-order standard error in the second slot.
    """
    N = H.N
    if trace_mode == "exact":
        traces = np.zeros(n_max + 1, dtype=complex)
        for start in range(0, N, block):
            cols = np.arange(start, min(start + block, N))
            v = np.zeros((N, cols.size))
            v[cols, np.arange(cols.size)] = 1.0
            for n, vec in enumerate(ensemble.nb_vector_stream(H, v, n_max)):
                traces[n] += vec[cols, np.arange(cols.size)].sum()
        return traces.real, None
    if trace_mode == "probes":
        if probes < 8:
            raise ValueError(f"stochastic trace needs at least 8 probes, got {probes}")
        rng = np.random.Generator(
            np.random.Philox(key=np.array([probe_seed & 0xFFFFFFFFFFFFFFFF, 0xFEED], dtype=np.uint64))
        )
        z = rng.integers(0, 2, size=(N, probes)).astype(float) * 2.0 - 1.0
        quad = np.zeros((n_max + 1, probes))
        for n, vec in enumerate(ensemble.nb_vector_stream(H, z, n_max)):
            quad[n] = np.einsum("ij,ij->j", z, vec.real)
        traces = quad.mean(axis=1)
        stderr = quad.std(axis=1, ddof=1) / math.sqrt(probes)
        return traces, stderr
    raise ValueError(f"unknown trace mode {trace_mode!r}")


@dataclasses.dataclass(frozen=True)
class DensityCurve:
    """Smoothed densities over a list of energies, with expansion diagnostics."""

    energies: tuple[float, ...]
    values: np.ndarray
    n_max: int
    truncation_estimate: float
    trace_stderr: np.ndarray | None


def _coefficient_rows(
    phi: TestFunction,
    params: ExpansionParams,
    E_list: Sequence[float],
    n_max: int,
    M: float,
    tol: float,
) -> np.ndarray:
    rows = np.empty((len(E_list), n_max + 1), dtype=complex)
    for i, E in enumerate(E_list):
        rows[i] = smoothed_gamma_row(n_max, E, params, phi, M, tol=tol)
    return rows


def _coefficient_tail(coeffs: np.ndarray, eta: float) -> float:
    """Extrapolated envelope sum of the coefficient magnitudes beyond n_max.

    Fitted on |complex coefficients|, which decay smoothly in n; the real
    parts used in the density sum oscillate underneath this envelope.
    """
    tail_len = max(8, int(2.0 / eta))
    window = np.abs(coeffs[..., -min(tail_len, coeffs.shape[-1]) :]).max(axis=0)
    window = window[window > 0.0]
    if window.size < 4:
        return 0.0
    n_idx = np.arange(window.size, dtype=float)
    slope, intercept = np.polyfit(n_idx, np.log(window), 1)
    rho = math.exp(min(slope, -1e-12))
    amp = 3.0 * math.exp(intercept) * rho**window.size
    return 2.0 * amp * rho / (1.0 - rho)


def smoothed_density_chebyshev(
    H: BandMatrix,
    phi: TestFunction,
    params: ExpansionParams,
    E_list: Sequence[float],
    n_max: int,
    trace_mode: str = "exact",
    probes: int = 64,
    probe_seed: int = 0,
    rtol: float | None = None,
) -> DensityCurve:
    """Y(E) = (1/N) sum_n 2 Re(psi^eta * gamma_n)(E) tr H^(n), coefficients shared over E."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    geom = H.geometry
    coeffs = _coefficient_rows(phi, params, E_list, n_max, geom.M, tol=1e-10)
    traces, tr_err = nb_traces(H, n_max, trace_mode=trace_mode, probes=probes, probe_seed=probe_seed)
    values = (2.0 * coeffs.real) @ traces / geom.N
    # crude scale for the neglected orders: coefficient envelope times the
    # trace magnitude trend of the computed range
    tr_scale = float(np.abs(traces[max(1, n_max // 2) :]).max()) if n_max >= 2 else abs(traces[-1])
    tail = _coefficient_tail(coeffs, params.eta) * tr_scale / geom.N
    if rtol is not None:
        scale = float(np.abs(values).max())
        if tail > rtol * max(scale, 1e-300):
            raise RuntimeError(
                f"truncation estimate {tail:.3e} exceeds requested tolerance "
                f"{rtol:.1e} * {scale:.3e}; increase n_max"
            )
    return DensityCurve(
        energies=tuple(float(e) for e in E_list),
        values=values,
        n_max=n_max,
        truncation_estimate=tail,
        trace_stderr=tr_err,
    )


# ---------------------------------------------------------------------------
# Monte Carlo drivers


def _default_n_max(phi: TestFunction, eta: float, tol: float = 1e-8) -> int:
    if phi.is_cauchy:
        return int(math.ceil(math.log(2.0 / (eta * tol)) / eta))
    return int(math.ceil(math.sqrt(2.0 * math.log(1.0 / tol)) / eta * 1.5))


def mc_density_pairs(
    geom: TorusGeometry,
    beta: int,
    observables: Sequence[tuple[TestFunction, float]],
    eta: float,
    R: int,
    seed: int,
    method: str = "exact",
    workers: int = 1,
    n_max: int | None = None,
    trace_mode: str = "exact",
    probes: int = 64,
) -> np.ndarray:
    """Per-replica smoothed densities for a shared list of (phi, E) observables.

    Every replica r uses an independent matrix sample keyed by (seed, r);
    with method "exact" each replica is diagonalized once and evaluated at
    every observable, so multi-window estimates share samples.
    Returns an array of shape (R, len(observables)).
    """
    if method not in ("exact", "chebyshev"):
        raise ValueError(f"unknown method {method!r}")
    params = ExpansionParams.from_eta(eta, geom.M)
    if n_max is None:
        n_max = max(_default_n_max(phi, eta) for phi, _ in observables)
    coeff_cache: dict[int, np.ndarray] = {}
    if method == "chebyshev":
        for i, (phi, E) in enumerate(observables):
            coeff_cache[i] = 2.0 * smoothed_gamma_row(n_max, E, params, phi, geom.M, tol=1e-10).real

    def one(r: int) -> np.ndarray:
        H = ensemble.sample(geom, beta, _replica_seed(seed, r))
        out = np.empty(len(observables))
        if method == "exact":
            eigs = half_spectrum(H)
            for i, (phi, E) in enumerate(observables):
                out[i] = smoothed_density_from_eigs(eigs, phi, eta, E)
        else:
            traces, _ = nb_traces(H, n_max, trace_mode=trace_mode, probes=probes, probe_seed=_replica_seed(seed, r) ^ 0xA5)
            for i in range(len(observables)):
                out[i] = float(coeff_cache[i] @ traces) / geom.N
        return out

    ys = np.empty((R, len(observables)))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for r, row in zip(range(R), pool.map(one, range(R))):
                ys[r] = row
    else:
        for r in range(R):
            ys[r] = one(r)
    return ys


def mean_density(
    geom: TorusGeometry,
    beta: int,
    phi: TestFunction,
    eta: float,
    E: float,
    R: int,
    seed: int,
    method: str = "exact",
    workers: int = 1,
) -> CorrelationEstimate:
    """Monte Carlo mean of the smoothed density over R independent samples."""
    ys = mc_density_pairs(geom, beta, [(phi, E)], eta, R, seed, method=method, workers=workers)[:, 0]
    value = float(np.sum(ys) / R)
    stderr = batch_stderr(ys) if R > 1 else math.nan
    return CorrelationEstimate(
        value=value,
        stderr=stderr,
        nsamples=R,
        seed=seed,
        method="ExactDiag" if method == "exact" else "Chebyshev",
    )


def covariance_from_pairs(
    y1: np.ndarray, y2: np.ndarray, seed: int = 0, method: str = "ExactDiag"
) -> CorrelationEstimate:
    """Normalized covariance cov(Y1, Y2)/(mean(Y1) mean(Y2)) from per-sample pairs.

    The covariance uses sample-mean subtraction with Bessel correction; the
    standard error is the batch-means spread of the per-batch normalized
    ratios.
    """
    y1 = np.asarray(y1, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    if y1.shape != y2.shape or y1.ndim != 1:
        raise ValueError("need two aligned 1-d arrays of per-sample values")
    r = y1.size
    if r < 16:
        raise ValueError(f"covariance estimation needs R >= 16 samples, got {r}")
    m1, m2 = float(np.mean(y1)), float(np.mean(y2))
    denom = m1 * m2
    if denom <= 0.0:
        raise ValueError(f"non-positive denominator estimate {denom}; cannot normalize")
    cov = float(np.sum((y1 - m1) * (y2 - m2)) / (r - 1))
    value = cov / denom

    def batch_ratio(a: np.ndarray, b: np.ndarray) -> float:
        ma, mb = a.mean(), b.mean()
        c = np.sum((a - ma) * (b - mb)) / (a.size - 1)
        return float(c / (ma * mb))

    ratios = np.array(
        [
            batch_ratio(a, b)
            for a, b in zip(np.array_split(y1, N_BATCHES), np.array_split(y2, N_BATCHES))
        ]
    )
    stderr = float(ratios.std(ddof=1) / math.sqrt(N_BATCHES))
    return CorrelationEstimate(value=value, stderr=stderr, nsamples=r, seed=seed, method=method)


def mc_covariance(
    geom: TorusGeometry,
    beta: int,
    phi1: TestFunction,
    phi2: TestFunction,
    window: Window,
    R: int,
    seed: int,
    method: str = "exact",
    workers: int = 1,
    n_max: int | None = None,
    sampler: Callable[[int], np.ndarray] | None = None,
) -> CorrelationEstimate:
    """Normalized density-density covariance at the window's two energies.

    Both densities of a pair come from the same sample.  ``sampler`` is a
    testing hook mapping a replica index to the (Y1, Y2) pair directly.
    """
    if R < 16:
        raise ValueError(f"mc_covariance needs R >= 16, got {R}")
    if sampler is not None:
        ys = np.array([sampler(r) for r in range(R)], dtype=float)
    else:
        ys = mc_density_pairs(
            geom,
            beta,
            [(phi1, window.E1), (phi2, window.E2)],
            window.eta,
            R,
            seed,
            method=method,
            workers=workers,
            n_max=n_max,
        )
    label = "ExactDiag" if method == "exact" else "Chebyshev"
    return covariance_from_pairs(ys[:, 0], ys[:, 1], seed=seed, method=label)


def poisson_mc_covariance(
    N: int,
    phi1: TestFunction,
    phi2: TestFunction,
    window: Window,
    R: int,
    seed: int,
    halfwidth: float | None = None,
) -> CorrelationEstimate:
    """Same normalized covariance for a stationary Poisson process of intensity N.

    Points are thrown on an interval wide enough that the kernels at both
    energies have decayed; used as the independent check of the Poisson
    baseline formula.
    """
    eta = window.eta
    if halfwidth is None:
        reach = 0.0
        for tf in (phi1, phi2):
            reach = max(reach, tf.support_halfwidth if tf.support_halfwidth else 40.0)
        halfwidth = max(abs(window.E1), abs(window.E2)) + eta * reach + 5.0 * eta
    ys = np.empty((R, 2))
    mean_count = 2.0 * halfwidth * N
    for r in range(R):
        rng = np.random.Generator(
            np.random.Philox(key=np.array([_replica_seed(seed, r), 0x9015], dtype=np.uint64))
        )
        k = rng.poisson(mean_count)
        pts = rng.uniform(-halfwidth, halfwidth, size=k)
        ys[r, 0] = float(np.sum(phi1.phi_eta(pts - window.E1, eta))) / N
        ys[r, 1] = float(np.sum(phi2.phi_eta(pts - window.E2, eta))) / N
    return covariance_from_pairs(ys[:, 0], ys[:, 1], seed=seed, method="Poisson")


# ---------------------------------------------------------------------------
# emission


def estimate_csv_row(
    geom: TorusGeometry,
    beta: int,
    window: Window,
    phi1: TestFunction,
    phi2: TestFunction,
    est: CorrelationEstimate,
) -> dict:
    return {
        "d": geom.d,
        "L": geom.L,
        "W": geom.W,
        "beta": beta,
        "eta": window.eta,
        "E1": window.E1,
        "E2": window.E2,
        "phi1": phi1.kind,
        "phi2": phi2.kind,
        "R": est.nsamples,
        "value": est.value,
        "stderr": est.stderr,
        "method": est.method,
        "seed": est.seed,
    }


CSV_FIELDS = [
    "d", "L", "W", "beta", "eta", "E1", "E2",
    "phi1", "phi2", "R", "value", "stderr", "method", "seed",
]


def write_estimates_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in CSV_FIELDS})


def write_config_sidecar(path, config: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config, f, indent=2, sort_keys=True)
        f.write("\n")
