"""Torus geometry, band profiles, and the translation-invariant variance operator.

The variance operator S is a real symmetric matrix on the discrete torus,
determined by a single row S_{x0}.  Because S is translation invariant it is
diagonalized by the discrete Fourier transform; every derived quantity
(traces of powers, geometric resolvent sums, entry bounds) is computed from
the eigenvalue grid of that transform.
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "StepProfile",
    "CustomProfile",
    "TorusGeometry",
    "VarianceOperator",
    "MomentTensors",
    "AuditEntry",
    "AuditReport",
    "build_geometry",
    "variance_entry",
    "dft_symbol",
    "trace_power",
    "moment_tensors",
    "resolvent_entry",
    "bound_audit",
    "r2_scale",
    "load_profile",
    "export_symbol_csv",
]


# ---------------------------------------------------------------------------
# profiles


@dataclasses.dataclass(frozen=True)
class StepProfile:
    """Sharp band profile: indicator of 1 <= |x| <= W, scaled by 1/(M-1)."""

    kind: str = dataclasses.field(default="step", init=False)


@dataclasses.dataclass(frozen=True)
class CustomProfile:
    """Band profile sampled directly on lattice offsets.

    ``samples`` maps integer lattice offsets x (before periodic wrapping) to
    the nonnegative weight assigned to that offset.  The weight plays the
    role of f(x/W); evenness f(-x) = f(x) is required and checked when a
    geometry is built.
    """

    samples: tuple[tuple[tuple[int, ...], float], ...]
    kind: str = dataclasses.field(default="custom", init=False)

    @staticmethod
    def from_function(
        f: Callable[[np.ndarray], np.ndarray], d: int, W: int, radius: float = 1.5
    ) -> "CustomProfile":
        """Sample ``f`` at lattice offsets x with |x| <= radius*W (argument x/W)."""
        r = int(math.ceil(radius * W))
        axes = [np.arange(-r, r + 1)] * d
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        vals = np.asarray(f(pts / W), dtype=float).reshape(-1)
        samples = []
        for x, v in zip(pts, vals):
            if v != 0.0:
                samples.append((tuple(int(c) for c in x), float(v)))
        return CustomProfile(samples=tuple(samples))


BandProfile = StepProfile | CustomProfile


# ---------------------------------------------------------------------------
# geometry


def _signed_reps(L: int) -> np.ndarray:
    """Representatives of Z/L in [-L/2, L/2), in FFT index order."""
    r = np.arange(L)
    return np.where(r < (L + 1) // 2, r, r - L)


@dataclasses.dataclass(frozen=True, eq=False)
class TorusGeometry:
    """Discrete torus of side L in dimension d with a band of width W.

    ``row`` holds S_{x0} on the full torus in FFT index order; N = L**d is
    the site count, M the profile mass and ``iota`` = M/(M-1) the common row
    sum of S.
    """

    d: int
    L: int
    W: int
    profile: BandProfile
    N: int
    M: float
    iota: float
    row: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.L,) * self.d

    def signed_offset_grids(self) -> list[np.ndarray]:
        """Sparse, broadcastable coordinate grids of signed offsets."""
        reps = _signed_reps(self.L)
        return list(np.meshgrid(*([reps] * self.d), indexing="ij", sparse=True))

    def periodic_norm2(self, x: Sequence[int]) -> float:
        """Squared periodic Euclidean norm, minimized over Z^d shifts."""
        t = 0.0
        for c in x:
            r = c % self.L
            r = min(r, self.L - r)
            t += float(r) * float(r)
        return t


def _profile_row(d: int, L: int, W: int, profile: BandProfile) -> tuple[np.ndarray, float]:
    """Unnormalized profile weights on the torus and their total mass M."""
    if isinstance(profile, StepProfile):
        reps = _signed_reps(L).astype(float)
        grids = np.meshgrid(*([reps] * d), indexing="ij", sparse=True)
        norm2 = np.zeros((L,) * d)
        for g in grids:
            norm2 = norm2 + g * g
        weights = ((norm2 >= 1.0) & (norm2 <= float(W) * float(W))).astype(float)
    elif isinstance(profile, CustomProfile):
        weights = np.zeros((L,) * d)
        for offset, value in profile.samples:
            if len(offset) != d:
                raise ValueError(f"profile offset {offset} has wrong dimension (d={d})")
            if value < 0.0:
                raise ValueError(f"profile value at {offset} is negative")
            idx = tuple(int(c) % L for c in offset)
            weights[idx] += float(value)
        mirrored = weights[tuple(np.ix_(*[(-np.arange(L)) % L] * d))]
        if not np.allclose(weights, mirrored, rtol=0.0, atol=1e-12 * max(weights.max(), 1.0)):
            raise ValueError("custom profile is not even: f(-x) != f(x)")
    else:
        raise TypeError(f"unknown profile type {type(profile)!r}")
    return weights, float(weights.sum())


def build_geometry(d: int, L: int, W: int, profile: BandProfile | None = None) -> TorusGeometry:
    """Construct the torus geometry and the variance-operator row S_{x0}."""
    if profile is None:
        profile = StepProfile()
    if d < 1:
        raise ValueError(f"dimension d must be >= 1, got {d}")
    if L < 3:
        raise ValueError(f"side length L must be >= 3, got {L}")
    if W < 1:
        raise ValueError(f"band width W must be >= 1, got {W}")
    if 2 * W >= L:
        raise ValueError(f"band wraps onto itself: need 2*W < L, got W={W}, L={L}")
    weights, M = _profile_row(d, L, W, profile)
    if M < 2.0:
        raise ValueError(f"profile mass M={M} is below 2; band is degenerate")
    row = weights / (M - 1.0)
    row.setflags(write=False)
    return TorusGeometry(
        d=d, L=L, W=W, profile=profile, N=L**d, M=M, iota=M / (M - 1.0), row=row
    )


def _site_tuple(geom: TorusGeometry, x) -> tuple[int, ...]:
    if np.isscalar(x):
        x = (int(x),)
    t = tuple(int(c) for c in x)
    if len(t) != geom.d:
        raise ValueError(f"site {x} has wrong dimension (d={geom.d})")
    return t


def variance_entry(geom: TorusGeometry, x, y) -> float:
    """S_xy, read off the stored row via translation invariance."""
    xt, yt = _site_tuple(geom, x), _site_tuple(geom, y)
    idx = tuple((a - b) % geom.L for a, b in zip(xt, yt))
    return float(geom.row[idx])


# ---------------------------------------------------------------------------
# DFT symbol


@dataclasses.dataclass(frozen=True, eq=False)
class VarianceOperator:
    """The variance operator held as its DFT eigenvalue grid.

    ``symbol[p]`` is the eigenvalue lambda_p = sum_x exp(-2*pi*i*p.x/L) S_{x0},
    stored over the full dual torus in FFT index order.  lambda_0 equals the
    row sum iota exactly; all eigenvalues are real because the profile is even.
    """

    geometry: TorusGeometry
    symbol: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.geometry.shape

    def lambda_at(self, p) -> float:
        pt = _site_tuple(self.geometry, p)
        idx = tuple(c % self.geometry.L for c in pt)
        return float(self.symbol[idx])

    def min_eigenvalue(self) -> float:
        return float(self.symbol.min())

    def spectral_floor_margin(self) -> float:
        """Measured c > 0 such that min_p lambda_p >= -1 + c."""
        return 1.0 + self.min_eigenvalue()

    def top_multiplicity(self, rtol: float = 1e-9) -> int:
        lam = self.symbol
        top = lam.max()
        return int(np.count_nonzero(lam >= top - rtol * abs(top)))

    def row_from_symbol(self) -> np.ndarray:
        """Inverse transform back to S_{x0}; used for round-trip checks."""
        return np.fft.ifftn(self.symbol).real


def dft_symbol(geom: TorusGeometry) -> VarianceOperator:
    """Diagonalize S by the fast Fourier transform over the torus."""
    sym = np.fft.fftn(geom.row)
    imax = float(np.abs(sym.imag).max())
    if imax > 1e-10 * geom.iota:
        raise ValueError(
            f"symbol has imaginary part {imax:.3e}; profile is not even (construction bug)"
        )
    symbol = np.ascontiguousarray(sym.real)
    # p = 0 entry is the row sum; snap it to the exact identity value.
    origin = (0,) * geom.d
    if abs(symbol[origin] - geom.iota) > 1e-12 * geom.iota:
        raise ValueError("symbol at p=0 does not match the row-sum identity")
    symbol[origin] = geom.iota
    symbol.setflags(write=False)
    return VarianceOperator(geometry=geom, symbol=symbol)


def trace_power(op: VarianceOperator, b: int) -> float:
    """tr S^b = sum_p lambda_p^b."""
    if b < 1:
        raise ValueError(f"power b must be >= 1, got {b}")
    return float(np.sum(op.symbol**b))


# ---------------------------------------------------------------------------
# moment tensors


@dataclasses.dataclass(frozen=True)
class MomentTensors:
    """Second-moment matrix D of the profile and, for d = 2, the quartic Q."""

    d: int
    D: np.ndarray
    q: float | None

    def require_q(self) -> float:
        if self.q is None:
            raise ValueError(f"Q is defined only for d = 2 (got d = {self.d})")
        return self.q


def moment_tensors(geom: TorusGeometry) -> MomentTensors:
    """D_ij = (1/2) sum_x (x_i x_j / W^2) S_{x0}; Q for d = 2 only."""
    d, W = geom.d, float(geom.W)
    grids = geom.signed_offset_grids()
    D = np.empty((d, d))
    for i in range(d):
        for j in range(i, d):
            val = 0.5 * float(np.sum(geom.row * (grids[i] * grids[j]))) / (W * W)
            D[i, j] = val
            D[j, i] = val
    evals = np.linalg.eigvalsh(D)
    if evals.min() <= 0.0:
        raise ValueError(f"moment matrix D is not positive definite: eigenvalues {evals}")
    q = None
    if d == 2:
        Dinv = np.linalg.inv(D)
        u1 = grids[0] / W
        u2 = grids[1] / W
        quad = Dinv[0, 0] * u1 * u1 + 2.0 * Dinv[0, 1] * u1 * u2 + Dinv[1, 1] * u2 * u2
        q = float(np.sum(geom.row * quad * quad)) / 32.0
    return MomentTensors(d=d, D=D, q=q)


# ---------------------------------------------------------------------------
# geometric resolvent sums


def _partial_geometric(z: np.ndarray, cutoff: int) -> np.ndarray:
    """sum_{b=1..cutoff} z^b, elementwise, stable near z = 1."""
    z = np.asarray(z, dtype=complex)
    out = np.empty_like(z)
    at_one = z == 1.0
    zero = z == 0.0
    rest = ~(at_one | zero)
    out[at_one] = complex(cutoff)
    out[zero] = 0.0
    zr = z[rest]
    # 1 - z^c computed as -expm1(c*log z) to survive z close to 1
    out[rest] = zr * (-np.expm1(cutoff * np.log(zr))) / (1.0 - zr)
    return out


def resolvent_row(op: VarianceOperator, alpha: complex, cutoff: int) -> np.ndarray:
    """Row x -> Z(alpha*S)_{x0} with Z(x) = sum_{b=1..cutoff} x^b."""
    if cutoff < 1:
        raise ValueError(f"cutoff must be >= 1, got {cutoff}")
    zsym = _partial_geometric(alpha * op.symbol.astype(complex), cutoff)
    return np.fft.ifftn(zsym)


def resolvent_entry(op: VarianceOperator, alpha: complex, cutoff: int, x, y) -> complex:
    """Z(alpha*S)_xy via the DFT symbol and one inverse transform."""
    if abs(alpha) > 1.0 + 1e-12:
        raise ValueError(f"|alpha| must be <= 1, got {abs(alpha)}")
    row = resolvent_row(op, alpha, cutoff)
    xt, yt = _site_tuple(op.geometry, x), _site_tuple(op.geometry, y)
    idx = tuple((a - b) % op.geometry.L for a, b in zip(xt, yt))
    return complex(row[idx])


# ---------------------------------------------------------------------------
# bound audits


def r2_scale(d: int, s: float) -> float:
    """Dimension-dependent error scale R_2(s) = 1 + 1{d=1} s^(-1/2) + 1{d=2} |log s|."""
    if s <= 0.0:
        raise ValueError(f"R_2 requires s > 0, got {s}")
    out = 1.0
    if d == 1:
        out += s**-0.5
    elif d == 2:
        out += abs(math.log(s))
    return out


@dataclasses.dataclass(frozen=True)
class AuditEntry:
    alpha: complex
    resolvent_norm: float
    resolvent_norm_constant: float
    max_entry: float
    max_entry_constant: float


@dataclasses.dataclass(frozen=True)
class AuditReport:
    """Measured constants behind the resolvent and local-decay bounds.

    Each constant is the measured quantity divided by its predicted envelope,
    so boundedness of the constants across a sweep is the meaningful check.
    """

    d: int
    L: int
    W: int
    M: float
    spectral_floor: float
    entries: tuple[AuditEntry, ...]
    lclt_constant: float
    lclt_per_b: tuple[float, ...]

    def to_rows(self) -> list[dict]:
        rows = []
        for e in self.entries:
            rows.append(
                {
                    "alpha_re": e.alpha.real,
                    "alpha_im": e.alpha.imag,
                    "resolvent_norm": e.resolvent_norm,
                    "resolvent_norm_constant": e.resolvent_norm_constant,
                    "max_entry": e.max_entry,
                    "max_entry_constant": e.max_entry_constant,
                }
            )
        return rows


def admissible_alpha(op: VarianceOperator, alpha: complex) -> bool:
    geom = op.geometry
    gap = 4.0 / geom.M + (geom.W / geom.L) ** 2
    return abs(alpha) <= 1.0 + 1e-12 and abs(1.0 - alpha) >= gap * (1.0 - 1e-12)


def bound_audit(
    op: VarianceOperator, alphas: Iterable[complex], b_max: int | None = None
) -> AuditReport:
    """Measure the constants in the resolvent bounds and the local decay bound.

    For each admissible alpha the report holds the l_inf->l_inf norm of
    (1 - alpha*S)^(-1) against log(N)/(2 - |1 + alpha|) and the largest entry
    of S/(1 - alpha*S) against R_2(|1 - alpha|)/M.  Independently of alpha it
    measures sup_{xy} (iota^(-1) S^b)_{xy} * M * b^(d/2) for 1 <= b <= (L/W)^2.
    """
    geom = op.geometry
    lam = op.symbol.astype(complex)
    entries = []
    for alpha in alphas:
        alpha = complex(alpha)
        if not admissible_alpha(op, alpha):
            raise ValueError(
                f"alpha={alpha} violates |alpha|<=1 and |1-alpha| >= 4/M + (W/L)^2"
            )
        res_row = np.fft.ifftn(1.0 / (1.0 - alpha * lam))
        norm = float(np.abs(res_row).sum())
        norm_envelope = math.log(geom.N) / (2.0 - abs(1.0 + alpha))
        sr_row = np.fft.ifftn(lam / (1.0 - alpha * lam))
        max_entry = float(np.abs(sr_row).max())
        entry_envelope = r2_scale(geom.d, abs(1.0 - alpha)) / geom.M
        entries.append(
            AuditEntry(
                alpha=alpha,
                resolvent_norm=norm,
                resolvent_norm_constant=norm / norm_envelope,
                max_entry=max_entry,
                max_entry_constant=max_entry / entry_envelope,
            )
        )
    if b_max is None:
        b_max = int((geom.L / geom.W) ** 2)
    b_max = max(1, b_max)
    scaled = op.symbol / geom.iota
    power = np.ones_like(scaled)
    per_b = []
    for b in range(1, b_max + 1):
        power = power * scaled
        max_entry = float(np.abs(np.fft.ifftn(power)).max())
        per_b.append(max_entry * geom.M * b ** (geom.d / 2.0))
    return AuditReport(
        d=geom.d,
        L=geom.L,
        W=geom.W,
        M=geom.M,
        spectral_floor=op.spectral_floor_margin(),
        entries=tuple(entries),
        lclt_constant=max(per_b),
        lclt_per_b=tuple(per_b),
    )


# ---------------------------------------------------------------------------
# file interfaces


def load_profile(path) -> tuple[BandProfile, int]:
    """Load a profile description: {"kind": "step"|"custom", "W": int, "samples": [...]}."""
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    kind = data.get("kind")
    W = int(data["W"])
    if kind == "step":
        return StepProfile(), W
    if kind == "custom":
        samples = tuple(
            (tuple(int(c) for c in entry["offset"]), float(entry["value"]))
            for entry in data["samples"]
        )
        return CustomProfile(samples=samples), W
    raise ValueError(f"unknown profile kind {kind!r}")


def export_symbol_csv(op: VarianceOperator, path) -> None:
    """Write the eigenvalue grid as CSV rows (p-index columns, lambda value)."""
    geom = op.geometry
    reps = _signed_reps(geom.L)
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(f"p{i}" for i in range(geom.d)) + ",lambda\n")
        for idx in np.ndindex(*geom.shape):
            p = ",".join(str(int(reps[i])) for i in idx)
            f.write(f"{p},{float(op.symbol[idx])!r}\n")
