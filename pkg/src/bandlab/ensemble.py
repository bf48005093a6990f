"""Sampling of Hermitian band matrices and their nonbacktracking powers.

A sample is stored band by band: for every lattice offset delta in the
profile support we keep the full vector x -> H_{x,x+delta}.  Matrix-vector
products then cost O(N*M) via periodic rolls, and the Chebyshev three-term
recursion turns those products into nonbacktracking powers without ever
materializing a dense matrix.
"""

from __future__ import annotations

import dataclasses
import struct
from typing import Iterator

import numpy as np

from .lattice import StepProfile, TorusGeometry, _signed_reps, build_geometry

__all__ = [
    "BandMatrix",
    "sample",
    "apply",
    "dense",
    "nonbacktracking_direct",
    "chebyshev_nb",
    "nb_vector_stream",
    "save_matrix",
    "load_matrix",
]

DENSE_GUARD = 4096


@dataclasses.dataclass(frozen=True, eq=False)
class BandMatrix:
    """One Hermitian band-matrix sample.

    ``offsets`` lists the signed lattice offsets with nonzero variance, in a
    fixed sorted order; ``bands[k]`` is the grid x -> H_{x,x+offsets[k]}.
    Entries satisfy H = H* and |H_xy|^2 = S_xy exactly.
    """

    geometry: TorusGeometry
    beta: int
    seed: int
    offsets: tuple[tuple[int, ...], ...]
    bands: tuple[np.ndarray, ...]

    @property
    def N(self) -> int:
        return self.geometry.N


def _support_offsets(geom: TorusGeometry) -> list[tuple[int, ...]]:
    """Signed offsets delta with S_{delta,0} > 0, sorted lexicographically."""
    reps = _signed_reps(geom.L)
    nz = np.argwhere(geom.row > 0.0)
    offsets = [tuple(int(reps[i]) for i in idx) for idx in nz]
    offsets.sort()
    return offsets


def _is_canonical(offset: tuple[int, ...]) -> bool:
    for c in offset:
        if c > 0:
            return True
        if c < 0:
            return False
    return False  # zero offset handled separately


def sample(geom: TorusGeometry, beta: int, seed: int) -> BandMatrix:
    """Draw one band matrix of symmetry class beta with reproducible entries.

    Each unordered site pair gets its own pseudo-random draw from a
    counter-based Philox stream keyed by (seed, canonical offset index), so
    the sample is independent of evaluation order and identical seeds give
    bit-for-bit identical matrices.
    """
    if beta not in (1, 2):
        raise ValueError(f"symmetry class beta must be 1 or 2, got {beta}")
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    shape = geom.shape
    axes = tuple(range(geom.d))
    support = _support_offsets(geom)
    canonical = [o for o in support if _is_canonical(o)]
    has_diag = tuple([0] * geom.d) in support
    grids: dict[tuple[int, ...], np.ndarray] = {}
    for k, offset in enumerate(canonical):
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, k], dtype=np.uint64)))
        amp = np.sqrt(geom.row[tuple(c % geom.L for c in offset)])
        if beta == 1:
            a = rng.integers(0, 2, size=geom.N).astype(np.float64) * 2.0 - 1.0
            g = (amp * a).reshape(shape)
        else:
            a = np.exp(2j * np.pi * rng.random(geom.N))
            g = (amp * a).reshape(shape)
        grids[offset] = g
        minus = tuple(-c for c in offset)
        grids[minus] = np.conj(np.roll(g, shift=offset, axis=axes))
    if has_diag:
        # Hermiticity forces real diagonal entries; unit modulus leaves +-1.
        rng = np.random.Generator(
            np.random.Philox(key=np.array([seed, len(canonical)], dtype=np.uint64))
        )
        amp = np.sqrt(geom.row[(0,) * geom.d])
        a = rng.integers(0, 2, size=geom.N).astype(np.float64) * 2.0 - 1.0
        grids[tuple([0] * geom.d)] = (amp * a).reshape(shape)
    offsets = tuple(sorted(grids))
    bands = []
    for o in offsets:
        g = grids[o]
        g.setflags(write=False)
        bands.append(g)
    return BandMatrix(geometry=geom, beta=beta, seed=seed, offsets=offsets, bands=tuple(bands))


def apply(H: BandMatrix, v: np.ndarray) -> np.ndarray:
    """H @ v using the banded structure; accepts shape (N,) or (N, k)."""
    geom = H.geometry
    v = np.asarray(v)
    if v.shape[0] != geom.N:
        raise ValueError(f"vector length {v.shape[0]} does not match N={geom.N}")
    extra = v.shape[1:]
    grid = v.reshape(geom.shape + extra)
    axes = tuple(range(geom.d))
    out_dtype = np.result_type(v.dtype, *(g.dtype for g in H.bands))
    out = np.zeros(geom.shape + extra, dtype=out_dtype)
    for offset, g in zip(H.offsets, H.bands):
        shifted = np.roll(grid, shift=tuple(-c for c in offset), axis=axes)
        if extra:
            out += g.reshape(g.shape + (1,) * len(extra)) * shifted
        else:
            out += g * shifted
    return out.reshape((geom.N,) + extra)


def dense(H: BandMatrix) -> np.ndarray:
    """Materialize the full matrix; guarded to N <= 4096."""
    geom = H.geometry
    if geom.N > DENSE_GUARD:
        raise ValueError(f"dense materialization guarded to N <= {DENSE_GUARD}, got N={geom.N}")
    idx = np.arange(geom.N).reshape(geom.shape)
    axes = tuple(range(geom.d))
    out = np.zeros((geom.N, geom.N), dtype=complex)
    rows = idx.reshape(-1)
    for offset, g in zip(H.offsets, H.bands):
        cols = np.roll(idx, shift=tuple(-c for c in offset), axis=axes).reshape(-1)
        out[rows, cols] = g.reshape(-1)
    return out


def nonbacktracking_direct(H: BandMatrix, n: int) -> np.ndarray:
    """Nonbacktracking power H^(n) by direct path summation (oracle only).

    Dynamic programming over (previous site, current site) pairs enumerates
    every walk with x_i != x_{i+2}; no algebraic identity is used, which
    makes this the independent reference for ``chebyshev_nb``.
    """
    geom = H.geometry
    if n < 0:
        raise ValueError("order n must be >= 0")
    if n > 6:
        raise ValueError(f"direct nonbacktracking oracle limited to n <= 6, got {n}")
    if geom.N > DENSE_GUARD:
        raise ValueError(f"direct oracle guarded to N <= {DENSE_GUARD}, got N={geom.N}")
    Hd = dense(H)
    if n == 0:
        return np.eye(geom.N, dtype=complex)
    if n == 1:
        return Hd
    N = geom.N
    out = np.zeros((N, N), dtype=complex)
    for x0 in range(N):
        # T[p, c] = sum of weights of nonbacktracking walks x0 -> ... -> p -> c
        T = np.zeros((N, N), dtype=complex)
        T[x0, :] = Hd[x0, :]
        for _ in range(n - 1):
            colsum = T.sum(axis=0)
            T = (colsum[:, None] - T.T) * Hd
        out[x0, :] = T.sum(axis=0)
    return out


def chebyshev_nb(H: BandMatrix, n: int) -> np.ndarray:
    """H^(n) = U_n(H/2) - U_{n-2}(H/2)/(M-1) via the three-term recursion."""
    geom = H.geometry
    if n < 0:
        raise ValueError("order n must be >= 0")
    if geom.N > DENSE_GUARD:
        raise ValueError(f"dense Chebyshev power guarded to N <= {DENSE_GUARD}")
    Hd = dense(H)
    if n == 0:
        return np.eye(geom.N, dtype=complex)
    if n == 1:
        return Hd
    u_prev = np.eye(geom.N, dtype=complex)  # U_0(H/2)
    u_cur = Hd.copy()  # U_1(H/2) = H
    u_nm2 = u_prev
    for _ in range(2, n + 1):
        u_next = Hd @ u_cur - u_prev
        u_nm2 = u_prev
        u_prev, u_cur = u_cur, u_next
    return u_cur - u_nm2 / (geom.M - 1.0)


def nb_vector_stream(H: BandMatrix, v: np.ndarray, n_max: int) -> Iterator[np.ndarray]:
    """Yield H^(n) v for n = 0..n_max in O(n_max * N * M) total work."""
    if n_max < 0:
        raise ValueError("n_max must be >= 0")
    geom = H.geometry
    v = np.asarray(v, dtype=complex)
    yield v.copy()
    if n_max == 0:
        return
    u_prev = v  # U_0 v
    u_cur = apply(H, v)  # U_1 v
    yield u_cur.copy()
    inv = 1.0 / (geom.M - 1.0)
    for _ in range(2, n_max + 1):
        u_next = apply(H, u_cur) - u_prev  # U_n v
        yield u_next - inv * u_prev
        u_prev, u_cur = u_cur, u_next
    return


# ---------------------------------------------------------------------------
# binary export

_MAGIC = b"BNDM"
_VERSION = 1


def save_matrix(H: BandMatrix, path) -> None:
    """Write a sample in the documented binary layout.

    Layout (little endian): magic "BNDM", u32 version, u32 d, u32 L, u32 W,
    u32 beta, u64 seed, u32 number of offsets, then for each offset d i64
    coordinates, then the complex128 band grids in offset order (each N
    entries, C order).  Seeds normally make this file unnecessary.
    """
    geom = H.geometry
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(
            struct.pack(
                "<IIIIIQI",
                _VERSION,
                geom.d,
                geom.L,
                geom.W,
                H.beta,
                H.seed,
                len(H.offsets),
            )
        )
        for o in H.offsets:
            f.write(struct.pack(f"<{geom.d}q", *o))
        for g in H.bands:
            np.ascontiguousarray(g, dtype=np.complex128).tofile(f)


def load_matrix(path, geom: TorusGeometry | None = None) -> BandMatrix:
    """Read a sample written by ``save_matrix``; rebuilds geometry if needed."""
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError("not a band-matrix file")
        version, d, L, W, beta, seed, n_off = struct.unpack("<IIIIIQI", f.read(32))
        if version != _VERSION:
            raise ValueError(f"unsupported version {version}")
        if geom is None:
            geom = build_geometry(d, L, W, StepProfile())
        if (geom.d, geom.L, geom.W) != (d, L, W):
            raise ValueError("geometry does not match file header")
        offsets = []
        for _ in range(n_off):
            offsets.append(struct.unpack(f"<{d}q", f.read(8 * d)))
        bands = []
        for _ in range(n_off):
            g = np.fromfile(f, dtype=np.complex128, count=geom.N).reshape(geom.shape)
            g.setflags(write=False)
            bands.append(g)
    return BandMatrix(
        geometry=geom,
        beta=beta,
        seed=seed,
        offsets=tuple(tuple(int(c) for c in o) for o in offsets),
        bands=tuple(bands),
    )
