import math

import mpmath
import numpy as np
import pytest
from scipy import integrate
from scipy.linalg import expm

from bandlab import ensemble, kernels
from bandlab.kernels import (
    ExpansionParams,
    a_n,
    alpha_k,
    arcsin_uhp,
    gamma_n,
    gamma_tilde,
    load_test_function_csv,
    make_test_function,
    smoothed_gamma,
    smoothed_gamma_row,
)
from bandlab.lattice import build_geometry

CAUCHY = make_test_function("cauchy")
GAUSS = make_test_function("gaussian")


def quad_complex(f, a, b, **kw):
    re, _ = integrate.quad(lambda t: f(t).real, a, b, **kw)
    im, _ = integrate.quad(lambda t: f(t).imag, a, b, **kw)
    return re + 1j * im


class TestTestFunctions:
    @pytest.mark.parametrize("tf", [CAUCHY, GAUSS, make_test_function("bump", halfwidth=1.0)])
    def test_normalized_to_two_pi(self, tf):
        lo, hi = (-tf.support_halfwidth, tf.support_halfwidth) if tf.support_halfwidth else (-np.inf, np.inf)
        total, _ = integrate.quad(lambda e: float(tf(np.asarray(e))), lo, hi, limit=400)
        assert total == pytest.approx(2.0 * math.pi, abs=1e-8)

    def test_cauchy_values(self):
        assert float(CAUCHY(0.0)) == pytest.approx(2.0)
        assert float(CAUCHY.phi_hat(1.5)) == pytest.approx(math.exp(-1.5))

    def test_rescaled_kernel(self):
        eta = 0.05
        assert float(CAUCHY.phi_eta(0.0, eta)) == pytest.approx(2.0 / eta)

    def test_gaussian_pair(self):
        assert float(GAUSS(0.0)) == pytest.approx(math.sqrt(2.0 * math.pi))
        assert float(GAUSS.phi_hat(2.0)) == pytest.approx(math.exp(-2.0))

    def test_fourier_inversion(self):
        # phi(E) = int dt e^{-iEt} phi_hat(t) for both built-ins
        for tf in (CAUCHY, GAUSS):
            for E in (0.0, 0.7, -1.3):
                val = quad_complex(lambda t: np.exp(-1j * E * t) * tf.phi_hat(t), -40, 40, limit=300)
                assert val.real == pytest.approx(float(tf(E)), abs=1e-8)
                assert abs(val.imag) < 1e-9

    def test_custom_requires_fourier(self):
        with pytest.raises(ValueError, match="Fourier"):
            make_test_function("custom", value=lambda E: np.exp(-np.abs(E)), decay_q=2.0)

    def test_custom_normalizes(self):
        tf = make_test_function(
            "custom",
            value=lambda E: 5.0 * np.sqrt(2 * np.pi) * np.exp(-np.asarray(E) ** 2 / 2),
            fourier=lambda t: 5.0 * np.exp(-np.asarray(t) ** 2 / 2),
            decay_q=8.0,
        )
        assert float(np.asarray(tf.phi_hat(0.0))) == pytest.approx(1.0)

    def test_bump_compact_support(self):
        tf = make_test_function("bump", halfwidth=0.8)
        assert float(tf(0.81)) == 0.0
        assert float(tf(0.5)) > 0.0
        assert float(np.asarray(tf.phi_hat(0.0))) == pytest.approx(1.0, rel=1e-9)

    def test_csv_loader(self, tmp_path):
        e = np.linspace(-30, 30, 4001)
        t = np.linspace(-30, 30, 4001)
        pv = np.sqrt(2 * np.pi) * np.exp(-(e**2) / 2)
        hv = np.exp(-(t**2) / 2)
        fe, ft = tmp_path / "phi.csv", tmp_path / "phihat.csv"
        np.savetxt(fe, np.column_stack([e, pv]), delimiter=",")
        np.savetxt(ft, np.column_stack([t, hv]), delimiter=",")
        tf = load_test_function_csv(fe, ft, decay_q=8.0)
        assert float(tf(0.4)) == pytest.approx(float(GAUSS(0.4)), rel=1e-6)
        assert float(np.asarray(tf.phi_hat(0.3))) == pytest.approx(math.exp(-0.045), rel=1e-6)


class TestExpansionParams:
    def test_from_rho_constraints(self):
        p = ExpansionParams.from_rho(0.25, 1e4)
        assert p.in_regime
        assert 0 < p.rho < p.mu < 1 / 3
        assert 2 * p.delta < p.mu - p.rho < 3 * p.delta
        assert p.eta == pytest.approx(1e4**-0.25)

    def test_from_rho_rejects(self):
        with pytest.raises(ValueError):
            ExpansionParams.from_rho(0.4, 1e4)
        with pytest.raises(ValueError):
            ExpansionParams.from_rho(0.25, 1e4, mu=0.2)

    def test_from_eta_desk_scale_flagged(self):
        p = ExpansionParams.from_eta(0.15, 64.0)
        assert not p.in_regime
        assert p.rho == pytest.approx(math.log(1 / 0.15) / math.log(64.0))

    def test_from_eta_in_regime(self):
        p = ExpansionParams.from_eta(0.1, 1e4)
        assert p.in_regime and p.rho == pytest.approx(0.25)


class TestAlpha:
    def test_zero_time_limits(self):
        assert alpha_k(0, 0.0) == pytest.approx(1.0)
        for k in (1, 2, 5):
            assert abs(alpha_k(k, 0.0)) == 0.0

    def test_against_independent_bessel(self):
        # mpmath Bessel as the independent reference at (k, t) = (3, 5)
        k, t = 3, 5.0
        ref = 2.0 * (-1j) ** k * (k + 1) / t * complex(mpmath.besselj(k + 1, t))
        assert complex(alpha_k(k, t)) == pytest.approx(ref, rel=1e-12)

    def test_vectorized(self):
        t = np.array([0.0, 1.0, 5.0])
        out = alpha_k(2, t)
        assert out.shape == (3,)
        assert out[0] == 0.0


class TestAn:
    def test_zero_time(self):
        assert a_n(0, 0.0, 10.0) == pytest.approx(1.0)
        for n in (1, 2, 7):
            assert abs(a_n(n, 0.0, 10.0)) == 0.0

    def test_k_sum_against_mpmath(self):
        # direct high-precision k-sum at modest order
        n, t, M = 2, 4.0, 6.0
        ref = sum(
            2.0 * (-1j) ** (n + 2 * k) * (n + 2 * k + 1) / t * complex(mpmath.besselj(n + 2 * k + 1, t)) / (M - 1) ** k
            for k in range(60)
        )
        assert complex(a_n(n, t, M)) == pytest.approx(ref, rel=1e-12)

    def test_table_matches_scalar(self):
        t = np.linspace(0.0, 30.0, 7)
        table = kernels.a_n_table(5, t, 25.0)
        for n in range(6):
            ref = a_n(n, t, 25.0)
            assert np.abs(table[n] - ref).max() < 1e-12

    def test_propagator_expansion(self):
        # e^{-itH/2} = sum_n a_n(t) H^(n) on a small sample
        g = build_geometry(1, 32, 3)
        H = ensemble.sample(g, 2, seed=11)
        t = 5.0
        target = expm(-0.5j * t * ensemble.dense(H))
        acc = np.zeros_like(target)
        for n in range(61):
            acc += complex(a_n(n, t, g.M)) * ensemble.chebyshev_nb(H, n)
        assert np.abs(acc - target).max() < 1e-8


class TestGamma:
    def test_closed_form_values(self):
        # values pinned by the quadrature oracle below, at E = 0, M = 4
        assert gamma_n(0, 0.0, 4.0) == pytest.approx(1.5)
        assert gamma_n(1, 0.0, 4.0) == pytest.approx(-1.5j)

    def test_rejects_lower_half_plane(self):
        with pytest.raises(ValueError):
            gamma_n(0, 0.3 - 0.1j, 10.0)
        with pytest.raises(ValueError):
            arcsin_uhp(0.5 - 1e-3j)

    @pytest.mark.parametrize("n,E,M", [(0, 0.1j, 4.0), (4, 0.3 + 0.1j, 100.0), (7, -0.5 + 0.2j, 30.0)])
    def test_quadrature_oracle(self, n, E, M):
        # gamma_n is defined as the damped half-line transform of a_n
        val = quad_complex(lambda t: np.exp(1j * E * t) * a_n(n, t, M), 0.0, 500.0, limit=3000)
        assert complex(gamma_n(n, E, M)) == pytest.approx(val, rel=1e-7)


class TestSmoothedGamma:
    def test_cauchy_shift_identity(self):
        params = ExpansionParams.from_eta(0.1, 1e4)
        for n in (0, 3, 12):
            shifted = gamma_n(n, 0.25 + 0.1j, 1e4)
            direct = smoothed_gamma(n, 0.25, params, CAUCHY, 1e4, force_quadrature=True)
            assert direct == pytest.approx(shifted, rel=1e-8)
            fast = smoothed_gamma(n, 0.25, params, CAUCHY, 1e4)
            assert fast == shifted

    def test_gaussian_brute_riemann(self):
        params = ExpansionParams.from_eta(0.1, 1e4)
        got = smoothed_gamma(0, 0.0, params, GAUSS, 1e4)
        ts = np.arange(0.0, 60.0, 1e-4) + 5e-5
        brute = np.sum(np.exp(-((0.1 * ts) ** 2) / 2) * kernels.a_n_table(0, ts, 1e4)[0] * 1e-4)
        assert got == pytest.approx(brute, abs=1e-6)

    def test_decay_with_order(self):
        # coefficient at eta*n = 10 falls below 1e-3 of the n = 0 value
        params = ExpansionParams.from_eta(0.1, 1e4)
        row = smoothed_gamma_row(100, 0.2, params, GAUSS, 1e4)
        assert abs(row[100]) < 1e-3 * abs(row[0])

    def test_requires_bulk_energy(self):
        params = ExpansionParams.from_eta(0.1, 1e4)
        with pytest.raises(ValueError):
            smoothed_gamma(0, 1.2, params, GAUSS, 1e4)

    def test_derivative_matches_weighted_integral(self):
        # d/dE of the coefficient equals the t-weighted transform
        params = ExpansionParams.from_eta(0.2, 1e3)
        E, h = 0.1, 1e-5
        fd = (smoothed_gamma(3, E + h, params, GAUSS, 1e3) - smoothed_gamma(3, E - h, params, GAUSS, 1e3)) / (2 * h)
        ref = quad_complex(
            lambda t: 1j * t * np.exp(1j * E * t) * np.exp(-((0.2 * t) ** 2) / 2) * a_n(3, t, 1e3),
            0.0,
            40.0,
            limit=400,
        )
        assert fd == pytest.approx(ref, rel=1e-4)


class TestGammaTilde:
    def test_matches_brute_force_on_cut_interval(self):
        # independent Riemann oracle of the truncated integral
        params = ExpansionParams(eta=1e4**-0.25, rho=0.25, mu=0.30, delta=0.02, in_regime=True)
        T = params.t_truncation(1e4)
        for n in (0, 17):
            tilde = gamma_tilde(n, 0.1, params, GAUSS, 1e4)
            ts = np.arange(0.0, T, 2e-5) + 1e-5
            brute = np.sum(
                np.exp(1j * 0.1 * ts)
                * np.exp(-((params.eta * ts) ** 2) / 2)
                * kernels.a_n_table(n, ts, 1e4)[n]
                * 2e-5
            )
            assert tilde == pytest.approx(brute, abs=2e-6)

    def test_truncation_gap_bounded_by_window_tail(self):
        # the omitted tail beyond t = M^(rho+delta) is controlled by the
        # Fourier window mass past the cut; at desk scale eta*T = M^delta
        # is O(1), so the gap is ~1e-3 rather than the asymptotic target
        # (see the decisions ledger)
        M = 1e4
        params = ExpansionParams(eta=M**-0.25, rho=0.25, mu=0.30, delta=0.02, in_regime=True)
        T = params.t_truncation(M)
        envelope = 2.5 * integrate.quad(
            lambda t: math.exp(-((params.eta * t) ** 2) / 2), T, np.inf
        )[0]
        for n in (0, 17, 100):
            tilde = gamma_tilde(n, 0.1, params, GAUSS, M)
            full = smoothed_gamma(n, 0.1, params, GAUSS, M)
            assert abs(tilde - full) <= envelope
            assert abs(tilde - full) < 1e-2

    def test_cauchy_tail_envelope(self):
        params = ExpansionParams.from_eta(0.1, 1e4)
        T = params.t_truncation(1e4)
        tilde = gamma_tilde(2, 0.3, params, CAUCHY, 1e4)
        full = smoothed_gamma(2, 0.3, params, CAUCHY, 1e4, force_quadrature=True)
        envelope = (2.0 / params.eta) * math.exp(-params.eta * T)
        assert abs(tilde - full) <= envelope

    def test_zero_truncation_empty(self):
        params = ExpansionParams.from_eta(0.1, 1e4)
        row = smoothed_gamma_row(3, 0.1, params, GAUSS, 1e4, t_max=0.0)
        assert np.abs(row).max() == 0.0


class TestMatrixReconstruction:
    @pytest.mark.parametrize("tf,n_max", [(CAUCHY, 320), (GAUSS, 60)])
    def test_density_matrix_function(self, tf, n_max):
        # sum_n H^(n) 2Re(psi^eta*gamma_n)(E) reproduces phi^eta(H/2 - E)
        g = build_geometry(1, 128, 4)
        H = ensemble.sample(g, 2, seed=3)
        eta, E = 0.25, 0.1
        params = ExpansionParams.from_eta(eta, g.M)
        evals, vecs = np.linalg.eigh(ensemble.dense(H))
        target = (vecs * tf.phi_eta(evals / 2.0 - E, eta)) @ vecs.conj().T
        row = smoothed_gamma_row(n_max, E, params, tf, g.M)
        acc = np.zeros_like(target)
        for n, vec_mat in enumerate(_nb_matrices(H, n_max)):
            acc += 2.0 * row[n].real * vec_mat
        assert np.abs(acc - target).max() < 1e-6

    def test_assembled_imaginary_part_vanishes(self):
        g = build_geometry(1, 64, 4)
        H = ensemble.sample(g, 2, seed=4)
        params = ExpansionParams.from_eta(0.3, g.M)
        row = smoothed_gamma_row(50, 0.0, params, GAUSS, g.M)
        total = 0.0 + 0.0j
        for n, mat in enumerate(_nb_matrices(H, 50)):
            total += 2.0 * row[n].real * np.trace(mat)
        assert abs(total.imag) < 1e-10 * max(1.0, abs(total.real))


def _nb_matrices(H, n_max):
    geom = H.geometry
    Hd = ensemble.dense(H)
    eye = np.eye(geom.N, dtype=complex)
    u_prev, u_cur = eye, Hd.copy()
    yield eye
    if n_max == 0:
        return
    yield Hd
    inv = 1.0 / (geom.M - 1.0)
    for _ in range(2, n_max + 1):
        u_next = Hd @ u_cur - u_prev
        yield u_next - inv * u_prev
        u_prev, u_cur = u_cur, u_next
