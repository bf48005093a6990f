import numpy as np
import pytest

from bandlab import ensemble
from bandlab.ensemble import (
    apply,
    chebyshev_nb,
    dense,
    load_matrix,
    nb_vector_stream,
    nonbacktracking_direct,
    sample,
    save_matrix,
)
from bandlab.lattice import CustomProfile, build_geometry, variance_entry


@pytest.fixture(scope="module")
def geom64():
    return build_geometry(1, 64, 4)


class TestSample:
    @pytest.mark.parametrize("beta", [1, 2])
    def test_hermitian_exact(self, geom64, beta):
        H = dense(sample(geom64, beta, seed=1))
        assert np.array_equal(H, H.conj().T)

    @pytest.mark.parametrize("beta", [1, 2])
    def test_variance_exact(self, geom64, beta):
        H = sample(geom64, beta, seed=2)
        Hd = dense(H)
        for x in range(0, 64, 7):
            for y in range(64):
                s = variance_entry(geom64, x, y)
                if beta == 1:
                    assert abs(Hd[x, y] ** 2 - s) == 0.0 if s == 0 else abs(Hd[x, y].real ** 2 - s) < 1e-16
                else:
                    assert abs(abs(Hd[x, y]) ** 2 - s) < 1e-15

    def test_beta1_signs(self, geom64):
        H = sample(geom64, 1, seed=3)
        root = np.sqrt(1.0 / (geom64.M - 1.0))
        for g in H.bands:
            vals = np.unique(np.round(g.real, 12))
            assert set(vals) <= {-root.round(12), root.round(12)} or set(np.abs(vals)) == {root.round(12)}

    def test_beta2_unit_modulus(self, geom64):
        H = sample(geom64, 2, seed=4)
        root = np.sqrt(1.0 / (geom64.M - 1.0))
        for g in H.bands:
            assert np.abs(np.abs(g) - root).max() < 1e-15

    def test_diagonal_zero_for_step(self, geom64):
        H = sample(geom64, 2, seed=5)
        assert np.abs(np.diag(dense(H))).max() == 0.0

    def test_determinism(self, geom64):
        a = sample(geom64, 2, seed=99)
        b = sample(geom64, 2, seed=99)
        assert a.offsets == b.offsets
        for ga, gb in zip(a.bands, b.bands):
            assert np.array_equal(ga, gb)
        c = sample(geom64, 2, seed=100)
        assert any(not np.array_equal(ga, gc) for ga, gc in zip(a.bands, c.bands))

    def test_rejects_bad_beta(self, geom64):
        with pytest.raises(ValueError, match="beta"):
            sample(geom64, 3, seed=0)

    def test_custom_profile_with_diagonal(self):
        prof = CustomProfile(samples=(((0,), 0.5), ((1,), 1.0), ((-1,), 1.0)))
        g = build_geometry(1, 16, 2, prof)
        H = sample(g, 2, seed=6)
        Hd = dense(H)
        assert np.abs(Hd - Hd.conj().T).max() == 0.0
        d0 = np.diag(Hd)
        assert np.abs(np.abs(d0) ** 2 - 0.5 / (g.M - 1.0)).max() < 1e-15
        assert np.abs(d0.imag).max() == 0.0  # diagonal must stay real


class TestApply:
    def test_zero_vector(self, geom64):
        H = sample(geom64, 2, seed=7)
        out = apply(H, np.zeros(64, dtype=complex))
        assert np.abs(out).max() == 0.0

    def test_matches_dense(self):
        g = build_geometry(1, 32, 3)
        H = sample(g, 2, seed=8)
        Hd = dense(H)
        rng = np.random.default_rng(0)
        v = rng.standard_normal(32) + 1j * rng.standard_normal(32)
        assert np.abs(apply(H, v) - Hd @ v).max() < 1e-12

    def test_matches_dense_d2(self):
        g = build_geometry(2, 8, 2)
        H = sample(g, 1, seed=9)
        Hd = dense(H)
        rng = np.random.default_rng(1)
        v = rng.standard_normal(64)
        assert np.abs(apply(H, v) - Hd @ v).max() < 1e-12

    def test_quadratic_form_real(self, geom64):
        H = sample(geom64, 2, seed=10)
        rng = np.random.default_rng(2)
        v = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        q = np.vdot(v, apply(H, v))
        assert abs(q.imag) < 1e-12 * abs(q.real + 1.0)

    def test_length_mismatch(self, geom64):
        H = sample(geom64, 2, seed=11)
        with pytest.raises(ValueError, match="length"):
            apply(H, np.zeros(63))

    def test_block_apply(self, geom64):
        H = sample(geom64, 2, seed=12)
        rng = np.random.default_rng(3)
        v = rng.standard_normal((64, 5))
        block = apply(H, v)
        for j in range(5):
            assert np.abs(block[:, j] - apply(H, v[:, j])).max() < 1e-13


class TestNonbacktracking:
    def test_order_zero_and_one(self, geom64):
        H = sample(geom64, 2, seed=13)
        assert np.array_equal(nonbacktracking_direct(H, 0), np.eye(64))
        assert np.abs(nonbacktracking_direct(H, 1) - dense(H)).max() == 0.0

    def test_order_two_kills_diagonal(self, geom64):
        H = sample(geom64, 2, seed=14)
        Hd = dense(H)
        ref = Hd @ Hd
        np.fill_diagonal(ref, 0.0)
        assert np.abs(nonbacktracking_direct(H, 2) - ref).max() < 1e-13

    def test_guards(self, geom64):
        H = sample(geom64, 2, seed=15)
        with pytest.raises(ValueError, match="n <= 6"):
            nonbacktracking_direct(H, 7)

    @pytest.mark.parametrize("beta", [1, 2])
    def test_chebyshev_identity(self, geom64, beta):
        # the cornerstone algebraic identity, against direct path enumeration
        H = sample(geom64, beta, seed=16)
        for n in range(7):
            diff = np.abs(nonbacktracking_direct(H, n) - chebyshev_nb(H, n)).max()
            assert diff < 1e-10, f"n={n}: {diff}"

    def test_chebyshev_identity_d2(self):
        g = build_geometry(2, 6, 2)
        H = sample(g, 2, seed=17)
        for n in range(5):
            diff = np.abs(nonbacktracking_direct(H, n) - chebyshev_nb(H, n)).max()
            assert diff < 1e-10

    def test_chebyshev_low_orders(self, geom64):
        H = sample(geom64, 2, seed=18)
        assert np.array_equal(chebyshev_nb(H, 0), np.eye(64))
        Hd = dense(H)
        got = chebyshev_nb(H, 2)
        ref = Hd @ Hd - (geom64.M / (geom64.M - 1.0)) * np.eye(64)
        assert np.abs(got - ref).max() < 1e-12


class TestVectorStream:
    def test_first_term_is_input(self, geom64):
        H = sample(geom64, 2, seed=19)
        v = np.arange(64, dtype=complex)
        first = next(iter(nb_vector_stream(H, v, 0)))
        assert np.array_equal(first, v)

    def test_matches_dense_powers(self, geom64):
        H = sample(geom64, 1, seed=20)
        rng = np.random.default_rng(4)
        v = rng.standard_normal(64) + 1j * rng.standard_normal(64)
        for n, vec in enumerate(nb_vector_stream(H, v, 8)):
            if n <= 6:
                ref = nonbacktracking_direct(H, n) @ v
            else:
                ref = chebyshev_nb(H, n) @ v
            assert np.abs(vec - ref).max() < 1e-10, f"n={n}"

    def test_growth_envelope(self):
        g = build_geometry(1, 256, 8)
        H = sample(g, 2, seed=21)
        rng = np.random.default_rng(5)
        v = rng.standard_normal(256)
        v /= np.linalg.norm(v)
        norms = [np.linalg.norm(vec) for vec in nb_vector_stream(H, v, 30)]
        # measured growth envelope: spectral radius of H/2 is near 1
        for n, val in enumerate(norms):
            assert val <= 2.4**max(n, 1)


class TestSpectrum:
    def test_bulk_support(self):
        g = build_geometry(1, 256, 8)
        eps = []
        for seed in (1, 2, 3):
            H = sample(g, 2, seed=seed)
            eigs = np.linalg.eigvalsh(dense(H)) / 2.0
            eps.append(max(abs(eigs.min()) - 1.0, eigs.max() - 1.0, 0.0))
        assert max(eps) < 0.2


class TestBinaryFormat:
    def test_round_trip(self, tmp_path, geom64):
        H = sample(geom64, 2, seed=22)
        path = tmp_path / "sample.bndm"
        save_matrix(H, path)
        H2 = load_matrix(path, geom64)
        assert H2.beta == 2 and H2.seed == 22
        assert H2.offsets == H.offsets
        for a, b in zip(H.bands, H2.bands):
            assert np.array_equal(a, b)

    def test_header_mismatch(self, tmp_path, geom64):
        H = sample(geom64, 2, seed=23)
        path = tmp_path / "sample.bndm"
        save_matrix(H, path)
        other = build_geometry(1, 32, 4)
        with pytest.raises(ValueError, match="geometry"):
            load_matrix(path, other)
