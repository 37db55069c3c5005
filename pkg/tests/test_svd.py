import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectral_detect.image import ImageMatrix, norm_2, norm_frobenius
from spectral_detect.svd import (
    SpectrumError, SvdConvergenceError, block_svd, compute_svd, energy_fraction, reconstruct,
    singular_values, subspace_angle_sin, truncate,
)


def mat(a):
    return ImageMatrix(np.asarray(a, dtype=float)[None])


def random_matrix(rng, max_dim=6, max_k=3):
    M, N = rng.integers(1, max_dim + 1, 2)
    K = rng.integers(1, max_k + 1)
    return ImageMatrix(rng.normal(size=(K, M, N)))


class TestComputeSvd:
    def test_diagonal(self):
        np.testing.assert_allclose(compute_svd(mat([[3, 0], [0, 4]])).values, [4, 3])

    def test_shear_matches_analytic_values(self):
        # eigenvalues of A^T A are (3 +- sqrt 5) / 2; their product is det^2 = 1
        s = compute_svd(mat([[1, 1], [0, 1]])).values
        np.testing.assert_allclose(s ** 2, [(3 + np.sqrt(5)) / 2, (3 - np.sqrt(5)) / 2], rtol=1e-14)
        assert s.prod() == pytest.approx(1.0, rel=1e-14)

    def test_merge_of_singletons(self):
        svd = compute_svd(ImageMatrix(np.array([5.0, 4.0, 6.0]).reshape(3, 1, 1)))
        np.testing.assert_array_equal(svd.values, [6, 5, 4])
        np.testing.assert_array_equal(svd.channel_of, [2, 0, 1])

    def test_merge_ties_prefer_lower_channel(self):
        svd = compute_svd(ImageMatrix(np.stack([np.diag([2.0, 2.0]), np.diag([2.0, 1.0])])))
        np.testing.assert_array_equal(svd.channel_of, [0, 0, 1, 1])
        np.testing.assert_array_equal(svd.local_index, [0, 1, 0, 1])

    def test_against_dense_oracle(self, rng):
        for _ in range(200):
            x = random_matrix(rng)
            dense = np.linalg.svd(x.to_dense(), compute_uv=False)[: x.rank_bound]
            assert np.abs(compute_svd(x).values - dense).max() <= 1e-8

    def test_orthonormal_vectors_per_channel(self, rng):
        for _ in range(50):
            x = random_matrix(rng, max_dim=8)
            svd = compute_svd(x)
            for k in range(x.block_dims[2]):
                _, u, v = svd.channel_triples(k)
                assert np.abs(u @ u.T - np.eye(len(u))).max() <= 1e-10
                assert np.abs(v @ v.T - np.eye(len(v))).max() <= 1e-10

    def test_rank_deficient_vectors_complete(self):
        x = mat(np.outer([1.0, 2, 3, 4], [1.0, 0, 1]))
        svd = compute_svd(x)
        assert svd.values[1] == 0 and svd.values[2] == 0
        assert np.abs(svd.left @ svd.left.T - np.eye(3)).max() <= 1e-10
        assert np.abs(svd.right @ svd.right.T - np.eye(3)).max() <= 1e-10

    def test_sign_convention(self, rng):
        svd = compute_svd(random_matrix(rng, max_dim=8))
        peak = svd.left[np.arange(svd.P), np.argmax(np.abs(svd.left), axis=1)]
        assert np.all(peak >= 0)

    def test_deterministic(self, rng):
        x = random_matrix(rng)
        a, b = compute_svd(x), compute_svd(x)
        assert np.array_equal(a.values, b.values) and np.array_equal(a.left, b.left)

    def test_wide_and_tall(self, rng):
        for shape in [(1, 7), (7, 1), (3, 9), (9, 3)]:
            x = mat(rng.normal(size=shape))
            np.testing.assert_allclose(compute_svd(x).values,
                                       np.linalg.svd(x.blocks[0], compute_uv=False), atol=1e-12)

    def test_non_convergence_reports_channel(self, rng):
        x = ImageMatrix(np.stack([np.eye(4), rng.normal(size=(4, 4))]))
        with pytest.raises(SvdConvergenceError) as err:
            compute_svd(x, max_sweeps=1)
        assert err.value.channel == 1

    def test_values_only_batch(self, rng):
        X = rng.uniform(size=(5, 6, 4, 2))
        S = singular_values(X)
        assert S.shape == (5, 8)
        for i in range(5):
            np.testing.assert_allclose(S[i], compute_svd(ImageMatrix(np.moveaxis(X[i], -1, 0))).values)

    def test_mnist_digit_converges(self, mnist_test):
        # a rank-deficient digit with an exact numerical null space
        s, _, _ = block_svd(mnist_test.images[33, ..., 0][None])
        np.testing.assert_allclose(s[0], np.linalg.svd(mnist_test.images[33, ..., 0], compute_uv=False),
                                   atol=1e-12)


class TestNormsFromSpectrum:
    def test_leading_value_and_energy(self, rng):
        for _ in range(20):
            x = random_matrix(rng)
            s = compute_svd(x).values
            assert s[0] == pytest.approx(norm_2(x), rel=1e-10)
            assert np.sqrt(np.sum(s ** 2)) == pytest.approx(norm_frobenius(x), rel=1e-10)


class TestReconstructTruncate:
    def test_round_trip(self, rng):
        x = mat(rng.normal(size=(8, 8)))
        err = np.linalg.norm(reconstruct(compute_svd(x)).blocks - x.blocks)
        assert err <= 1e-8 * norm_frobenius(x)

    def test_rank_one(self):
        x = mat(np.outer([1.0, 2.0], [3.0, 4.0, 5.0]))
        np.testing.assert_allclose(reconstruct(compute_svd(x)).blocks, x.blocks, atol=1e-12)

    def test_zero(self):
        x = mat(np.zeros((3, 2)))
        assert not reconstruct(compute_svd(x)).blocks.any()

    def test_truncate_full_and_empty(self, rng):
        svd = compute_svd(random_matrix(rng))
        np.testing.assert_array_equal(truncate(svd, svd.P).blocks, reconstruct(svd).blocks)
        assert not truncate(svd, 0).blocks.any()

    def test_truncate_diag_rank_one(self):
        np.testing.assert_allclose(truncate(compute_svd(mat(np.diag([4.0, 3.0]))), 1).blocks[0],
                                   [[4, 0], [0, 0]], atol=1e-15)

    def test_truncate_is_global(self):
        x = ImageMatrix(np.stack([np.diag([1.0, 0.5]), np.diag([3.0, 2.0])]))
        t = truncate(compute_svd(x), 2)
        assert not t.blocks[0].any()
        np.testing.assert_allclose(t.blocks[1], np.diag([3.0, 2.0]), atol=1e-15)

    def test_truncate_range(self, rng):
        svd = compute_svd(random_matrix(rng))
        for k in (-1, svd.P + 1):
            with pytest.raises(ValueError):
                truncate(svd, k)

    def test_eckart_young(self, rng):
        for _ in range(200):
            x = random_matrix(rng)
            svd = compute_svd(x)
            k = int(rng.integers(0, svd.P + 1))
            resid = np.sum((x.blocks - truncate(svd, k).blocks) ** 2)
            tail = np.sum(svd.values[k:] ** 2)
            assert resid == pytest.approx(tail, rel=1e-8, abs=1e-8 * np.sum(svd.values ** 2))


class TestEnergyFraction:
    def test_rank_one(self):
        assert energy_fraction(compute_svd(mat(np.outer([1.0, 2], [3.0, 1]))), 1) == pytest.approx(1)

    def test_diag(self):
        assert energy_fraction(compute_svd(mat(np.diag([4.0, 3.0]))), 1) == pytest.approx(0.64)

    def test_full_and_monotone(self, rng):
        svd = compute_svd(random_matrix(rng))
        r = [energy_fraction(svd, k) for k in range(1, svd.P + 1)]
        assert r[-1] == pytest.approx(1.0)
        assert all(0 < a <= b + 1e-15 for a, b in zip(r, r[1:]))

    def test_zero_spectrum(self):
        with pytest.raises(SpectrumError):
            energy_fraction(compute_svd(mat(np.zeros((2, 2)))), 1)

    def test_range(self):
        with pytest.raises(ValueError):
            energy_fraction(compute_svd(mat(np.eye(2))), 0)


class TestAngles:
    def test_examples(self):
        assert subspace_angle_sin([1, 0], [1, 0]) == 0
        assert subspace_angle_sin([1, 0], [0, 1]) == 1
        assert subspace_angle_sin([1, 0], [np.cos(0.1), np.sin(0.1)]) == pytest.approx(np.sin(0.1))

    def test_zero_and_non_unit(self):
        with pytest.raises(ValueError):
            subspace_angle_sin([0, 0], [1, 0])
        with pytest.raises(ValueError):
            subspace_angle_sin([2, 0], [1, 0])

    @given(st.floats(0, 2 * np.pi), st.floats(0, 2 * np.pi))
    def test_sign_invariant(self, a, b):
        u, w = np.array([np.cos(a), np.sin(a)]), np.array([np.cos(b), np.sin(b)])
        s = subspace_angle_sin(u, w)
        assert 0 <= s <= 1
        assert subspace_angle_sin(-u, w) == pytest.approx(s, abs=1e-12)
        assert subspace_angle_sin(u, -w) == pytest.approx(s, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
def test_merged_spectrum_equals_dense(M, N, K, seed):
    x = ImageMatrix(np.random.default_rng(seed).normal(size=(K, M, N)))
    dense = np.linalg.svd(x.to_dense(), compute_uv=False)[: x.rank_bound]
    np.testing.assert_allclose(compute_svd(x).values, dense, atol=1e-8)
