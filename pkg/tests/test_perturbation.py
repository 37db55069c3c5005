import io

import numpy as np
import pytest

from spectral_detect.attacks import random_sign_perturbation
from spectral_detect.detector import select_m
from spectral_detect.image import ImageMatrix, Perturbation
from spectral_detect.perturbation import (
    ROW_FIELDS, first_order_estimate, mirsky_check, perturbation_report, spectral_change,
    wedin_bound, weyl_check,
)
from spectral_detect.svd import compute_svd, singular_values


def mat(a):
    return ImageMatrix(np.asarray(a, dtype=float)[None])


def random_pair(rng):
    M, N = rng.integers(1, 7, 2)
    K = rng.integers(1, 4)
    x = rng.normal(size=(1, M, N, K))
    e = rng.normal(size=x.shape) * 10 ** rng.uniform(-4, 0)
    return x, x + e


class TestWeyl:
    def test_zero_perturbation(self):
        np.testing.assert_array_equal(weyl_check([5, 2], [5, 2], 0.0), [0, 0])

    def test_diagonal_shift_is_tight(self):
        rep = perturbation_report(mat(np.diag([5.0, 2.0])), mat(np.diag([5.1, 2.1])))
        np.testing.assert_allclose(rep["s_hat"], [5.1, 2.1])
        np.testing.assert_allclose(rep["weyl_margin"], [0, 0], atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            weyl_check([1, 2], [1], 0.1)

    def test_random_pairs_against_dense_oracle(self, rng):
        for _ in range(1000):
            x, xh = random_pair(rng)
            c = spectral_change(x, xh)
            dense_e = ImageMatrix(np.moveaxis((xh - x)[0], -1, 0)).to_dense()
            assert c["e_norm2"][0] == pytest.approx(np.linalg.norm(dense_e, 2), rel=1e-10)
            assert c["weyl_violations"][0] == 0
            assert c["mirsky_violation"][0] == 0


class TestMirsky:
    def test_zero(self):
        assert mirsky_check([3, 1], [3, 1], 0.0) == (0.0, 0.0, True)

    def test_diagonal_shift_is_tight(self):
        lhs, rhs, ok = mirsky_check([5, 2], [5.1, 2.1], np.sqrt(0.02))
        assert lhs == pytest.approx(np.sqrt(0.02)) and ok

    def test_violation_detected(self):
        assert not mirsky_check([5, 2], [6, 2], 0.5).ok


class TestFirstOrder:
    def test_off_diagonal_symmetric(self):
        x = mat(np.diag([5.0, 2.0]))
        e = Perturbation(np.array([[[0, 0.1], [0.1, 0]]]))
        pred = first_order_estimate(compute_svd(x), e)
        np.testing.assert_allclose(pred, [5, 2], atol=1e-15)
        # exact eigenvalues of [[5, .1], [.1, 2]]
        exact = 3.5 + np.array([1, -1]) * np.sqrt(1.5 ** 2 + 0.01)
        rep = perturbation_report(x, e)
        np.testing.assert_allclose(rep["s_hat"], exact, rtol=1e-12)
        assert rep["first_order_residual"].max() <= 0.01

    def test_aligned_rank_one_is_exact(self, rng):
        x = mat(rng.normal(size=(4, 3)))
        svd = compute_svd(x)
        e = Perturbation(0.01 * np.outer(svd.left[0], svd.right[0])[None])
        assert first_order_estimate(svd, e)[0] == pytest.approx(svd.values[0] + 0.01, rel=1e-12)
        rep = perturbation_report(x, e)
        assert rep["first_order_residual"][0] <= 1e-12

    def test_non_symmetric_uses_u_e_v(self):
        # E = e_1 e_2^T on the identity-like diag: u_1^T E v_1 = 0, v_1^T E u_1 = 0 too, so
        # use a rotated frame where the two orders differ
        x = mat(np.array([[0.0, 3.0], [1.0, 0.0]]))
        svd = compute_svd(x)
        e = Perturbation(np.array([[[0.0, 1e-3], [0.0, 0.0]]]))
        pred = first_order_estimate(svd, e)[0]
        assert pred == pytest.approx(3 + 1e-3, rel=1e-12)
        assert perturbation_report(x, e)["first_order_residual"][0] <= 1e-9

    def test_residual_scaling(self, rng):
        ratios = []
        for _ in range(30):
            n = rng.integers(3, 7)
            q1, _ = np.linalg.qr(rng.normal(size=(n, n)))
            q2, _ = np.linalg.qr(rng.normal(size=(n, n)))
            s = np.arange(n, 0, -1) * 2.0
            x = ImageMatrix((q1 * s) @ q2.T)
            e0 = rng.normal(size=(1, n, n))
            e0 /= np.linalg.norm(e0[0], 2)
            res = [perturbation_report(x, Perturbation(1e-2 * t * e0))["first_order_residual"].max()
                   for t in (1, 0.5, 0.25)]
            ratios += [res[0] / res[1], res[1] / res[2]]
        assert all(3 <= r <= 5 for r in ratios)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            first_order_estimate(compute_svd(mat(np.eye(2))), Perturbation(np.zeros((1, 3, 3))))


class TestWedin:
    def test_formula(self):
        assert wedin_bound([5, 2], 1, 0.1) == pytest.approx(2 * 0.1 / 3)
        assert wedin_bound(compute_svd(mat(np.diag([5.0, 2.0]))), 2, 0.1) == pytest.approx(2 * 0.1 / 3)

    def test_degenerate_gap_is_infinite(self):
        assert wedin_bound([3, 3, 3], 2, 0.1) == np.inf

    def test_zero_perturbation(self):
        assert wedin_bound([3, 2, 1], 2, 0.0) == 0.0

    def test_uses_larger_neighbour_gap(self):
        assert wedin_bound([5, 4, 1], 2, 0.1) == pytest.approx(0.2 / 3)
        assert wedin_bound([5, 4, 1], 2, 0.1, gap="min") == pytest.approx(0.2)

    def test_index_range(self):
        with pytest.raises(IndexError):
            wedin_bound([1, 2], 3, 0.1)

    def test_measured_angle_below_bound(self):
        rep = perturbation_report(mat(np.diag([5.0, 2.0])), mat([[5, 0.1], [0.1, 2]]))
        # analytic eigenvector angle of the perturbed symmetric matrix
        theta = 0.5 * np.arctan2(0.2, 3.0)
        np.testing.assert_allclose(rep["sin_u"], np.sin(theta), rtol=1e-10)
        assert rep["sin_u"][0] <= rep["wedin_bound"][0]
        assert rep.wedin_violations == 0

    def test_close_neighbour_breaks_larger_gap_form(self):
        # s = (3, 1, 0.98) with E coupling the near-tied pair: the larger gap
        # (2.0) makes the bound tiny while the vectors rotate by ~13 degrees
        x = mat(np.diag([3.0, 1.0, 0.98]))
        e = np.zeros((3, 3))
        e[1, 2] = e[2, 1] = 0.005
        rep = perturbation_report(x, Perturbation(e[None]))
        assert rep["wedin_applicable"][1]
        assert rep["sin_u"][1] > 0.2 > rep["wedin_bound"][1]
        assert rep.wedin_violations >= 1
        # the smaller-gap form holds here
        rep_min = perturbation_report(x, Perturbation(e[None]), gap="min")
        assert rep_min.wedin_violations == 0


class TestReport:
    def test_identical_inputs(self, rng):
        x = ImageMatrix(rng.uniform(size=(2, 4, 4)))
        rep = perturbation_report(x, x)
        assert not rep["rel_change"].any()
        assert rep["sin_u"].max() <= 1e-14 and rep["sin_v"].max() <= 1e-14
        assert rep.violations == 0 and rep.e_norm2 == 0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            perturbation_report(mat(np.eye(2)), mat(np.eye(3)))

    def test_relative_change_floor_on_zero_values(self):
        rep = perturbation_report(mat(np.diag([1.0, 0.0])), mat(np.diag([1.0, 1e-3])))
        assert rep["rel_change"][1] == pytest.approx(1e-3 / 1e-12)

    def test_crossing_within_one_channel(self):
        rep = perturbation_report(mat(np.diag([2.0, 1.0])), mat(np.diag([0.8, 1.0])))
        assert rep["crossed"].tolist() == [False, True]

    def test_crossing_between_channels(self):
        x = ImageMatrix(np.array([[[2.0]], [[1.0]]]))
        xh = ImageMatrix(np.array([[[0.5]], [[1.0]]]))
        rep = perturbation_report(x, xh)
        assert rep["crossed"].all()
        # vectors are matched within their channel, so no spurious rotation
        assert not rep["sin_u"].any()

    def test_csv(self, rng):
        x = ImageMatrix(rng.uniform(size=(1, 5, 4)))
        rep = perturbation_report(x, ImageMatrix(x.blocks + 0.01))
        buf = io.StringIO()
        rep.to_csv(buf)
        lines = buf.getvalue().splitlines()
        assert lines[0].split(",")[: len(ROW_FIELDS)] == list(ROW_FIELDS)
        assert len(lines) == 1 + rep.P
        assert lines[1].split(",")[-1] == "0"

    def test_mnist_trailing_values_move_more(self, mnist_train, mnist_test):
        m = select_m(singular_values(mnist_train.images[:2000]), 0.01)
        X = mnist_test.images[:20]
        A = random_sign_perturbation(X, 0.1, seed=0)
        c = spectral_change(X, A)
        lead = np.median(c["rel_change"][:, : m - 1])
        tail = np.median(c["rel_change"][:, m - 1:])
        assert tail > lead
        assert c["weyl_violations"].sum() == 0 and c["mirsky_violation"].sum() == 0
