#!/usr/bin/env python3
"""
Kernel Ridge Regression Tests
Kernel matrices, KRR predictions, the KIP loss and its gradient
"""

import numpy as np
import pytest

from distillfed.config_schema import KernelSpec
from distillfed.gradcheck import central_difference, relative_error
from distillfed.kernel import (
    KernelSolveError, SupportSet, kernel_matrix, kip_grad, kip_loss, kip_loss_and_grad,
    krr_predict, resolve_lambda,
)


def _rbf(bandwidth: float = 1.0, lam: float = 1e-6) -> KernelSpec:
    return KernelSpec(variant="rbf", bandwidth=bandwidth, regularization="absolute", reg_value=lam)


def _onehot(labels, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[labels]


def _instance(seed: int, n_support: int, n_targets: int, dim: int, num_classes: int = 3):
    rng = np.random.default_rng(seed)
    support = SupportSet(rng.normal(size=(n_support, dim)),
                         _onehot(rng.integers(num_classes, size=n_support), num_classes))
    targets = rng.normal(size=(n_targets, dim))
    y = _onehot(rng.integers(num_classes, size=n_targets), num_classes)
    return support, targets, y


def _oracle_predictions(support: SupportSet, targets: np.ndarray, spec: KernelSpec, lam: float) -> np.ndarray:
    k_ss = kernel_matrix(support.points, support.points, spec)
    k_ts = kernel_matrix(targets, support.points, spec)
    return k_ts @ np.linalg.inv(k_ss + lam * np.eye(k_ss.shape[0])) @ support.labels


class TestKernelMatrix:
    def test_rbf_identical_points(self):
        a = np.array([[0.3, -1.2, 2.0]])
        assert kernel_matrix(a, a, _rbf())[0, 0] == pytest.approx(1.0)

    def test_rbf_hand_value(self):
        k = kernel_matrix(np.array([[0.0, 0.0]]), np.array([[1.0, 1.0]]), _rbf(1.0))
        assert k[0, 0] == pytest.approx(np.exp(-1.0), abs=1e-12)

    @pytest.mark.parametrize("variant", ["rbf", "arccos_ntk"])
    def test_symmetric_psd(self, variant):
        a = np.random.default_rng(1).normal(size=(12, 5))
        spec = KernelSpec(variant=variant, bandwidth=2.0, depth=4)
        k = kernel_matrix(a, a, spec)
        assert np.allclose(k, k.T, atol=1e-12)
        assert np.min(np.linalg.eigvalsh(k)) >= -1e-8

    @pytest.mark.parametrize("variant", ["rbf", "arccos_ntk"])
    def test_transpose(self, variant):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
        spec = KernelSpec(variant=variant)
        assert np.allclose(kernel_matrix(a, b, spec), kernel_matrix(b, a, spec).T, atol=1e-12)

    def test_ntk_diagonal(self):
        # with c_sigma = 2 every layer adds |x|^2 / d on the diagonal
        x = np.array([[1.0, 2.0, -2.0, 0.5]])
        spec = KernelSpec(variant="arccos_ntk", depth=4)
        expected = 5 * float(x @ x.T) / 4
        assert kernel_matrix(x, x, spec)[0, 0] == pytest.approx(expected, rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            kernel_matrix(np.zeros((2, 3)), np.zeros((2, 4)), _rbf())


class TestKrr:
    def test_interpolation_identity(self):
        rng = np.random.default_rng(3)
        points = rng.normal(size=(6, 4))
        support = SupportSet(points, _onehot([0, 1, 2, 0, 1, 2], 3))
        predictions = krr_predict(support, points, _rbf(1.0, 1e-12))
        assert np.max(np.abs(predictions - support.labels)) < 1e-6

    def test_single_point_shrinkage(self):
        x = np.array([[0.5, -0.5]])
        support = SupportSet(x, np.array([[0.0, 1.0]]))
        predictions = krr_predict(support, x, _rbf(1.0, 0.25))
        assert np.allclose(predictions, support.labels / 1.25, atol=1e-14)

    def test_matches_explicit_inverse(self):
        support, targets, _ = _instance(4, 3, 5, 4)
        spec = _rbf(1.5, 1e-3)
        assert np.allclose(krr_predict(support, targets, spec),
                           _oracle_predictions(support, targets, spec, 1e-3), atol=1e-10)

    def test_regularization_contracts(self):
        support, _, _ = _instance(5, 5, 1, 3)
        norms = [np.linalg.norm(krr_predict(support, support.points, _rbf(1.0, lam)))
                 for lam in (1e-3, 1e-1, 10.0)]
        assert norms[0] > norms[1] > norms[2]

    def test_solve_failure_is_reported(self):
        points = np.array([[0.0, np.nan], [1.0, 1.0]])
        support = SupportSet(points, _onehot([0, 1], 2))
        with pytest.raises(KernelSolveError):
            krr_predict(support, np.zeros((1, 2)), _rbf())

    def test_trace_scaled_lambda(self):
        k = np.diag([2.0, 4.0])
        spec = KernelSpec(regularization="trace_scaled", reg_value=1e-6)
        assert resolve_lambda(spec, k) == pytest.approx(3e-6)
        assert resolve_lambda(_rbf(lam=0.5), k) == 0.5


class TestKipLoss:
    def test_zero_at_identity(self):
        rng = np.random.default_rng(6)
        points = rng.normal(size=(5, 3))
        labels = _onehot([0, 1, 2, 1, 0], 3)
        assert kip_loss(SupportSet(points, labels), points, labels, _rbf(1.0, 1e-12)) < 1e-8

    def test_vanishing_kernel(self):
        support = SupportSet(np.array([[100.0, 100.0]]), _onehot([0], 2))
        targets = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        y = _onehot([0, 1, 1], 2)
        assert kip_loss(support, targets, y, _rbf(1e-2)) == pytest.approx(0.5 * np.sum(y * y))

    def test_matches_oracle(self):
        support, targets, y = _instance(7, 4, 8, 3)
        spec = _rbf(1.2, 1e-4)
        residual = y - _oracle_predictions(support, targets, spec, 1e-4)
        assert kip_loss(support, targets, y, spec) == pytest.approx(0.5 * np.sum(residual ** 2), abs=1e-10)

    def test_permutation_invariant(self):
        support, targets, y = _instance(8, 5, 7, 4)
        perm = np.array([3, 0, 4, 1, 2])
        permuted = SupportSet(support.points[perm], support.labels[perm])
        spec = _rbf(1.5, 1e-4)
        assert kip_loss(permuted, targets, y, spec) == pytest.approx(kip_loss(support, targets, y, spec), abs=1e-12)

    def test_label_rows_must_sum_to_one(self):
        with pytest.raises(ValueError):
            SupportSet(np.zeros((1, 2)), np.array([[0.5, 0.2]]))


class TestKipGradient:
    @pytest.mark.parametrize("seed", range(50))
    def test_rbf_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(1000 + seed)
        n_support, n_targets, dim = int(rng.integers(1, 7)), int(rng.integers(2, 13)), int(rng.integers(1, 9))
        support, targets, y = _instance(seed, n_support, n_targets, dim)
        spec = _rbf(bandwidth=float(np.sqrt(dim)), lam=1e-3)
        analytic = kip_grad(support, targets, y, spec)
        numeric = central_difference(
            lambda p: kip_loss(SupportSet(p, support.labels), targets, y, spec), support.points)
        assert relative_error(analytic, numeric) < 1e-4

    def test_trace_scaled_rbf_gradient(self):
        # RBF diagonal is constant, so the trace-scaled lambda does not move with X~
        support, targets, y = _instance(11, 4, 9, 3)
        spec = KernelSpec(variant="rbf", bandwidth=1.5, regularization="trace_scaled", reg_value=1e-3)
        numeric = central_difference(
            lambda p: kip_loss(SupportSet(p, support.labels), targets, y, spec), support.points)
        assert relative_error(kip_grad(support, targets, y, spec), numeric) < 1e-4

    def test_stationary_point(self):
        targets = np.array([[1.0], [-1.0]])
        y = _onehot([0, 1], 2)
        labels = _onehot([0], 2)
        spec = _rbf(1.0, 1e-6)
        points = np.array([[0.3]])
        start_loss = kip_loss(SupportSet(points, labels), targets, y, spec)
        for _ in range(500):
            points = points - 0.5 * kip_grad(SupportSet(points, labels), targets, y, spec)
        grad = kip_grad(SupportSet(points, labels), targets, y, spec)
        assert np.max(np.abs(grad)) < 1e-4
        assert kip_loss(SupportSet(points, labels), targets, y, spec) < start_loss

    def test_duplicated_support_rows_share_gradient(self):
        rng = np.random.default_rng(12)
        p, q = rng.normal(size=(2, 3))
        support = SupportSet(np.vstack([p, p, q]), _onehot([1, 1, 0], 2))
        targets = rng.normal(size=(6, 3))
        y = _onehot(rng.integers(2, size=6), 2)
        grad = kip_grad(support, targets, y, _rbf(1.5, 1e-3))
        assert np.allclose(grad[0], grad[1], atol=1e-10)

    def test_ntk_finite_difference_step_descends(self):
        support, targets, y = _instance(13, 3, 10, 4)
        spec = KernelSpec(variant="arccos_ntk", depth=2, regularization="absolute", reg_value=1e-2)
        loss, grad = kip_loss_and_grad(support, targets, y, spec)
        assert grad.shape == support.points.shape
        stepped = SupportSet(support.points - 1e-3 * grad / np.max(np.abs(grad)), support.labels)
        assert kip_loss(stepped, targets, y, spec) < loss


if __name__ == '__main__':
    pytest.main([__file__, "-v"])
