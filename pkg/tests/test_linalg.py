import unittest

import numpy as np
from scipy import sparse

from jmflex.errors import NonConcaveBlock
from jmflex.linalg import PrecisionFactor, kronecker_sum_log_pdet, log_pseudo_det, weighted_crossprod
from jmflex.splines import difference_penalty


class TestPrecisionFactor(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(5, 5))
        self.P = A @ A.T + 5 * np.eye(5)

    def test_solve_and_logdet(self):
        factor = PrecisionFactor(self.P)
        b = np.arange(5.0)
        np.testing.assert_allclose(factor.solve(b), np.linalg.solve(self.P, b))
        self.assertAlmostEqual(factor.logdet(), np.linalg.slogdet(self.P)[1])
        np.testing.assert_allclose(factor.inverse_diag(), np.diag(np.linalg.inv(self.P)))

    def test_draw_covariance(self):
        factor = PrecisionFactor(self.P)
        rng = np.random.default_rng(1)
        draws = np.stack([factor.draw(np.zeros(5), rng) for _ in range(20000)])
        np.testing.assert_allclose(np.cov(draws.T), np.linalg.inv(self.P), atol=0.01)

    def test_log_density(self):
        factor = PrecisionFactor(self.P)
        x = np.ones(5)
        cov = np.linalg.inv(self.P)
        expected = -0.5 * (5 * np.log(2 * np.pi) + np.linalg.slogdet(cov)[1] + x @ self.P @ x)
        self.assertAlmostEqual(factor.log_density(x, np.zeros(5)), expected)

    def test_ridge_rescues_slightly_indefinite(self):
        K = difference_penalty(5, 2).K - 1e-4 * np.eye(5)
        factor = PrecisionFactor.with_ridge(K, 'mu.pspline_time')
        self.assertGreater(factor.ridge, 0.0)

    def test_negative_definite_is_rejected(self):
        with self.assertRaises(NonConcaveBlock) as ctx:
            PrecisionFactor.with_ridge(-np.eye(3), 'alpha.assoc')
        self.assertEqual(ctx.exception.block, 'alpha.assoc')

    def test_block_diagonal_split(self):
        blocks = [np.array([[2.0, 0.5], [0.5, 1.0]])] * 40
        P = np.kron(np.eye(40), blocks[0])
        factor = PrecisionFactor(P)
        self.assertEqual(len(factor.components), 40)
        b = np.linspace(-1, 1, 80)
        np.testing.assert_allclose(factor.solve(b), np.linalg.solve(P, b))
        self.assertAlmostEqual(factor.logdet(), np.linalg.slogdet(P)[1])


class TestHelpers(unittest.TestCase):

    def test_weighted_crossprod_sparse(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(6, 3))
        w = rng.uniform(size=6)
        expected = X.T @ np.diag(w) @ X
        np.testing.assert_allclose(weighted_crossprod(X, w), expected)
        np.testing.assert_allclose(weighted_crossprod(sparse.csr_matrix(X), w), expected)

    def test_kronecker_sum_pseudo_determinant(self):
        K1 = difference_penalty(4, 2).K
        K2 = difference_penalty(3, 1).K
        dense = np.kron(K1, np.eye(3)) / 0.7 + np.kron(np.eye(4), K2) / 2.5
        eig1, eig2 = np.linalg.eigvalsh(K1), np.linalg.eigvalsh(K2)
        self.assertAlmostEqual(kronecker_sum_log_pdet(np.clip(eig1, 0, None), np.clip(eig2, 0, None), 0.7, 2.5),
                               log_pseudo_det(dense), places=8)


if __name__ == '__main__':
    unittest.main()
