import unittest

import numpy as np
import pandas as pd
from scipy.stats import norm

from jmflex.data import Dataset
from jmflex.errors import ConfigurationError, DimensionError, DomainError
from jmflex.likelihood import (JointModel, QuadratureRule, ThetaState, cumulative_hazard, g1_derivs, hessian,
                               log_hyperprior, log_posterior, log_prior, long_loglik, score, surv_loglik)
from jmflex.linalg import log_pseudo_det
from jmflex.model import AssocSpec, JointModelSpec, Term, setup_assoc
from tests.fixtures import random_coefficients, random_variances, tiny_data, tiny_model


def finite_difference_score(block, theta, h=1e-5):
    beta = theta.coefficients[block.name]
    out = np.empty(block.size)
    for j in range(block.size):
        step = np.zeros(block.size)
        step[j] = h
        out[j] = (log_posterior(theta.with_block(block.name, beta + step))
                  - log_posterior(theta.with_block(block.name, beta - step))) / (2 * h)
    return out


def finite_difference_hessian(block, theta, h=1e-5):
    beta = theta.coefficients[block.name]
    out = np.empty((block.size, block.size))
    for j in range(block.size):
        step = np.zeros(block.size)
        step[j] = h
        out[:, j] = (score(block, theta.with_block(block.name, beta + step))
                     - score(block, theta.with_block(block.name, beta - step))) / (2 * h)
    return out


class TestQuadrature(unittest.TestCase):

    def test_polynomial_exactness(self):
        rule = QuadratureRule.gauss_legendre(7)
        T = np.array([1.0, 4.5, 12.0])
        nodes, weights = rule.rescale(T)
        np.testing.assert_allclose(np.sum(weights * (nodes + 1.0), axis=1), T ** 2 / 2 + T, rtol=1e-12)

    def test_invalid_rules(self):
        with self.assertRaises(ConfigurationError):
            QuadratureRule.gauss_legendre(0)
        with self.assertRaises(ConfigurationError):
            QuadratureRule(np.array([0.5, 0.1]), np.array([1.0, 1.0]))


class TestLogLikelihood(unittest.TestCase):

    def test_exact_fit_unit_variance(self):
        surv = pd.DataFrame({'id': [1, 2], 'time': [5.0, 6.0], 'event': [0, 1], 'x1': [0.1, 0.2]})
        long = pd.DataFrame({'id': [1, 1, 2], 'time': [0.0, 2.0, 3.0], 'y': [0.7, 0.7, 0.7]})
        spec = JointModelSpec(gamma_terms=(Term('intercept'),), mu_terms=(Term('intercept'),),
                              sigma_terms=(Term('intercept'),), alpha=AssocSpec())
        model = JointModel(spec, Dataset(surv, long))
        theta = ThetaState(model, {'mu.intercept': [0.7]})
        self.assertAlmostEqual(long_loglik(theta), -1.5 * np.log(2 * np.pi))

    def test_single_standard_normal_observation(self):
        surv = pd.DataFrame({'id': [1], 'time': [5.0], 'event': [1]})
        long = pd.DataFrame({'id': [1], 'time': [1.0], 'y': [1.0]})
        spec = JointModelSpec(gamma_terms=(Term('intercept'),), mu_terms=(Term('intercept'),),
                              sigma_terms=(Term('intercept'),), alpha=AssocSpec())
        theta = ThetaState(JointModel(spec, Dataset(surv, long)))
        self.assertAlmostEqual(long_loglik(theta), -0.5 * np.log(2 * np.pi) - 0.5)

    def test_matches_independent_normal_densities(self):
        model = tiny_model()
        theta = ThetaState(model, random_coefficients(model, np.random.default_rng(1)))
        mu = theta.eta('mu', 'long')
        sd = np.exp(theta.eta('sigma', 'long'))
        expected = sum(norm.logpdf(y, m, s) for y, m, s in zip(model.data.y, mu, sd))
        self.assertAlmostEqual(long_loglik(theta), expected, places=8)

    def test_constant_hazard(self):
        model = tiny_model(fri=False)
        for nodes in (1, 7, 15):
            model = JointModel(model.spec, model.data, QuadratureRule.gauss_legendre(nodes))
            theta = ThetaState(model, {'gamma.intercept': [-2.5]})
            np.testing.assert_allclose(cumulative_hazard(theta), np.exp(-2.5) * model.data.T, rtol=1e-12)
            self.assertAlmostEqual(cumulative_hazard(theta, 3), np.exp(-2.5) * model.data.T[3])
            expected = float(np.sum(model.data.delta * -2.5 - np.exp(-2.5) * model.data.T))
            self.assertAlmostEqual(surv_loglik(theta), expected, places=10)

    def test_no_events_small_hazard(self):
        model = tiny_model(fri=False, events=False)
        theta = ThetaState(model, {'gamma.intercept': [-14.0]})
        self.assertAlmostEqual(surv_loglik(theta), -float(np.sum(theta.Lambda)), places=12)
        self.assertLess(abs(surv_loglik(theta)), 1e-3)
        np.testing.assert_allclose(score('gamma.linear_covariate_x1', theta), 0.0, atol=1e-3)

    def test_quadrature_rules_agree(self):
        rng = np.random.default_rng(2)
        coarse, fine = tiny_model(nodes=7), tiny_model(nodes=15)
        coefficients = random_coefficients(fine, rng, 0.05)
        Lambda_coarse = ThetaState(coarse, coefficients).Lambda
        Lambda_fine = ThetaState(fine, coefficients).Lambda
        np.testing.assert_allclose(Lambda_coarse, Lambda_fine, rtol=1e-3)

    def test_hazard_exponent_cap(self):
        model = tiny_model(fri=False)
        theta = ThetaState(model, {'gamma.intercept': [800.0]})
        self.assertTrue(theta.suspect)
        self.assertTrue(np.all(np.isfinite(theta.Lambda)))
        self.assertFalse(ThetaState(model).suspect)


class TestPriors(unittest.TestCase):

    def setUp(self):
        self.model = tiny_model()
        rng = np.random.default_rng(3)
        self.theta = ThetaState(self.model, random_coefficients(self.model, rng), random_variances(self.model, rng))

    def test_isotropic_prior(self):
        block = self.model.block('lambda.pspline_time')
        beta = self.theta.coefficients[block.name]
        tau2 = self.theta.variances[block.name][0]
        K = block.penalties[0]
        expected = -0.5 * beta @ K.K @ beta / tau2 - 0.5 * K.rank * np.log(tau2)
        self.assertAlmostEqual(log_prior(block, self.theta), expected)

    def test_anisotropic_normalizer(self):
        block = self.model.block('mu.functional_random_intercept')
        theta = self.theta.with_variances(block.name, [1.0, 1.0])
        theta = theta.with_block(block.name, np.zeros(block.size))
        dense = block.penalties[0].K + block.penalties[1].K
        self.assertAlmostEqual(log_prior(block, theta), 0.5 * log_pseudo_det(dense), places=6)

    def test_zero_coefficients(self):
        theta = ThetaState(self.model, variances=random_variances(self.model, np.random.default_rng(4)))
        expected = sum(log_prior(block, theta) + log_hyperprior(theta.variances[block.name])
                       for block in self.model.blocks)
        self.assertAlmostEqual(log_posterior(theta) - long_loglik(theta) - surv_loglik(theta), expected)
        for block in self.model.blocks:
            if block.prior == 'parametric':
                self.assertEqual(log_prior(block, theta), 0.0)

    def test_invalid_variances(self):
        with self.assertRaises(DomainError):
            self.theta.with_variances('lambda.pspline_time', [0.0])
        with self.assertRaises(DimensionError):
            self.theta.with_variances('lambda.pspline_time', [1.0, 1.0])
        with self.assertRaises(DomainError):
            log_hyperprior([-1.0])


class TestDerivatives(unittest.TestCase):

    def check_model(self, model, states=20):
        rng = np.random.default_rng(11)
        for _ in range(states):
            theta = ThetaState(model, random_coefficients(model, rng), random_variances(model, rng))
            for block in model.blocks:
                with self.subTest(block=block.name):
                    s = score(block, theta)
                    fd = finite_difference_score(block, theta)
                    np.testing.assert_allclose(s, fd, rtol=1e-5, atol=1e-5 * max(1.0, np.max(np.abs(s))))
                    H = hessian(block, theta)
                    np.testing.assert_allclose(H, H.T)
                    fd_H = finite_difference_hessian(block, theta)
                    np.testing.assert_allclose(H, fd_H, rtol=1e-4, atol=1e-4 * max(1.0, np.max(np.abs(H))))

    def test_linear_association(self):
        self.check_model(tiny_model())

    def test_nonlinear_group_association(self):
        self.check_model(tiny_model(nonlinear=True, group=True))

    def test_association_hessian_negative_semidefinite(self):
        model = tiny_model(nonlinear=True)
        theta = ThetaState(model, random_coefficients(model, np.random.default_rng(5)))
        eig = np.linalg.eigvalsh(hessian('alpha.assoc', theta))
        self.assertLessEqual(eig.max(), 1e-10)

    def test_sigma_at_zero_residuals(self):
        surv = pd.DataFrame({'id': [1, 2], 'time': [5.0, 6.0], 'event': [0, 1]})
        long = pd.DataFrame({'id': [1, 1, 2], 'time': [0.0, 2.0, 3.0], 'y': [0.7, 0.7, 0.7]})
        spec = JointModelSpec(gamma_terms=(Term('intercept'),), mu_terms=(Term('intercept'),),
                              sigma_terms=(Term('intercept'),), alpha=AssocSpec())
        theta = ThetaState(JointModel(spec, Dataset(surv, long)), {'mu.intercept': [0.7]})
        np.testing.assert_allclose(score('sigma.intercept', theta), [-3.0])
        np.testing.assert_allclose(hessian('sigma.intercept', theta), [[-1e-6]])

    def test_marker_derivatives(self):
        data = tiny_data()
        identity = setup_assoc(AssocSpec(), data)
        g1, d1, d2 = g1_derivs(identity, np.array([0.3, 1.2]))
        np.testing.assert_array_equal(d1, 1.0)
        np.testing.assert_array_equal(d2, 0.0)
        nonlinear = setup_assoc(AssocSpec(g1='pspline'), data)
        eta = np.linspace(0.35, 1.45, 9)
        h = 1e-6
        g1, d1, d2 = g1_derivs(nonlinear, eta)
        fd1 = (g1_derivs(nonlinear, eta + h)[0] - g1_derivs(nonlinear, eta - h)[0]) / (2 * h)
        fd2 = (g1_derivs(nonlinear, eta + h)[1] - g1_derivs(nonlinear, eta - h)[1]) / (2 * h)
        np.testing.assert_allclose(d1, fd1, atol=1e-4)
        np.testing.assert_allclose(d2, fd2, atol=1e-3)


if __name__ == '__main__':
    unittest.main()
