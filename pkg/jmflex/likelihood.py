"""
Joint log-likelihood and log-posterior with analytic blockwise score
vectors and Hessians.

The cumulative hazard is integrated with a fixed Gauss-Legendre rule on
[0, T_i]; scores and Hessians differentiate that discretized integral, so
the mode conditions hold exactly for the objective that is optimized.
"""
import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import roots_legendre
from scipy.stats import invgamma

from jmflex.errors import ConfigurationError, DimensionError, DomainError, NumericalError
from jmflex.linalg import kronecker_sum_log_pdet, weighted_crossprod
from jmflex.model import (AssocSpec, JointModelSpec, Term, TermKind, assoc_covariate, assoc_penalties,
                          g1_design, g2_design, setup_assoc, setup_term, term_design, term_penalties)
from jmflex.splines import row_tensor

logger = logging.getLogger(__name__)

EXP_CAP = 700.0
VAGUE_SD = 1000.0
HYPER_A = 0.001
HYPER_B = 0.001


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Nodes and weights of a quadrature rule on [-1, 1]."""
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.ndim != 1 or nodes.shape != weights.shape or nodes.size == 0:
            raise ConfigurationError('Quadrature nodes and weights must be nonempty vectors of equal length.')
        if np.any(np.abs(nodes) >= 1) or np.any(np.diff(nodes) <= 0):
            raise ConfigurationError('Quadrature nodes must be strictly increasing inside (-1, 1).')
        if np.any(weights <= 0):
            raise ConfigurationError('Quadrature weights must be positive.')
        object.__setattr__(self, 'nodes', nodes)
        object.__setattr__(self, 'weights', weights)

    @classmethod
    def gauss_legendre(cls, n_nodes: int = 15) -> 'QuadratureRule':
        if int(n_nodes) < 1:
            raise ConfigurationError(f'Quadrature needs at least one node, got {n_nodes}.')
        nodes, weights = roots_legendre(int(n_nodes))
        return cls(nodes, weights)

    @property
    def size(self) -> int:
        return self.nodes.size

    def rescale(self, upper: np.ndarray) -> tuple:
        """Nodes and weights mapped to [0, upper_i]; both n x Q."""
        half = 0.5 * np.asarray(upper, dtype=float)[:, None]
        return half * (self.nodes + 1.0), half * self.weights


@dataclass(frozen=True, eq=False)
class Block:
    """
    One coefficient block beta_km and its prior.

    Attributes:
        name (str): '<predictor>.<term name>', e.g. 'mu.functional_random_intercept'.
        predictor (str): Owning predictor.
        term (Term or AssocSpec): Built term.
        size (int): Number of coefficients.
        penalties (tuple): Full-size PenaltyMatrix per variance parameter; empty for parametric blocks.
        marginals (tuple, optional): (K1, K2) of a Kronecker-sum penalty.
        start (np.ndarray): Starting coefficients.
        start_variances (np.ndarray): Starting variance parameters.
    """
    name: str
    predictor: str
    term: object
    size: int
    penalties: tuple = ()
    marginals: tuple = None
    start: np.ndarray = None
    start_variances: np.ndarray = None

    def __post_init__(self) -> None:
        start = np.zeros(self.size) if self.start is None else np.asarray(self.start, dtype=float)
        if start.shape != (self.size,):
            raise DimensionError(f'[{self.name}] {start.size} starting coefficients, expected {self.size}.')
        tau2 = np.ones(self.n_variances) if self.start_variances is None \
            else np.atleast_1d(np.asarray(self.start_variances, dtype=float))
        if tau2.shape != (self.n_variances,):
            raise DimensionError(f'[{self.name}] {tau2.size} starting variances, expected {self.n_variances}.')
        object.__setattr__(self, 'start', start)
        object.__setattr__(self, 'start_variances', tau2)
        if self.marginals is not None:
            eigs = tuple(np.clip(np.linalg.eigvalsh(K.K), 0.0, None) for K in self.marginals)
            object.__setattr__(self, '_eigs', eigs)

    @property
    def prior(self) -> str:
        if not self.penalties:
            return 'parametric'
        return 'anisotropic' if len(self.penalties) == 2 else 'isotropic'

    @property
    def n_variances(self) -> int:
        return len(self.penalties)

    @property
    def marginal_eigs(self) -> tuple:
        return getattr(self, '_eigs', None)

    @property
    def is_hazard(self) -> bool:
        return self.predictor in ('lambda', 'gamma', 'alpha')


class JointModel:
    """
    A JointModelSpec built against a Dataset: fixed bases, constraints,
    blocks and the design matrices of every block at the longitudinal
    records ('long'), the follow-up times ('surv') and the quadrature
    nodes ('quad').

    Attributes:
        spec (JointModelSpec): Spec with all terms built.
        data (Dataset): The data.
        rule (QuadratureRule): Rule for the cumulative hazard. Default is 15-node Gauss-Legendre.
        blocks (list): Blocks in update order lambda, gamma, alpha, mu, sigma.
    """

    CONTEXTS = {'lambda': ('surv', 'quad'), 'gamma': ('surv', 'quad'), 'alpha': ('surv', 'quad'),
                'mu': ('long', 'surv', 'quad'), 'sigma': ('long',)}

    def __init__(self, spec: JointModelSpec, data, rule: QuadratureRule = None) -> None:
        spec.validate()
        self.data = data
        self.rule = rule or QuadratureRule.gauss_legendre()
        built = {k: tuple(setup_term(term, k, data) for term in spec.terms(k))
                 for k in ('lambda', 'gamma', 'mu', 'sigma')}
        self.spec = replace(spec, lambda_terms=built['lambda'], gamma_terms=built['gamma'],
                            mu_terms=built['mu'], sigma_terms=built['sigma'], alpha=setup_assoc(spec.alpha, data))

        quad_times, quad_weights = self.rule.rescale(data.T)
        self.quad_subjects = np.repeat(np.arange(data.n), self.rule.size)
        self.quad_times = quad_times.ravel()
        self.quad_weights = quad_weights.ravel()
        self._rows = {'long': (data.subject_index, data.t, True),
                      'surv': (np.arange(data.n), data.T, False),
                      'quad': (self.quad_subjects, self.quad_times, False)}

        self.blocks = []
        for k in ('lambda', 'gamma'):
            self.blocks.extend(self._term_block(k, term) for term in self.spec.terms(k))
        self.blocks.extend(self._assoc_blocks())
        for k in ('mu', 'sigma'):
            self.blocks.extend(self._term_block(k, term) for term in self.spec.terms(k))
        self._by_name = {block.name: block for block in self.blocks}

        self._designs = {}
        for block in self.blocks:
            if block.name == 'alpha.assoc':
                continue
            for ctx in self.CONTEXTS[block.predictor]:
                subjects, times, long_rows = self._rows[ctx]
                self._designs[(block.name, ctx)] = term_design(block.term, data, subjects, times, long_rows)
        alpha = self.alpha
        self._g2 = {ctx: g2_design(alpha, assoc_covariate(alpha, data, self._rows[ctx][0]), self._rows[ctx][1])
                    for ctx in ('surv', 'quad')}
        logger.debug(f'Built joint model with {len(self.blocks)} blocks and {self.n_coefficients} coefficients')

    def _term_block(self, predictor: str, term: Term) -> Block:
        penalties, marginals = term_penalties(term, self.data.n)
        return Block(f'{predictor}.{term.name}', predictor, term, term.width(self.data.n), tuple(penalties),
                     marginals, term.coefficients, term.variances)

    def _assoc_blocks(self) -> list:
        alpha = self.alpha
        penalties, marginals = assoc_penalties(alpha)
        blocks = [Block('alpha.assoc', 'alpha', alpha, alpha.width, tuple(penalties), marginals,
                        alpha.coefficients, alpha.variances)]
        if alpha.has_group_intercepts:
            term = Term(TermKind.LINEAR_COVARIATE, name='group', covariate=alpha.g2_column, factor=True,
                        levels=alpha.levels, built=True)
            blocks.append(Block('alpha.group', 'alpha', term, len(alpha.levels) - 1,
                                start=alpha.group_intercepts))
        return blocks

    @property
    def alpha(self) -> AssocSpec:
        return self.spec.alpha

    @property
    def n_coefficients(self) -> int:
        return sum(block.size for block in self.blocks)

    def block(self, name: str) -> Block:
        if name not in self._by_name:
            raise ConfigurationError(f"Unknown block '{name}'. Available: {list(self._by_name)}.")
        return self._by_name[name]

    def predictor_blocks(self, k: str) -> list:
        return [block for block in self.blocks if block.predictor == k]

    def design(self, name: str, ctx: str):
        return self._designs[(name, ctx)]

    def g2(self, ctx: str) -> np.ndarray:
        return self._g2[ctx]

    def n_eff(self, block: Block) -> int:
        """Observations informing a block: N for longitudinal predictors, n otherwise."""
        return self.data.N if block.predictor in ('mu', 'sigma') else self.data.n

    def initial_state(self) -> 'ThetaState':
        return ThetaState(self)


class ThetaState:
    """
    Parameter state theta with predictor evaluations cached at the
    longitudinal records, follow-up times and quadrature nodes.

    The cache is recomputed on every block update. `suspect` is True while
    an exponent had to be capped.
    """

    def __init__(self, model: JointModel, coefficients: dict = None, variances: dict = None) -> None:
        self.model = model
        self.coefficients = {}
        self.variances = {}
        coefficients = coefficients or {}
        variances = variances or {}
        for block in model.blocks:
            beta = np.asarray(coefficients.get(block.name, block.start), dtype=float)
            if beta.shape != (block.size,):
                raise DimensionError(f'[{block.name}] {beta.size} coefficients, expected {block.size}.')
            self.coefficients[block.name] = beta.copy()
            self.variances[block.name] = _checked_variances(block, variances.get(block.name, block.start_variances))
        self._cache = {}
        self._capped = {'surv': False, 'long': False}
        for k in ('lambda', 'gamma', 'mu', 'sigma'):
            self._refresh_predictor(k)
        self._refresh_alpha(designs=True)
        self._refresh_surv()
        self._refresh_long()

    @property
    def suspect(self) -> bool:
        return any(self._capped.values())

    def copy(self) -> 'ThetaState':
        new = ThetaState.__new__(ThetaState)
        new.model = self.model
        new.coefficients = dict(self.coefficients)
        new.variances = dict(self.variances)
        new._cache = dict(self._cache)
        new._capped = dict(self._capped)
        return new

    def set_block(self, name: str, beta: np.ndarray) -> None:
        block = self.model.block(name)
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (block.size,):
            raise DimensionError(f'[{name}] {beta.size} coefficients, expected {block.size}.')
        if not np.all(np.isfinite(beta)):
            raise NumericalError('non-finite coefficients', block=name)
        self.coefficients[name] = beta.copy()
        k = block.predictor
        if k == 'alpha':
            self._refresh_alpha(designs=False)
        else:
            self._refresh_predictor(k)
        if k == 'mu':
            self._refresh_alpha(designs=True)
        if k != 'sigma':
            self._refresh_surv()
        if k in ('mu', 'sigma'):
            self._refresh_long()

    def set_variances(self, name: str, tau2) -> None:
        self.variances[name] = _checked_variances(self.model.block(name), tau2)

    def with_block(self, name: str, beta: np.ndarray) -> 'ThetaState':
        new = self.copy()
        new.set_block(name, beta)
        return new

    def with_variances(self, name: str, tau2) -> 'ThetaState':
        new = self.copy()
        new.set_variances(name, tau2)
        return new

    def eta(self, k: str, ctx: str) -> np.ndarray:
        return self._cache[('eta', k, ctx)]

    def g1(self, order: int, ctx: str) -> np.ndarray:
        return self._cache[('g1', order, ctx)]

    def assoc_design(self, ctx: str):
        return self._cache[('X_alpha', ctx)]

    @property
    def eta_T(self) -> np.ndarray:
        """Log-hazard at the follow-up times."""
        return self._cache['eta_T']

    @property
    def omega(self) -> np.ndarray:
        """Quadrature contributions to the cumulative hazard, one per (subject, node)."""
        return self._cache['omega']

    @property
    def Lambda(self) -> np.ndarray:
        return self._cache['Lambda']

    @property
    def residuals(self) -> np.ndarray:
        return self._cache['resid']

    @property
    def inv_var(self) -> np.ndarray:
        """exp(-2 eta_sigma) at the longitudinal records."""
        return self._cache['inv_var']

    def _refresh_predictor(self, k: str) -> None:
        model = self.model
        for ctx in model.CONTEXTS[k]:
            eta = np.zeros(len(model._rows[ctx][0]))
            for block in model.predictor_blocks(k):
                eta = eta + model.design(block.name, ctx) @ self.coefficients[block.name]
            if not np.all(np.isfinite(eta)):
                raise NumericalError(f'non-finite predictor evaluation ({ctx})', block=k)
            self._cache[('eta', k, ctx)] = np.asarray(eta)

    def _refresh_alpha(self, designs: bool) -> None:
        model = self.model
        alpha = model.alpha
        for ctx in ('surv', 'quad'):
            if designs:
                eta_mu = self.eta('mu', ctx)
                for order in (0, 1, 2):
                    self._cache[('g1', order, ctx)] = g1_design(alpha, eta_mu, order)
                self._cache[('X_alpha', ctx)] = row_tensor(self._cache[('g1', 0, ctx)], model.g2(ctx))
            eta = self._cache[('X_alpha', ctx)] @ self.coefficients['alpha.assoc']
            if 'alpha.group' in self.coefficients:
                eta = eta + model.design('alpha.group', ctx) @ self.coefficients['alpha.group']
            if not np.all(np.isfinite(eta)):
                raise NumericalError(f'non-finite association evaluation ({ctx})', block='alpha')
            self._cache[('eta', 'alpha', ctx)] = eta

    def _refresh_surv(self) -> None:
        model = self.model
        self._cache['eta_T'] = self.eta('lambda', 'surv') + self.eta('gamma', 'surv') + self.eta('alpha', 'surv')
        exponent = self.eta('lambda', 'quad') + self.eta('gamma', 'quad') + self.eta('alpha', 'quad')
        capped = exponent > EXP_CAP
        if capped.any():
            logger.warning(f'Hazard exponent capped at {EXP_CAP} for {int(capped.sum())} quadrature node(s)')
        self._capped['surv'] = bool(capped.any())
        omega = np.exp(np.minimum(exponent, EXP_CAP)) * model.quad_weights
        self._cache['omega'] = omega
        self._cache['Lambda'] = np.bincount(model.quad_subjects, weights=omega, minlength=model.data.n)

    def _refresh_long(self) -> None:
        self._cache['resid'] = self.model.data.y - self.eta('mu', 'long')
        exponent = -2.0 * self.eta('sigma', 'long')
        capped = exponent > EXP_CAP
        self._capped['long'] = bool(capped.any())
        self._cache['inv_var'] = np.exp(np.minimum(exponent, EXP_CAP))


def _checked_variances(block: Block, tau2) -> np.ndarray:
    tau2 = np.atleast_1d(np.asarray(tau2, dtype=float))
    if tau2.shape != (block.n_variances,):
        raise DimensionError(f'[{block.name}] {tau2.size} variance parameters, expected {block.n_variances}.')
    if np.any(~np.isfinite(tau2)) or np.any(tau2 <= 0):
        raise DomainError(f'[{block.name}] variance parameters must be positive, got {tau2}.')
    return tau2.copy()


def _block(model: JointModel, block) -> Block:
    return block if isinstance(block, Block) else model.block(block)


def long_loglik(theta: ThetaState) -> float:
    data = theta.model.data
    eta_sigma = theta.eta('sigma', 'long')
    r = theta.residuals
    return float(-0.5 * data.N * np.log(2.0 * np.pi) - np.sum(eta_sigma) - 0.5 * np.sum(r ** 2 * theta.inv_var))


def cumulative_hazard(theta: ThetaState, i: int = None):
    """Lambda_i(T_i) for subject i, or the vector over all subjects."""
    return theta.Lambda if i is None else float(theta.Lambda[i])


def surv_loglik(theta: ThetaState) -> float:
    return float(theta.model.data.delta @ theta.eta_T - np.sum(theta.Lambda))


def loglik(theta: ThetaState) -> float:
    return long_loglik(theta) + surv_loglik(theta)


def prior_precision(block: Block, tau2: np.ndarray) -> np.ndarray:
    """Precision of beta | tau2: sum_j K_j / tau2_j, or I / 1000^2 for parametric blocks."""
    if block.prior == 'parametric':
        return np.eye(block.size) / VAGUE_SD ** 2
    tau2 = np.atleast_1d(tau2)
    if np.any(tau2 <= 0):
        raise DomainError(f'[{block.name}] variance parameters must be positive, got {tau2}.')
    return sum(K.K / t for K, t in zip(block.penalties, tau2))


def log_prior(block, theta: ThetaState) -> float:
    """Log density of beta_km | tau2_km (pseudo-determinant normalizer, no 2 pi constants)."""
    block = _block(theta.model, block)
    beta = theta.coefficients[block.name]
    tau2 = theta.variances[block.name]
    if block.prior == 'parametric':
        return float(-0.5 * beta @ beta / VAGUE_SD ** 2)
    if np.any(tau2 <= 0):
        raise DomainError(f'[{block.name}] variance parameters must be positive, got {tau2}.')
    if block.prior == 'isotropic':
        K = block.penalties[0]
        return float(-0.5 * K.rank * np.log(tau2[0]) - 0.5 * beta @ K.K @ beta / tau2[0])
    quad = sum(float(beta @ K.K @ beta) / t for K, t in zip(block.penalties, tau2))
    eig1, eig2 = block.marginal_eigs
    return 0.5 * kronecker_sum_log_pdet(eig1, eig2, tau2[0], tau2[1]) - 0.5 * quad


def log_hyperprior(tau2) -> float:
    """Sum of IG(0.001, 0.001) log densities."""
    tau2 = np.atleast_1d(np.asarray(tau2, dtype=float))
    if tau2.size == 0:
        return 0.0
    if np.any(tau2 <= 0):
        raise DomainError(f'Variance parameters must be positive, got {tau2}.')
    return float(np.sum(invgamma.logpdf(tau2, HYPER_A, scale=HYPER_B)))


def log_posterior(theta: ThetaState) -> float:
    """Unnormalized log-posterior: both log-likelihoods, all block priors and hyperpriors."""
    out = loglik(theta)
    for block in theta.model.blocks:
        out += log_prior(block, theta) + log_hyperprior(theta.variances[block.name])
    return out


def g1_derivs(alpha: AssocSpec, eta_mu: np.ndarray) -> tuple:
    """(g1, g1', g1'') at eta_mu: (eta, 1, 0) for identity, the constrained basis and its derivatives otherwise."""
    return tuple(g1_design(alpha, eta_mu, order) for order in (0, 1, 2))


def _assoc_slopes(theta: ThetaState, ctx: str) -> tuple:
    """First and second derivative of eta_alpha with respect to eta_mu."""
    beta = theta.coefficients['alpha.assoc']
    g2 = theta.model.g2(ctx)
    a = row_tensor(theta.g1(1, ctx), g2) @ beta
    b = row_tensor(theta.g1(2, ctx), g2) @ beta
    return a, b


def _hazard_designs(theta: ThetaState, block: Block) -> tuple:
    if block.name == 'alpha.assoc':
        return theta.assoc_design('surv'), theta.assoc_design('quad')
    model = theta.model
    return model.design(block.name, 'surv'), model.design(block.name, 'quad')


def loglik_score(block, theta: ThetaState) -> np.ndarray:
    """Gradient of the joint log-likelihood with respect to one block."""
    model = theta.model
    block = _block(model, block)
    data = model.data
    if block.predictor == 'sigma':
        X = model.design(block.name, 'long')
        return np.asarray(X.T @ (theta.residuals ** 2 * theta.inv_var - 1.0))
    if block.predictor == 'mu':
        a_T, _ = _assoc_slopes(theta, 'surv')
        a_U, _ = _assoc_slopes(theta, 'quad')
        X_l = model.design(block.name, 'long')
        X_T = model.design(block.name, 'surv')
        X_U = model.design(block.name, 'quad')
        return np.asarray(X_l.T @ (theta.residuals * theta.inv_var) + X_T.T @ (data.delta * a_T)
                          - X_U.T @ (theta.omega * a_U))
    X_T, X_U = _hazard_designs(theta, block)
    return np.asarray(X_T.T @ data.delta - X_U.T @ theta.omega)


def loglik_hessian(block, theta: ThetaState) -> np.ndarray:
    """Hessian of the joint log-likelihood with respect to one block."""
    model = theta.model
    block = _block(model, block)
    data = model.data
    if block.predictor == 'sigma':
        X = model.design(block.name, 'long')
        H = -2.0 * weighted_crossprod(X, theta.residuals ** 2 * theta.inv_var)
    elif block.predictor == 'mu':
        a_T, b_T = _assoc_slopes(theta, 'surv')
        a_U, b_U = _assoc_slopes(theta, 'quad')
        H = (-weighted_crossprod(model.design(block.name, 'long'), theta.inv_var)
             + weighted_crossprod(model.design(block.name, 'surv'), data.delta * b_T)
             - weighted_crossprod(model.design(block.name, 'quad'), theta.omega * (a_U ** 2 + b_U)))
    else:
        _, X_U = _hazard_designs(theta, block)
        H = -weighted_crossprod(X_U, theta.omega)
    return 0.5 * (H + H.T)


def score(block, theta: ThetaState, prior: bool = True) -> np.ndarray:
    """
    Analytic gradient of the log-posterior (or, with prior=False, of the
    log-likelihood) with respect to one block.

    Parameters:
        block (str or Block): Block name, e.g. 'mu.intercept'.
        theta (ThetaState): Current state.
        prior (bool, optional): Include the prior gradient -P beta. Default is True.

    Returns:
        np.ndarray: Score vector of the block's length.
    """
    block = _block(theta.model, block)
    s = loglik_score(block, theta)
    if prior:
        s = s - prior_precision(block, theta.variances[block.name]) @ theta.coefficients[block.name]
    return s


def hessian(block, theta: ThetaState, prior: bool = True) -> np.ndarray:
    """Analytic, symmetric Hessian of the log-posterior (or log-likelihood) for one block."""
    block = _block(theta.model, block)
    H = loglik_hessian(block, theta)
    if prior:
        H = H - prior_precision(block, theta.variances[block.name])
    return H
