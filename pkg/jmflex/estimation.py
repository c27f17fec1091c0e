"""
Posterior-mode estimation by blockwise Newton-Raphson with a step-length
grid search and AICc-driven variance selection.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from jmflex.errors import ConfigurationError, NonConcaveBlock, NumericalError
from jmflex.likelihood import (Block, JointModel, ThetaState, hessian, log_posterior, log_prior, loglik,
                               loglik_hessian, loglik_score, prior_precision, score)
from jmflex.linalg import PrecisionFactor
from jmflex.utils import Progress

logger = logging.getLogger(__name__)


@dataclass
class ModeFitConfig:
    """
    Settings of the posterior-mode fit.

    Attributes:
        max_outer_iters (int): Maximum number of sweeps over all blocks. Default is 100.
        logpost_rel_tol (float): Stop when the relative log-posterior change of a sweep falls below. Default is 1e-6.
        steplength_grid (tuple): Candidate step lengths in (0, 1]. Default is 0.1, 0.2, ..., 1.0.
        variance_search_grid (tuple): Candidate tau^2 values. Default is 31 points on log10 tau^2 in [-4, 4].
        ridge_boost (float): Extra ridge added to the negative Hessian before solving. Default is 0.
        optimize_variances (bool): Select variances by AICc after every sweep. Default is True.
        max_ridge_doublings (int): Ridge doublings before a block is declared non-concave. Default is 8.
        progress (bool): Report each sweep through Progress. Default is False.
    """
    max_outer_iters: int = 100
    logpost_rel_tol: float = 1e-6
    steplength_grid: tuple = tuple(np.round(np.linspace(0.1, 1.0, 10), 10))
    variance_search_grid: tuple = tuple(10.0 ** np.linspace(-4.0, 4.0, 31))
    ridge_boost: float = 0.0
    optimize_variances: bool = True
    max_ridge_doublings: int = 8
    progress: bool = False

    def __post_init__(self) -> None:
        self.steplength_grid = tuple(float(v) for v in self.steplength_grid)
        self.variance_search_grid = tuple(float(v) for v in self.variance_search_grid)
        if self.max_outer_iters < 1:
            raise ConfigurationError(f'max_outer_iters must be at least 1, got {self.max_outer_iters}.')
        if not self.logpost_rel_tol > 0:
            raise ConfigurationError(f'logpost_rel_tol must be positive, got {self.logpost_rel_tol}.')
        if not self.steplength_grid or any(not 0 < v <= 1 for v in self.steplength_grid):
            raise ConfigurationError('steplength_grid must be a nonempty grid on (0, 1].')
        if not self.variance_search_grid or any(not v > 0 for v in self.variance_search_grid):
            raise ConfigurationError('variance_search_grid must be a nonempty grid of positive values.')
        if self.ridge_boost < 0:
            raise ConfigurationError(f'ridge_boost must be nonnegative, got {self.ridge_boost}.')


@dataclass
class FitResult:
    """
    Posterior mode and the curvature around it.

    Attributes:
        model (JointModel): The fitted model.
        theta (ThetaState): State at the mode.
        curvature (dict): Negative log-posterior Hessian per block at the mode.
        logpost_trace (list): Log-posterior after each sweep (first entry: start).
        update_gains (list): Log-posterior gain of every accepted Newton update; all nonnegative.
        iterations (int): Sweeps performed.
        converged (bool): Whether the relative tolerance was reached.
        restarts (int): Restarts needed before this fit succeeded.
    """
    model: JointModel
    theta: ThetaState
    curvature: dict
    logpost_trace: list = field(default_factory=list)
    update_gains: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    restarts: int = 0

    @property
    def coefficients(self) -> dict:
        return self.theta.coefficients

    @property
    def variances(self) -> dict:
        return self.theta.variances

    @property
    def suspect(self) -> bool:
        return self.theta.suspect

    def _factor(self, name: str) -> PrecisionFactor:
        return PrecisionFactor.with_ridge(self.curvature[name], name)

    def covariance(self, name: str) -> np.ndarray:
        return self._factor(name).inverse()

    def sd(self, name: str) -> np.ndarray:
        return np.sqrt(self._factor(name).inverse_diag())

    def credible_intervals(self, level: float = 0.95) -> dict:
        """Approximate intervals from N(beta_hat, [-H]^-1), per block."""
        from scipy.stats import norm
        z = norm.ppf(0.5 + 0.5 * level)
        out = {}
        for name, beta in self.coefficients.items():
            sd = self.sd(name)
            out[name] = (beta - z * sd, beta + z * sd)
        return out

    def approximate_draws(self, n_draws: int, rng: np.random.Generator) -> dict:
        """Draws from N(beta_hat, [-H(beta_hat)]^-1) per block, each of shape (n_draws, p)."""
        out = {}
        for name, beta in self.coefficients.items():
            factor = self._factor(name)
            out[name] = np.stack([factor.draw(beta, rng) for _ in range(int(n_draws))]) if n_draws > 0 \
                else np.empty((0, beta.size))
        return out


def block_objective(block: Block, theta: ThetaState) -> float:
    """Log-posterior up to terms that do not depend on the block's coefficients."""
    return loglik(theta) + log_prior(block, theta)


def newton_update(block, theta: ThetaState, config: ModeFitConfig = None) -> tuple:
    """
    One Newton-Raphson step for a block, step length chosen from the grid
    to maximize the log-posterior.

    Parameters:
        block (str or Block): The block to update.
        theta (ThetaState): Current state; left unchanged.
        config (ModeFitConfig, optional): Step-length grid and ridge settings.

    Raises:
        NonConcaveBlock: The negative Hessian is not positive definite even after ridging.

    Returns:
        tuple: (new ThetaState, log-posterior gain >= 0). The input state is
            returned unchanged when no step length improves the log-posterior.
    """
    config = config or ModeFitConfig()
    model = theta.model
    block = block if isinstance(block, Block) else model.block(block)
    s = score(block, theta)
    neg_H = -hessian(block, theta)
    if config.ridge_boost > 0:
        neg_H = neg_H + config.ridge_boost * np.eye(block.size)
    direction = PrecisionFactor.with_ridge(neg_H, block.name, config.max_ridge_doublings).solve(s)
    beta = theta.coefficients[block.name]
    current = block_objective(block, theta)
    best, best_value = theta, current
    for nu in config.steplength_grid:
        try:
            candidate = theta.with_block(block.name, beta + nu * direction)
        except NumericalError:
            continue
        value = block_objective(block, candidate)
        if np.isfinite(value) and value > best_value:
            best, best_value = candidate, value
    return best, best_value - current


def aicc(log_lik: float, edf: float, n_eff: int) -> float:
    """Corrected AIC; infinite when edf leaves no residual degrees of freedom."""
    if n_eff - edf - 1 <= 0:
        return np.inf
    return -2.0 * log_lik + 2.0 * edf + 2.0 * edf * (edf + 1.0) / (n_eff - edf - 1.0)


def optimize_variance(block, theta: ThetaState, config: ModeFitConfig = None) -> ThetaState:
    """
    Select the block's variance parameters by AICc over the grid.

    For each candidate, the coefficients are moved by one full Newton step
    under the candidate prior and the AICc of that fit is computed with
    edf = tr[(-H_pen)^-1 (-H_unpen)]. Anisotropic blocks are searched one
    component at a time. Only the variances of the returned state change.

    Raises:
        ConfigurationError: The block has no variance parameters.
        NonConcaveBlock: No grid point gives a positive definite penalized curvature.
    """
    config = config or ModeFitConfig()
    model = theta.model
    block = block if isinstance(block, Block) else model.block(block)
    if block.n_variances == 0:
        raise ConfigurationError(f"[{block.name}] block has no variance parameters.")
    beta = theta.coefficients[block.name]
    s_unpen = loglik_score(block, theta)
    neg_H_unpen = -loglik_hessian(block, theta)
    n_eff = model.n_eff(block)

    def criterion(tau2: np.ndarray) -> float:
        P = prior_precision(block, tau2)
        try:
            factor = PrecisionFactor(neg_H_unpen + P)
        except np.linalg.LinAlgError:
            return np.nan
        try:
            fitted = theta.with_block(block.name, beta + factor.solve(s_unpen - P @ beta))
        except NumericalError:
            return np.nan
        edf = float(np.trace(factor.solve(neg_H_unpen)))
        return aicc(loglik(fitted), edf, n_eff)

    tau2 = theta.variances[block.name].copy()
    best_value = criterion(tau2)
    any_valid = np.isfinite(best_value) or best_value == np.inf
    for component in range(block.n_variances):
        for value in config.variance_search_grid:
            candidate = tau2.copy()
            candidate[component] = value
            crit = criterion(candidate)
            if np.isnan(crit):
                continue
            any_valid = True
            if not np.isfinite(best_value) or crit < best_value:
                best_value, tau2 = crit, candidate
    if not any_valid:
        raise NonConcaveBlock(block.name, 'penalized Hessian not negative definite at any variance grid point')
    logger.debug(f'[{block.name}] tau2 = {np.array2string(tau2, precision=4)}, AICc = {best_value:.4f}')
    return theta.with_variances(block.name, tau2)


def posterior_mode(model: JointModel, config: ModeFitConfig = None, start: ThetaState = None) -> FitResult:
    """
    Blockwise Newton-Raphson to the posterior mode.

    Each sweep updates the coefficient blocks in the order lambda, gamma,
    alpha, mu, sigma, then re-selects every variance parameter by AICc.

    Parameters:
        model (JointModel): Built model (carries the data and quadrature rule).
        config (ModeFitConfig, optional): Fit settings.
        start (ThetaState, optional): Starting state; the blocks' starting values when None.

    Raises:
        NonConcaveBlock: A block's Hessian could not be made negative definite.

    Returns:
        FitResult
    """
    config = config or ModeFitConfig()
    theta = start.copy() if start is not None else model.initial_state()
    lp = log_posterior(theta)
    trace, gains = [lp], []
    progress = Progress(config.max_outer_iters) if config.progress else None
    converged = False
    iteration = 0
    for iteration in range(1, config.max_outer_iters + 1):
        for block in model.blocks:
            theta, gain = newton_update(block, theta, config)
            gains.append(gain)
        if config.optimize_variances:
            for block in model.blocks:
                if block.n_variances:
                    theta = optimize_variance(block, theta, config)
        new_lp = log_posterior(theta)
        trace.append(new_lp)
        change = abs(new_lp - lp) / max(1.0, abs(lp))
        lp = new_lp
        if progress is not None:
            progress.update(iteration, message=f'log-posterior {lp:.4f}, relative change {change:.2e}')
        if change < config.logpost_rel_tol:
            converged = True
            break
    if progress is not None:
        progress.complete('Posterior mode ' + ('converged' if converged else 'stopped at iteration limit'))
    if theta.suspect:
        logger.warning('Posterior mode reached with capped hazard exponents; treat the fit as suspect')
    curvature = {block.name: -hessian(block, theta) for block in model.blocks}
    return FitResult(model, theta, curvature, trace, gains, iteration, converged)
