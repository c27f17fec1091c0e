"""
Posterior-mean sampling: derivative-based Metropolis-Hastings block
updates, Gibbs and slice updates of the variances, DIC and summaries.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.stats import invgamma

from jmflex.errors import ConfigurationError, NonConcaveBlock, NumericalError
from jmflex.estimation import FitResult, block_objective
from jmflex.likelihood import HYPER_A, HYPER_B, Block, JointModel, ThetaState, hessian, log_posterior, loglik, score
from jmflex.linalg import PrecisionFactor, kronecker_sum_log_pdet
from jmflex.utils import Progress

logger = logging.getLogger(__name__)


@dataclass
class McmcConfig:
    """
    Attributes:
        n_iter (int): Total iterations. Default is 13000.
        burnin (int): Iterations discarded first. Default is 3000.
        thin (int): Keep every thin-th iteration after burnin. Default is 2.
        rng_seed (int): Seed of the chain's generator. Default is 0.
        progress (bool): Report through Progress every `report_every` iterations. Default is False.
        report_every (int): Default is 500.
    """
    n_iter: int = 13000
    burnin: int = 3000
    thin: int = 2
    rng_seed: int = 0
    progress: bool = False
    report_every: int = 500

    def __post_init__(self) -> None:
        if self.n_iter < 1:
            raise ConfigurationError(f'n_iter must be positive, got {self.n_iter}.')
        if not 0 <= self.burnin < self.n_iter:
            raise ConfigurationError(f'burnin must lie in [0, n_iter), got {self.burnin}.')
        if self.thin < 1:
            raise ConfigurationError(f'thin must be at least 1, got {self.thin}.')

    @property
    def n_saved(self) -> int:
        return (self.n_iter - self.burnin) // self.thin


@dataclass
class SampleChain:
    """
    Thinned post-burnin draws of one chain.

    Attributes:
        coefficients (dict): Block name -> (S, p) coefficient draws.
        variances (dict): Block name -> (S, n_variances) variance draws.
        logpost (np.ndarray): Log-posterior at each saved draw.
        deviance (np.ndarray): -2 (log-likelihood) at each saved draw.
        accepted (dict): Block name -> accepted MH proposals over all iterations.
        n_iter (int): Iterations run.
        iterations (np.ndarray): Iteration number of each saved draw.
        flagged (list): (iteration, block) pairs whose proposal could not be formed.
        seed (int): Seed of the chain.
    """
    coefficients: dict
    variances: dict
    logpost: np.ndarray
    deviance: np.ndarray
    accepted: dict
    n_iter: int
    iterations: np.ndarray
    flagged: list = field(default_factory=list)
    seed: int = 0

    @property
    def n_draws(self) -> int:
        return len(self.logpost)

    @property
    def acceptance_rates(self) -> dict:
        return {name: count / self.n_iter for name, count in self.accepted.items()}

    def mean_coefficients(self) -> dict:
        return {name: draws.mean(axis=0) for name, draws in self.coefficients.items()}

    def mean_variances(self) -> dict:
        return {name: draws.mean(axis=0) for name, draws in self.variances.items()}

    def to_frame(self) -> pd.DataFrame:
        """Long format: iteration, block, index, value; variances appear as '<block>:tau2'."""
        frames = []
        for label, store in (('', self.coefficients), (':tau2', self.variances)):
            for name, draws in store.items():
                S, p = draws.shape
                if p == 0:
                    continue
                frames.append(pd.DataFrame({'iteration': np.repeat(self.iterations, p),
                                            'block': name + label,
                                            'index': np.tile(np.arange(p), S),
                                            'value': draws.ravel()}))
        return pd.concat(frames, ignore_index=True) if frames else \
            pd.DataFrame(columns=['iteration', 'block', 'index', 'value'])


def _proposal(block: Block, theta: ThetaState) -> tuple:
    """Gaussian proposal from the second-order expansion at theta: (factor of -H, mean beta - H^-1 s)."""
    factor = PrecisionFactor.with_ridge(-hessian(block, theta), block.name)
    return factor, theta.coefficients[block.name] + factor.solve(score(block, theta))


def mh_block_update(block, theta: ThetaState, rng: np.random.Generator) -> tuple:
    """
    Metropolis-Hastings update of one block with the derivative-based proposal.

    The reverse proposal density is re-derived at the candidate, so the
    acceptance ratio carries the asymmetric-proposal correction.

    Raises:
        NonConcaveBlock: No proposal precision could be formed at the current state.

    Returns:
        tuple: (ThetaState, accepted)
    """
    model = theta.model
    block = block if isinstance(block, Block) else model.block(block)
    factor, mean = _proposal(block, theta)
    beta = theta.coefficients[block.name]
    draw = factor.draw(mean, rng)
    try:
        candidate = theta.with_block(block.name, draw)
        back_factor, back_mean = _proposal(block, candidate)
    except (NumericalError, NonConcaveBlock):
        return theta, False
    log_ratio = (block_objective(block, candidate) - block_objective(block, theta)
                 + back_factor.log_density(beta, back_mean) - factor.log_density(draw, mean))
    if not np.isfinite(log_ratio):
        return theta, False
    if np.log(rng.uniform()) < log_ratio:
        return candidate, True
    return theta, False


def gibbs_variance(block, theta, rng: np.random.Generator, a0: float = HYPER_A, b0: float = HYPER_B) -> np.ndarray:
    """
    Draw tau^2 of an isotropic block from IG(a0 + rank/2, b0 + beta'K beta/2).

    Only `theta.coefficients` is read.
    """
    if block.prior != 'isotropic':
        raise ConfigurationError(f"[{block.name}] Gibbs update needs an isotropic block, got '{block.prior}'.")
    beta = theta.coefficients[block.name]
    K = block.penalties[0]
    shape = a0 + 0.5 * K.rank
    scale = b0 + 0.5 * float(beta @ K.K @ beta)
    return np.array([scale / rng.standard_gamma(shape)])


def variance_log_conditional(block, beta: np.ndarray, tau2: np.ndarray, component: int,
                             a0: float = HYPER_A, b0: float = HYPER_B):
    """Log full conditional of log tau2[component] of an anisotropic block, up to a constant."""
    quad = [float(beta @ K.K @ beta) for K in block.penalties]
    eig1, eig2 = block.marginal_eigs
    tau2 = np.array(tau2, dtype=float)

    def target(x: float) -> float:
        tau2[component] = np.exp(x)
        value = 0.5 * kronecker_sum_log_pdet(eig1, eig2, tau2[0], tau2[1])
        value -= 0.5 * quad[component] / tau2[component]
        value += invgamma.logpdf(tau2[component], a0, scale=b0) + x
        return float(value)

    return target


def slice_variance(block, component: int, theta, rng: np.random.Generator, width: float = 1.0,
                   max_steps: int = 100) -> float:
    """
    Stepping-out slice sample of one variance component of an anisotropic
    block, on the log scale.

    Only `theta.coefficients` and `theta.variances` are read.

    Raises:
        NumericalError: The slice could not be bracketed within `max_steps` steps.
    """
    if block.marginal_eigs is None or block.n_variances != 2:
        raise ConfigurationError(f'[{block.name}] slice update needs an anisotropic block.')
    tau2 = theta.variances[block.name]
    target = variance_log_conditional(block, theta.coefficients[block.name], tau2, component)
    x0 = float(np.log(tau2[component]))
    log_y = target(x0) + np.log(rng.uniform())
    left = x0 - width * rng.uniform()
    right = left + width
    steps = 0
    while target(left) > log_y:
        left -= width
        steps += 1
        if steps > max_steps:
            raise NumericalError(f'slice expansion exceeded {max_steps} steps', block=block.name)
    steps = 0
    while target(right) > log_y:
        right += width
        steps += 1
        if steps > max_steps:
            raise NumericalError(f'slice expansion exceeded {max_steps} steps', block=block.name)
    for _ in range(max_steps * 10):
        x1 = rng.uniform(left, right)
        if target(x1) > log_y:
            return float(np.exp(x1))
        if x1 < x0:
            left = x1
        else:
            right = x1
    raise NumericalError('slice shrinkage did not terminate', block=block.name)


def posterior_mean(model: JointModel, mcmc: McmcConfig = None, start=None) -> SampleChain:
    """
    Run one chain: per iteration an MH update of every coefficient block,
    then a Gibbs (isotropic) or slice (anisotropic) update of every
    variance block.

    Parameters:
        model (JointModel): Built model.
        mcmc (McmcConfig, optional): Chain settings.
        start (FitResult or ThetaState, optional): Starting point, normally the posterior mode.

    Returns:
        SampleChain
    """
    mcmc = mcmc or McmcConfig()
    rng = np.random.default_rng(mcmc.rng_seed)
    if isinstance(start, FitResult):
        start = start.theta
    theta = start.copy() if start is not None else model.initial_state()
    S = mcmc.n_saved
    coefficients = {block.name: np.empty((S, block.size)) for block in model.blocks}
    variances = {block.name: np.empty((S, block.n_variances)) for block in model.blocks}
    logpost, deviance, iterations = np.empty(S), np.empty(S), np.empty(S, dtype=int)
    accepted = {block.name: 0 for block in model.blocks}
    flagged = []
    progress = Progress(mcmc.n_iter) if mcmc.progress else None
    saved = 0
    for it in range(1, mcmc.n_iter + 1):
        for block in model.blocks:
            try:
                theta, ok = mh_block_update(block, theta, rng)
            except NonConcaveBlock as err:
                logger.warning(f'Iteration {it}: {err}')
                flagged.append((it, block.name))
                ok = False
            accepted[block.name] += int(ok)
        theta = theta.copy()
        for block in model.blocks:
            if block.prior == 'isotropic':
                theta.set_variances(block.name, gibbs_variance(block, theta, rng))
            elif block.prior == 'anisotropic':
                for component in range(2):
                    tau2 = theta.variances[block.name].copy()
                    tau2[component] = slice_variance(block, component, theta, rng)
                    theta.set_variances(block.name, tau2)
        if it > mcmc.burnin and (it - mcmc.burnin) % mcmc.thin == 0 and saved < S:
            for block in model.blocks:
                coefficients[block.name][saved] = theta.coefficients[block.name]
                variances[block.name][saved] = theta.variances[block.name]
            logpost[saved] = log_posterior(theta)
            deviance[saved] = -2.0 * loglik(theta)
            iterations[saved] = it
            saved += 1
        if progress is not None and (it % mcmc.report_every == 0 or it == mcmc.n_iter):
            rates = ', '.join(f'{name} {accepted[name] / it:.2f}' for name in accepted)
            progress.update(it, message=f'acceptance: {rates}')
    if progress is not None:
        progress.complete('Sampling finished')
    for name, count in accepted.items():
        if count / mcmc.n_iter < 0.3:
            logger.warning(f'[{name}] low acceptance rate {count / mcmc.n_iter:.2f}')
    return SampleChain(coefficients, variances, logpost, deviance, accepted, mcmc.n_iter, iterations,
                       flagged, mcmc.rng_seed)


def dic(chain: SampleChain, model: JointModel) -> dict:
    """
    Deviance information criterion with the plug-in deviance at the
    posterior-mean coefficients and variances.

    Returns:
        dict: dic, dbar (mean deviance), dhat (deviance at the mean) and pd.
    """
    if chain.n_draws == 0:
        raise ConfigurationError('DIC needs a non-empty chain.')
    mean_state = ThetaState(model, chain.mean_coefficients(), chain.mean_variances())
    dbar = float(np.mean(chain.deviance))
    dhat = -2.0 * loglik(mean_state)
    pd_ = dbar - dhat
    return {'dic': dbar + pd_, 'dbar': dbar, 'dhat': dhat, 'pd': pd_}


def summarize(draws, quantiles=(0.025, 0.975)) -> pd.DataFrame:
    """
    Per-scalar mean, sd and quantiles.

    Parameters:
        draws (SampleChain or dict): Chain, or mapping of name -> (S, p) draws.
        quantiles (tuple, optional): Default is (0.025, 0.975).

    Returns:
        pd.DataFrame: Columns block, index, mean, sd and one 'q<level>' per quantile.
    """
    if isinstance(draws, SampleChain):
        store = dict(draws.coefficients)
        store.update({f'{name}:tau2': value for name, value in draws.variances.items()})
    else:
        store = draws
    rows = []
    for name, values in store.items():
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] == 0:
            raise ConfigurationError(f'No draws to summarize for {name}.')
        qs = np.quantile(values, quantiles, axis=0)
        for j in range(values.shape[1]):
            row = {'block': name, 'index': j, 'mean': values[:, j].mean(),
                   'sd': values[:, j].std(ddof=1) if values.shape[0] > 1 else 0.0}
            for level, q in zip(quantiles, qs[:, j]):
                row[f'q{level:g}'] = q
            rows.append(row)
    return pd.DataFrame(rows)
