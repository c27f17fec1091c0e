"""
Data generation for the three simulation settings (linear association,
nonlinear association, group-specific nonlinear association) and the error
metrics used to score fits against the generating truth.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import bisect

from jmflex.data import Archive, Dataset
from jmflex.errors import ConfigurationError
from jmflex.likelihood import QuadratureRule
from jmflex.effects import predictor_draws, slope_draws
from jmflex.model import eval_association
from jmflex.splines import BasisSpec, bspline_basis, difference_penalty

logger = logging.getLogger(__name__)

T_GRID = np.arange(1.0, 121.0)
ETA_GRID = np.linspace(-0.5, 2.0, 120)


@dataclass(frozen=True)
class SimSetting:
    """
    Attributes:
        setting (int): 1 linear, 2 nonlinear, 3 group-specific nonlinear association.
        n (int): Number of subjects.
        thinning_keep (float): Fraction of grid measurements kept. Default is 0.1.
        seed (int): Seed of the dataset's generator. Default is 0.
        noise_sd (float): Measurement error sd. Default is 0.3.
        random_intercept_var (float): Variance of the scalar random intercept. Default is 0.25.
        tau2_s (float): Subject variance of the functional random intercept. Default is 1.
        tau2_t (float): Smoothness variance of the functional random intercept. Default is 0.2.
        t_max (float): Administrative censoring time. Default is 120.
        censor_upper (float): Upper bound of the uniform censoring times. Default is 180.
    """
    setting: int = 1
    n: int = 300
    thinning_keep: float = 0.1
    seed: int = 0
    noise_sd: float = 0.3
    random_intercept_var: float = 0.25
    tau2_s: float = 1.0
    tau2_t: float = 0.2
    t_max: float = 120.0
    censor_upper: float = 180.0

    def __post_init__(self) -> None:
        if self.setting not in (1, 2, 3):
            raise ConfigurationError(f'Unknown simulation setting {self.setting}; use 1, 2 or 3.')
        if self.n < 1:
            raise ConfigurationError(f'Need at least one subject, got n={self.n}.')
        if not 0 < self.thinning_keep <= 1:
            raise ConfigurationError(f'thinning_keep must lie in (0, 1], got {self.thinning_keep}.')


@dataclass(frozen=True)
class TrueParams:
    """Closed-form generating components; all pure functions of their inputs."""
    setting: int = 1
    intercept: float = 0.5
    noise_sd: float = 0.3
    t_grid: np.ndarray = field(default_factory=lambda: T_GRID.copy())

    @staticmethod
    def mu_time(t):
        t = np.asarray(t, dtype=float)
        return 0.1 * (t + 2.0) * np.exp(-0.075 * t)

    @staticmethod
    def mu_covariate(x2):
        return 0.6 * np.sin(np.asarray(x2, dtype=float))

    @staticmethod
    def lambda_(t):
        return 1.4 * np.log((np.asarray(t, dtype=float) + 10.0) / 1000.0)

    @staticmethod
    def gamma(x1):
        return 0.3 * np.asarray(x1, dtype=float)

    def alpha(self, eta_mu, group=None):
        return true_association(self.setting, eta_mu, group)

    def alpha_slope(self, eta_mu, group=None):
        """Derivative of the true association with respect to the marker."""
        eta_mu = np.asarray(eta_mu, dtype=float)
        if self.setting == 1:
            return np.ones_like(eta_mu)
        upper = -0.2 * (eta_mu + 3.0) + 1.0
        if self.setting == 2 or group is None:
            return upper
        return np.where(np.asarray(group) == 1, upper, 0.2 * (eta_mu - 3.0) + 0.75)


def true_association(setting: int, eta_mu, group=None):
    """
    True association value.

    Setting 1 is the identity; setting 2 (and group 1 of setting 3) is
    -0.1 (eta + 3)^2 + eta + 1.8; group 0 of setting 3 is
    0.1 (eta - 3)^2 + 0.75 eta - 0.8. A group passed for settings 1 and 2 is
    ignored.
    """
    eta_mu = np.asarray(eta_mu, dtype=float)
    if setting == 1:
        return eta_mu.copy()
    upper = -0.1 * (eta_mu + 3.0) ** 2 + eta_mu + 1.8
    if setting == 2:
        return upper
    if setting != 3:
        raise ConfigurationError(f'Unknown simulation setting {setting}.')
    if group is None:
        raise ConfigurationError('Setting 3 needs the group of every evaluation.')
    lower = 0.1 * (eta_mu - 3.0) ** 2 + 0.75 * eta_mu - 0.8
    return np.where(np.asarray(group) == 1, upper, lower)


def fri_basis(t_max: float = 120.0) -> BasisSpec:
    """Cubic basis with four functions on [0, t_max] for generating subject trajectories."""
    return BasisSpec((), 3, 2, (0.0, t_max))


@dataclass
class Trajectories:
    """Per-subject components of the true marker."""
    x1: np.ndarray
    x2: np.ndarray
    group: np.ndarray
    random_intercept: np.ndarray
    fri_coefficients: np.ndarray
    basis: BasisSpec
    params: TrueParams

    @property
    def n(self) -> int:
        return len(self.x1)

    def eta_mu(self, subjects, times) -> np.ndarray:
        """True marker of subject subjects[j] at times[j]."""
        subjects = np.asarray(subjects, dtype=int)
        times = np.asarray(times, dtype=float)
        fri = np.sum(bspline_basis(times, self.basis) * self.fri_coefficients[subjects], axis=1)
        return (self.params.mu_time(times) + self.random_intercept[subjects] + fri + self.params.intercept
                + self.params.mu_covariate(self.x2[subjects]))

    def log_hazard(self, i: int, times) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        subjects = np.full(times.shape, i)
        eta = self.eta_mu(subjects, times)
        group = self.group[subjects] if self.params.setting == 3 else None
        return self.params.lambda_(times) + self.params.gamma(self.x1[i]) + self.params.alpha(eta, group)

    def grid(self, t_grid: np.ndarray = T_GRID) -> np.ndarray:
        """n x len(t_grid) true marker values."""
        subjects = np.repeat(np.arange(self.n), len(t_grid))
        return self.eta_mu(subjects, np.tile(t_grid, self.n)).reshape(self.n, len(t_grid))


def gen_trajectories(setting: SimSetting, rng: np.random.Generator) -> Trajectories:
    """
    Draw covariates and random effects of all subjects.

    Functional random intercepts have per-subject coefficients from
    N(0, [I / tau2_s + K_t / tau2_t + 1e-8 I]^-1) with K_t the second-order
    difference penalty, projected so their sum over the time grid is zero.
    """
    n = setting.n
    x1 = rng.uniform(-3.0, 3.0, n)
    x2 = rng.uniform(-3.0, 3.0, n)
    group = rng.integers(0, 2, n) if setting.setting == 3 else np.zeros(n, dtype=int)
    r = rng.normal(0.0, np.sqrt(setting.random_intercept_var), n)
    basis = fri_basis(setting.t_max)
    p = basis.n_basis
    precision = np.eye(p) / setting.tau2_s + difference_penalty(p, 2).K / setting.tau2_t + 1e-8 * np.eye(p)
    L = np.linalg.cholesky(precision)
    z = rng.standard_normal((n, p))
    beta = np.linalg.solve(L.T, z.T).T
    c = bspline_basis(T_GRID, basis).sum(axis=0)
    beta = beta - np.outer(beta @ c, c) / (c @ c)
    params = TrueParams(setting.setting, noise_sd=setting.noise_sd)
    return Trajectories(x1, x2, group, r, beta, basis, params)


def invert_survival(hazard_fn, u: float, t_max: float = 120.0, rule: QuadratureRule = None,
                    xtol: float = 1e-8) -> tuple:
    """
    Solve Lambda(t) = -log(u) for t by bisection, Lambda integrated by quadrature.

    Parameters:
        hazard_fn (callable): Vectorized nonnegative hazard on [0, t_max].
        u (float): Uniform draw in (0, 1].
        t_max (float, optional): Administrative censoring time. Default is 120.
        rule (QuadratureRule, optional): Rule on [0, t]. Default is 30-node Gauss-Legendre.
        xtol (float, optional): Bisection tolerance on time. Default is 1e-8.

    Returns:
        tuple: (time, event); (t_max, 0) when Lambda(t_max) < -log(u).
    """
    rule = rule or QuadratureRule.gauss_legendre(30)
    target = -np.log(u)
    if target <= 0:
        return 0.0, 1

    def cumhaz(t: float) -> float:
        nodes, weights = rule.rescale(np.array([t]))
        return float(np.sum(hazard_fn(nodes[0]) * weights[0]))

    if cumhaz(t_max) < target:
        return float(t_max), 0
    return float(bisect(lambda t: cumhaz(t) - target, 0.0, t_max, xtol=xtol)), 1


def thin_longitudinal(eta_grid: np.ndarray, t_grid: np.ndarray, keep_fraction: float, T: np.ndarray,
                      rng: np.random.Generator, noise_sd: float = 0.3) -> pd.DataFrame:
    """
    Keep each grid measurement up to T_i with probability keep_fraction and
    add N(0, noise_sd^2) errors.

    Returns:
        pd.DataFrame: Columns subject (0-based), time, eta_mu, y.
    """
    if not 0 < keep_fraction <= 1:
        raise ConfigurationError(f'keep_fraction must lie in (0, 1], got {keep_fraction}.')
    n, G = eta_grid.shape
    subjects = np.repeat(np.arange(n), G)
    times = np.tile(t_grid, n)
    eta = eta_grid.ravel()
    keep = (times <= np.asarray(T)[subjects]) & (rng.uniform(size=n * G) < keep_fraction)
    y = eta[keep] + (rng.normal(0.0, noise_sd, keep.sum()) if noise_sd > 0 else 0.0)
    return pd.DataFrame({'subject': subjects[keep], 'time': times[keep], 'eta_mu': eta[keep], 'y': y})


def simulate_dataset(setting: SimSetting, rng: np.random.Generator = None) -> tuple:
    """
    Generate one dataset and its truth.

    Returns:
        tuple: (Dataset, dict of true evaluations)
    """
    rng = rng or np.random.default_rng(setting.seed)
    traj = gen_trajectories(setting, rng)
    n = setting.n
    rule = QuadratureRule.gauss_legendre(30)
    event_times = np.empty(n)
    events = np.empty(n, dtype=int)
    u = rng.uniform(size=n)
    for i in range(n):
        event_times[i], events[i] = invert_survival(lambda t, i=i: np.exp(traj.log_hazard(i, t)), u[i],
                                                    setting.t_max, rule)
    censor = rng.uniform(0.0, setting.censor_upper, n)
    T = np.minimum(event_times, censor)
    delta = ((events == 1) & (event_times <= censor)).astype(int)
    T = np.maximum(T, 1e-8)

    eta_grid = traj.grid()
    obs = thin_longitudinal(eta_grid, T_GRID, setting.thinning_keep, T, rng, setting.noise_sd)
    ids = np.arange(1, n + 1)
    surv = pd.DataFrame({'id': ids, 'time': T, 'event': delta, 'x1': traj.x1, 'x2': traj.x2})
    if setting.setting == 3:
        surv['group'] = traj.group
    long = pd.DataFrame({'id': ids[obs['subject'].to_numpy()], 'time': obs['time'].to_numpy(),
                         'y': obs['y'].to_numpy()})
    data = Dataset(surv, long, metadata={'setting': setting.setting, 'n': n, 'seed': setting.seed,
                                         'thinning_keep': setting.thinning_keep})
    if 'subjects_without_measurements' in data.metadata:
        logger.info(f"{len(data.metadata['subjects_without_measurements'])} subject(s) without measurements")

    group = traj.group if setting.setting == 3 else None
    eta_mu_T = traj.eta_mu(np.arange(n), T)
    truth = {
        'eta_mu_long': traj.eta_mu(data.subject_index, data.t),
        'eta_sigma_long': np.full(data.N, np.log(setting.noise_sd)),
        'eta_mu_grid': eta_grid,
        'eta_mu_T': eta_mu_T,
        'lambda_T': traj.params.lambda_(T),
        'lambda_grid': traj.params.lambda_(T_GRID),
        'gamma': traj.params.gamma(traj.x1),
        'alpha_T': traj.params.alpha(eta_mu_T, group),
        'alpha_slope_T': traj.params.alpha_slope(eta_mu_T, group),
        'alpha_grid': np.stack([traj.params.alpha(ETA_GRID, np.full(ETA_GRID.size, g)) for g in (0, 1)])
        if setting.setting == 3 else traj.params.alpha(ETA_GRID)[None, :],
        't_grid': T_GRID,
        'eta_grid': ETA_GRID,
        'random_intercept': traj.random_intercept,
        'fri_coefficients': traj.fri_coefficients,
        'x1': traj.x1,
        'x2': traj.x2,
        'group': traj.group,
    }
    return data, truth


def write_truth(path: str, truth: dict, setting: SimSetting) -> None:
    Archive(path).write({'truth': truth}, attrs={'setting': setting.setting, 'n': setting.n, 'seed': setting.seed,
                                                 'thinning_keep': setting.thinning_keep})


def read_truth(path: str) -> tuple:
    """(truth dict, attributes) from a truth sidecar."""
    archive = Archive(path)
    return archive.get_group('truth'), archive.attrs()


def _center(values: np.ndarray) -> np.ndarray:
    return values - values.mean(axis=-1, keepdims=True)


def _score(truth: np.ndarray, draws: np.ndarray, level: float = 0.95) -> dict:
    estimate = draws.mean(axis=0)
    lower, upper = np.quantile(draws, [0.5 - 0.5 * level, 0.5 + 0.5 * level], axis=0)
    return {'mse': float(np.mean((truth - estimate) ** 2)),
            'bias': float(np.mean(estimate - truth)),
            'coverage': float(np.mean((truth >= lower) & (truth <= upper)))}


def _score_per_time(truth: np.ndarray, draws: np.ndarray, level: float = 0.95) -> dict:
    """Per-time MSE, bias and coverage; time is the last axis, leading truth axes are averaged."""
    estimate = draws.mean(axis=0)
    lower, upper = np.quantile(draws, [0.5 - 0.5 * level, 0.5 + 0.5 * level], axis=0)
    axes = tuple(range(truth.ndim - 1))
    return {'mse_t': np.mean((truth - estimate) ** 2, axis=axes).tolist(),
            'bias_t': np.mean(estimate - truth, axis=axes).tolist(),
            'coverage_t': np.mean((truth >= lower) & (truth <= upper), axis=axes).tolist()}


def metrics(truth: dict, draws: dict, model, t_grid: np.ndarray = T_GRID, eta_grid: np.ndarray = ETA_GRID,
            level: float = 0.95) -> dict:
    """
    MSE, bias and interval coverage of every predictor against the truth.

    Survival predictors (lambda, gamma, alpha) are compared after centering
    truth and each draw over the evaluation points, since the fitted split
    of the log-hazard level between them is arbitrary. mu and lambda are
    additionally scored per time on `t_grid` (mse_t, bias_t, coverage_t),
    lambda and alpha on their grids as a whole (grid_mse, grid_bias,
    grid_coverage); alpha's grid is the marker grid, averaged over groups
    for a group factor.

    Parameters:
        truth (dict): As returned by simulate_dataset.
        draws (dict): Block name -> (S, p) coefficient draws (chain or approximate mode draws).
        model (JointModel): The fitted model.
    """
    data = model.data
    report = {}
    mu = predictor_draws(model, draws, 'mu')
    report['mu'] = _score(truth['eta_mu_long'], mu, level)
    sigma = predictor_draws(model, draws, 'sigma')
    report['sigma'] = _score(truth['eta_sigma_long'], sigma, level)
    for k, key in (('lambda', 'lambda_T'), ('gamma', 'gamma'), ('alpha', 'alpha_T')):
        report[k] = _score(_center(truth[key]), _center(predictor_draws(model, draws, k)), level)

    n, G = data.n, len(t_grid)
    subjects = np.repeat(np.arange(n), G)
    times = np.tile(t_grid, n)
    mu_grid = predictor_draws(model, draws, 'mu', times, subjects).reshape(-1, n, G)
    report['mu'].update(_score_per_time(truth['eta_mu_grid'], mu_grid, level))
    lam = _center(predictor_draws(model, draws, 'lambda', t_grid, np.zeros(G, dtype=int)))
    lam_true = _center(truth['lambda_grid'])
    report['lambda'].update(_score_per_time(lam_true, lam, level))
    report['lambda'].update({f'grid_{key}': value for key, value in _score(lam_true, lam, level).items()})

    alpha = model.alpha
    beta = draws['alpha.assoc']
    groups = alpha.levels if alpha.g2 == 'group_factor' else (None,)
    scores = []
    for j, g in enumerate(groups):
        covariate = np.full(eta_grid.size, g) if g is not None else None
        if alpha.g2 == 'covariate':
            covariate = np.ones(eta_grid.size)
        times_g = np.zeros(eta_grid.size)
        values = np.stack([eval_association(alpha, eta_grid, b, covariate, times_g,
                                            draws['alpha.group'][s] if 'alpha.group' in draws else None)
                           for s, b in enumerate(beta)])
        row = truth['alpha_grid'][min(j, truth['alpha_grid'].shape[0] - 1)]
        scores.append(_score(_center(row), _center(values), level))
    report['alpha'].update({f'grid_{key}': float(np.mean([score[key] for score in scores]))
                            for key in ('mse', 'bias', 'coverage')})

    slope = average_slope(model, {name: d.mean(axis=0) for name, d in draws.items()})
    report['alpha_slope'] = {'estimate': slope, 'truth': float(np.mean(truth['alpha_slope_T']))}
    return report


def average_slope(model, coefficients: dict) -> float:
    """Mean over subjects of the association's marker derivative at eta_mu(T_i)."""
    return float(slope_draws(model, {name: np.asarray(beta)[None, :] for name, beta in coefficients.items()})[0])


def aggregate_metrics(reports: list) -> pd.DataFrame:
    """Average the scalar metrics of several replicate reports, one row per (predictor, metric)."""
    rows = []
    for report in reports:
        for predictor, values in report.items():
            for metric, value in values.items():
                if np.isscalar(value):
                    rows.append({'predictor': predictor, 'metric': metric, 'value': float(value)})
    if not rows:
        return pd.DataFrame(columns=['predictor', 'metric', 'mean', 'sd', 'replicates'])
    frame = pd.DataFrame(rows)
    out = frame.groupby(['predictor', 'metric'])['value'].agg(['mean', 'std', 'count']).reset_index()
    return out.rename(columns={'std': 'sd', 'count': 'replicates'})
