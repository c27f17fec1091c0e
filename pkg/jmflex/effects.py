"""
Predictor evaluations over coefficient draws and effect-curve export for
external plotting.
"""
import numpy as np
import pandas as pd

from jmflex.errors import ConfigurationError
from jmflex.model import (PREDICTORS, TermKind, assoc_covariate, eval_association, fitting_rows, g1_design,
                          g2_design, term_design)
from jmflex.splines import row_tensor

EFFECTS = ('alpha', 'lambda')


def predictor_draws(model, draws: dict, k: str, times=None, subjects=None) -> np.ndarray:
    """
    Predictor k evaluated for every draw.

    Rows follow `eval_predictor`: the fitting rows of k when `times` is None,
    otherwise subject subjects[j] at times[j].

    Parameters:
        model (JointModel): Built model.
        draws (dict): Block name -> (S, p) coefficient draws.
        k (str): Predictor name.

    Returns:
        np.ndarray: S x M evaluations.
    """
    if k not in PREDICTORS:
        raise ConfigurationError(f"Unknown predictor '{k}'.")
    data = model.data
    long_rows = False
    if times is None:
        subjects, times, long_rows = fitting_rows(k, data)
    else:
        times = np.asarray(times, dtype=float)
        subjects = np.arange(len(times)) if subjects is None else np.asarray(subjects, dtype=int)
    if k == 'alpha':
        eta_mu = predictor_draws(model, draws, 'mu', times, subjects)
        alpha = model.alpha
        covariate = assoc_covariate(alpha, data, subjects)
        group = draws.get('alpha.group')
        return np.stack([eval_association(alpha, eta_mu[s], draws['alpha.assoc'][s], covariate, times,
                                          group[s] if group is not None else None)
                         for s in range(eta_mu.shape[0])])
    blocks = model.predictor_blocks(k)
    S = next(iter(draws.values())).shape[0]
    out = np.zeros((S, len(subjects)))
    for block in blocks:
        X = term_design(block.term, data, subjects, times, long_rows)
        out += np.asarray((X @ draws[block.name].T).T)
    return out


def slope_draws(model, draws: dict) -> np.ndarray:
    """Per draw, the mean over subjects of the association's marker derivative at eta_mu(T_i)."""
    data = model.data
    subjects = np.arange(data.n)
    eta_mu = predictor_draws(model, draws, 'mu', data.T, subjects)
    alpha = model.alpha
    g2 = g2_design(alpha, assoc_covariate(alpha, data, subjects), data.T)
    return np.array([np.mean(row_tensor(g1_design(alpha, eta, 1), g2) @ beta)
                     for eta, beta in zip(eta_mu, draws['alpha.assoc'])])


def _summaries(values: np.ndarray, quantiles: tuple) -> dict:
    lower, upper = np.quantile(values, quantiles, axis=0)
    return {'mean': values.mean(axis=0), 'lower': lower, 'upper': upper}


def export_effects(model, draws: dict, which: str, grid: tuple = None,
                   quantiles: tuple = (0.025, 0.975)) -> pd.DataFrame:
    """
    Pointwise posterior summaries of one effect curve.

    'alpha' is the association over a marker grid (default -0.5 to 2 in 120
    points), one curve per group level for a group-specific association and
    at time 0 for a time-varying one. 'lambda' is the baseline log-hazard
    over a time grid (default 0 to the largest follow-up time in 120 points)
    without varying-coefficient terms.

    Parameters:
        model (JointModel): Built model.
        draws (dict): Block name -> (S, p) coefficient draws.
        which (str): 'alpha' or 'lambda'.
        grid (tuple, optional): (lower, upper, size).
        quantiles (tuple, optional): Band quantiles. Default is (0.025, 0.975).

    Returns:
        pd.DataFrame: Columns grid, mean, lower, upper (and group for group-specific curves).
    """
    if which not in EFFECTS:
        raise ConfigurationError(f"Unknown effect '{which}'. Use one of {EFFECTS}.")
    if which == 'alpha':
        lower, upper, size = grid or (-0.5, 2.0, 120)
    else:
        lower, upper, size = grid or (0.0, float(np.max(model.data.T)), 120)
    x = np.linspace(float(lower), float(upper), int(size))
    if which == 'lambda':
        S = next(iter(draws.values())).shape[0]
        values = np.zeros((S, x.size))
        subjects = np.zeros(x.size, dtype=int)
        for block in model.predictor_blocks('lambda'):
            if block.term.kind == TermKind.VARYING_COEFFICIENT:
                continue
            X = term_design(block.term, model.data, subjects, x)
            values += np.asarray((X @ draws[block.name].T).T)
        return pd.DataFrame({'grid': x, **_summaries(values, quantiles)})

    alpha = model.alpha
    levels = alpha.levels if alpha.g2 == 'group_factor' else (None,)
    frames = []
    for level in levels:
        covariate = np.full(x.size, level) if level is not None else None
        if alpha.g2 == 'covariate':
            covariate = np.ones(x.size)
        group = draws.get('alpha.group')
        values = np.stack([eval_association(alpha, x, beta, covariate, np.zeros(x.size),
                                            group[s] if group is not None else None)
                           for s, beta in enumerate(draws['alpha.assoc'])])
        frame = pd.DataFrame({'grid': x, **_summaries(values, quantiles)})
        if level is not None:
            frame.insert(0, 'group', level)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)
