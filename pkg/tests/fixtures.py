import os

import numpy as np
import pandas as pd

from jmflex.data import Dataset
from jmflex.likelihood import JointModel, QuadratureRule
from jmflex.model import AssocSpec, JointModelSpec, Term

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'configs')


def tiny_frames(n=10, seed=0, events=True):
    """Small survival/longitudinal tables with covariates x1, x2 and a two-level group."""
    rng = np.random.default_rng(seed)
    T = rng.uniform(5.0, 20.0, n)
    event = rng.integers(0, 2, n) if events else np.zeros(n, dtype=int)
    surv = pd.DataFrame({'id': np.arange(1, n + 1), 'time': T, 'event': event,
                         'x1': rng.normal(size=n), 'x2': rng.uniform(-1.0, 1.0, n), 'group': np.arange(n) % 2})
    rows = []
    for i in range(n):
        times = np.sort(rng.uniform(0.0, T[i], rng.integers(3, 6)))
        y = 0.5 + 0.05 * times + 0.3 * surv['x2'][i] + rng.normal(0.0, 0.2, times.size)
        rows.extend({'id': i + 1, 'time': t, 'y': v} for t, v in zip(times, y))
    return surv, pd.DataFrame(rows)


def tiny_data(n=10, seed=0, events=True):
    surv, long = tiny_frames(n, seed, events)
    return Dataset(surv, long)


def tiny_spec(nonlinear=False, group=False, fri=True):
    mu_terms = [Term('intercept'), Term('pspline_time', n_basis=5), Term('random_intercept')]
    if fri:
        mu_terms.append(Term('functional_random_intercept', n_basis=5))
    alpha = AssocSpec(g1='pspline' if nonlinear else 'identity', g2='group_factor' if group else 'constant',
                      g2_column='group' if group else None, g1_n_basis=6)
    return JointModelSpec(lambda_terms=(Term('pspline_time', n_basis=6),),
                          gamma_terms=(Term('intercept'), Term('linear_covariate', covariate='x1')),
                          mu_terms=tuple(mu_terms),
                          sigma_terms=(Term('intercept'),),
                          alpha=alpha)


def tiny_model(nonlinear=False, group=False, fri=True, n=10, seed=0, nodes=15, events=True):
    return JointModel(tiny_spec(nonlinear, group, fri), tiny_data(n, seed, events),
                      QuadratureRule.gauss_legendre(nodes))


def random_coefficients(model, rng, scale=0.1):
    return {block.name: rng.normal(0.0, scale, block.size) for block in model.blocks}


def random_variances(model, rng):
    return {block.name: rng.uniform(0.5, 2.0, block.n_variances) for block in model.blocks}
