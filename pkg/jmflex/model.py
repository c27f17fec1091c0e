"""
Declarative model structure: the terms of the five predictors, the
association between marker and log-hazard, and their design matrices.

Terms are declared unbuilt (bases and constraints may be left open) and
built once against a Dataset by `setup_term` / `setup_assoc`; built terms
are immutable.
"""
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy import sparse

from jmflex.errors import ConfigurationError, DataError, NumericalError
from jmflex.splines import (BasisSpec, ConstraintTransform, PenaltyMatrix, alpha_grid_constraint,
                            bspline_basis, bspline_deriv, difference_penalty, row_tensor, sum_to_zero)

PREDICTORS = ('lambda', 'gamma', 'alpha', 'mu', 'sigma')
LONG_PREDICTORS = ('mu', 'sigma')


class TermKind(str, Enum):
    INTERCEPT = 'intercept'
    LINEAR_COVARIATE = 'linear_covariate'
    PSPLINE_COVARIATE = 'pspline_covariate'
    PSPLINE_TIME = 'pspline_time'
    RANDOM_INTERCEPT = 'random_intercept'
    FUNCTIONAL_RANDOM_INTERCEPT = 'functional_random_intercept'
    VARYING_COEFFICIENT = 'varying_coefficient'
    ASSOC_LINEAR = 'assoc_linear'
    ASSOC_NONLINEAR = 'assoc_nonlinear'


TIME_DEPENDENT = (TermKind.PSPLINE_TIME, TermKind.FUNCTIONAL_RANDOM_INTERCEPT, TermKind.VARYING_COEFFICIENT)
ASSOC_KINDS = (TermKind.ASSOC_LINEAR, TermKind.ASSOC_NONLINEAR)


@dataclass(frozen=True, eq=False)
class Term:
    """
    One additive term f = X beta of a predictor.

    Attributes:
        kind (TermKind): Type of effect.
        name (str): Block name within its predictor; defaults to kind[_covariate].
        covariate (str, optional): Column used by covariate terms.
        basis (BasisSpec, optional): Spline basis (time basis for time-dependent terms).
            When None it is placed equidistantly over the data range at setup.
        n_basis (int): Number of basis functions before any constraint. Default is 6.
        degree (int): Spline degree. Default is 3.
        diff_order (int): Difference penalty order. Default is 2.
        center (bool): Apply the sum-to-zero constraint to smooth terms. Default is True.
        factor (bool): Treat a linear covariate as a factor (reference dummy coding).
        constraint (ConstraintTransform): Set at setup for centered smooths.
        levels (tuple): Factor levels, reference first; set at setup.
        coefficients (np.ndarray): Starting coefficients; zeros when None.
        variances (np.ndarray): Starting variance parameters; ones when None.
    """
    kind: TermKind
    name: str = None
    covariate: str = None
    basis: BasisSpec = None
    n_basis: int = 6
    degree: int = 3
    diff_order: int = 2
    center: bool = True
    factor: bool = False
    constraint: ConstraintTransform = None
    levels: tuple = ()
    coefficients: np.ndarray = None
    variances: np.ndarray = None
    built: bool = False

    def __post_init__(self) -> None:
        kind = TermKind(self.kind)
        object.__setattr__(self, 'kind', kind)
        if kind in (TermKind.LINEAR_COVARIATE, TermKind.PSPLINE_COVARIATE, TermKind.VARYING_COEFFICIENT) \
                and not self.covariate:
            raise ConfigurationError(f"Term kind '{kind.value}' needs a covariate.")
        if self.name is None:
            name = kind.value if not self.covariate else f'{kind.value}_{self.covariate}'
            object.__setattr__(self, 'name', name)

    @property
    def is_smooth(self) -> bool:
        return self.kind in (TermKind.PSPLINE_COVARIATE, TermKind.PSPLINE_TIME,
                             TermKind.FUNCTIONAL_RANDOM_INTERCEPT, TermKind.VARYING_COEFFICIENT)

    @property
    def marginal_width(self) -> int:
        """Columns of the (constrained) spline marginal."""
        p = self.basis.n_basis if self.basis is not None else self.n_basis
        if self.constraint is not None:
            p -= self.constraint.n_constraints
        return p

    def width(self, n_subjects: int) -> int:
        if self.kind == TermKind.INTERCEPT:
            return 1
        if self.kind == TermKind.LINEAR_COVARIATE:
            return len(self.levels) - 1 if self.levels else 1
        if self.kind == TermKind.RANDOM_INTERCEPT:
            return n_subjects
        if self.kind == TermKind.FUNCTIONAL_RANDOM_INTERCEPT:
            return n_subjects * self.marginal_width
        if self.kind in (TermKind.PSPLINE_COVARIATE, TermKind.PSPLINE_TIME, TermKind.VARYING_COEFFICIENT):
            return self.marginal_width
        raise ConfigurationError(f"Width of '{self.kind.value}' terms is defined by the association.")

    def smooth_penalty(self) -> PenaltyMatrix:
        K = difference_penalty(self.basis.n_basis, self.basis.diff_order)
        return self.constraint.penalty(K) if self.constraint is not None else K


@dataclass(frozen=True, eq=False)
class AssocSpec:
    """
    Association f_alpha = [g1(eta_mu) (row tensor) g2(x, t)] beta_alpha.

    Attributes:
        g1 (str): 'identity' (linear association) or 'pspline' (nonlinear).
        g2 (str): 'constant', 'covariate', 'group_factor' or 'pspline_time'.
        g2_column (str, optional): Covariate or grouping column for g2.
        g1_basis (BasisSpec, optional): Marker basis; equidistant over the observed response when None.
        g1_n_basis (int): Marker basis size before the grid constraint. Default is 6.
        g2_basis (BasisSpec, optional): Time basis for 'pspline_time'.
        g2_n_basis (int): Time basis size. Default is 6.
        grid_size (int): Points of the marker grid carrying the constraint. Default is 100.
        constraint (ConstraintTransform): Grid constraint, set at setup for 'pspline'.
        levels (tuple): Group levels, reference first, set at setup for 'group_factor'.
        group_intercepts (np.ndarray, optional): Starting values of the non-reference level intercepts.
    """
    g1: str = 'identity'
    g2: str = 'constant'
    g2_column: str = None
    g1_basis: BasisSpec = None
    g1_n_basis: int = 6
    g2_basis: BasisSpec = None
    g2_n_basis: int = 6
    degree: int = 3
    diff_order: int = 2
    grid_size: int = 100
    constraint: ConstraintTransform = None
    levels: tuple = ()
    coefficients: np.ndarray = None
    variances: np.ndarray = None
    group_intercepts: np.ndarray = None
    built: bool = False

    def __post_init__(self) -> None:
        if self.g1 not in ('identity', 'pspline'):
            raise ConfigurationError(f"Unknown association g1 '{self.g1}'.")
        if self.g2 not in ('constant', 'covariate', 'group_factor', 'pspline_time'):
            raise ConfigurationError(f"Unknown association g2 '{self.g2}'.")
        if self.g2 in ('covariate', 'group_factor') and not self.g2_column:
            raise ConfigurationError(f"Association g2 '{self.g2}' needs a column.")

    @property
    def kind(self) -> TermKind:
        return TermKind.ASSOC_LINEAR if self.g1 == 'identity' else TermKind.ASSOC_NONLINEAR

    @property
    def p1(self) -> int:
        if self.g1 == 'identity':
            return 1
        p = self.g1_basis.n_basis if self.g1_basis is not None else self.g1_n_basis
        return p - (self.constraint.n_constraints if self.constraint is not None else 1)

    @property
    def p2(self) -> int:
        if self.g2 == 'group_factor':
            return len(self.levels)
        if self.g2 == 'pspline_time':
            return self.g2_basis.n_basis if self.g2_basis is not None else self.g2_n_basis
        return 1

    @property
    def width(self) -> int:
        return self.p1 * self.p2

    @property
    def has_group_intercepts(self) -> bool:
        return self.g1 == 'pspline' and self.g2 == 'group_factor'

    def marginal_penalties(self) -> tuple:
        """(K_alpha1, K_alpha2); zero matrices for unpenalized marginals."""
        if self.g1 == 'identity':
            K1 = PenaltyMatrix.zeros(1)
        else:
            K1 = self.constraint.penalty(difference_penalty(self.g1_basis.n_basis, self.g1_basis.diff_order))
        if self.g2 == 'pspline_time':
            K2 = difference_penalty(self.g2_basis.n_basis, self.g2_basis.diff_order)
        else:
            K2 = PenaltyMatrix.zeros(self.p2)
        return K1, K2


@dataclass(frozen=True, eq=False)
class JointModelSpec:
    """The four term lists and the association of a joint model."""
    lambda_terms: tuple = ()
    gamma_terms: tuple = ()
    mu_terms: tuple = ()
    sigma_terms: tuple = ()
    alpha: AssocSpec = None

    def terms(self, predictor: str) -> tuple:
        if predictor == 'alpha':
            raise ConfigurationError('The association is described by AssocSpec, not a term list.')
        return tuple(getattr(self, f'{predictor}_terms'))

    def validate(self) -> None:
        if self.alpha is None:
            raise ConfigurationError('A joint model needs an association (alpha) specification.')
        for predictor in ('lambda', 'gamma', 'mu', 'sigma'):
            names = [term.name for term in self.terms(predictor)]
            if len(set(names)) != len(names):
                raise ConfigurationError(f'Duplicate term names in {predictor}: {names}.')
            for term in self.terms(predictor):
                if term.kind in ASSOC_KINDS:
                    raise ConfigurationError(f"Term '{term.name}': association kinds are only legal in alpha.")
                if term.kind == TermKind.FUNCTIONAL_RANDOM_INTERCEPT and predictor != 'mu':
                    raise ConfigurationError(
                        f"Term '{term.name}': functional random intercepts are only legal in mu.")
                if term.kind == TermKind.VARYING_COEFFICIENT and predictor != 'lambda':
                    raise ConfigurationError(f"Term '{term.name}': varying coefficients are only legal in lambda.")
                if predictor == 'gamma' and term.kind in TIME_DEPENDENT:
                    raise ConfigurationError(f"Term '{term.name}': gamma holds time-constant effects only.")
        for predictor in ('mu', 'sigma'):
            n_int = sum(term.kind == TermKind.INTERCEPT for term in self.terms(predictor))
            if n_int != 1:
                raise ConfigurationError(f'Predictor {predictor} needs exactly one intercept, found {n_int}.')
        n_int = sum(term.kind == TermKind.INTERCEPT for term in self.lambda_terms + self.gamma_terms)
        if n_int != 1:
            raise ConfigurationError(f'The log-hazard needs exactly one intercept (lambda or gamma), found {n_int}.')


def _is_numeric(values: np.ndarray) -> bool:
    return np.issubdtype(np.asarray(values).dtype, np.number)


def _indicator(subjects: np.ndarray, n_subjects: int) -> sparse.csr_matrix:
    M = len(subjects)
    return sparse.csr_matrix((np.ones(M), (np.arange(M), subjects)), shape=(M, n_subjects))


def _dummies(values: np.ndarray, levels: tuple) -> np.ndarray:
    return np.column_stack([values == level for level in levels[1:]]).astype(float) \
        if len(levels) > 1 else np.zeros((len(values), 0))


def _time_domain(data) -> tuple:
    return 0.0, float(np.max(data.T))


def setup_term(term: Term, predictor: str, data) -> Term:
    """
    Fix bases, factor levels and constraints of `term` from the data.

    Constraints are sum-to-zero over the rows the predictor is fitted on:
    the N longitudinal records for mu and sigma, the n subjects (at their
    follow-up times) for survival predictors.
    """
    subjects, times, long_rows = fitting_rows(predictor, data)
    changes = {'built': True}
    kind = term.kind
    if kind == TermKind.LINEAR_COVARIATE:
        values = data.covariate(term.covariate, subjects, long_rows)
        if term.factor or not _is_numeric(values):
            changes['levels'] = tuple(sorted(np.unique(values).tolist()))
            if len(changes['levels']) < 2:
                raise DataError(f"Factor '{term.covariate}' has fewer than two levels.")
    elif term.is_smooth:
        if kind == TermKind.PSPLINE_COVARIATE:
            x = data.covariate(term.covariate, subjects, long_rows).astype(float)
            domain = (float(np.min(x)), float(np.max(x)))
        else:
            x = times
            domain = _time_domain(data)
        basis = term.basis or BasisSpec.equidistant(domain[0], domain[1], term.n_basis, term.degree, term.diff_order)
        changes['basis'] = basis
        if term.center:
            B = bspline_basis(x, basis)
            _, _, transform = sum_to_zero(B, difference_penalty(basis.n_basis, basis.diff_order))
            changes['constraint'] = transform
    built = replace(term, **changes)
    width = built.width(data.n)
    if built.coefficients is not None and len(built.coefficients) != width:
        raise ConfigurationError(f"Term '{term.name}': {len(built.coefficients)} starting coefficients, expected {width}.")
    return built


def setup_assoc(alpha: AssocSpec, data) -> AssocSpec:
    """Fix the marker basis, its grid constraint and group levels from the data."""
    changes = {'built': True}
    if alpha.g1 == 'pspline':
        y = data.y
        if y.size < 2:
            raise DataError('A nonlinear association needs longitudinal measurements.')
        basis = alpha.g1_basis or BasisSpec.equidistant(float(np.min(y)), float(np.max(y)), alpha.g1_n_basis,
                                                         alpha.degree, alpha.diff_order)
        changes['g1_basis'] = basis
        changes['constraint'] = alpha_grid_constraint(basis, y, alpha.grid_size)
    if alpha.g2 == 'group_factor':
        values = data.covariate(alpha.g2_column, np.arange(data.n))
        levels = tuple(sorted(np.unique(values).tolist()))
        if len(levels) < 2:
            raise DataError(f"Group factor '{alpha.g2_column}' has fewer than two levels.")
        changes['levels'] = levels
    if alpha.g2 == 'covariate':
        values = data.covariate(alpha.g2_column, np.arange(data.n))
        if not _is_numeric(values):
            raise DataError(f"Association covariate '{alpha.g2_column}' must be numeric.")
    if alpha.g2 == 'pspline_time':
        lower, upper = _time_domain(data)
        changes['g2_basis'] = alpha.g2_basis or BasisSpec.equidistant(lower, upper, alpha.g2_n_basis,
                                                                      alpha.degree, alpha.diff_order)
    return replace(alpha, **changes)


def fitting_rows(predictor: str, data) -> tuple:
    """(subjects, times, long_rows) of the rows a predictor is fitted on."""
    if predictor in LONG_PREDICTORS:
        return data.subject_index, data.t, True
    return np.arange(data.n), data.T, False


def term_design(term: Term, data, subjects: np.ndarray, times: np.ndarray, long_rows: bool = False):
    """
    Design matrix of a built term at rows (subject, time).

    Random-effect designs are sparse CSR matrices, all others dense.
    """
    subjects = np.asarray(subjects, dtype=int)
    times = np.asarray(times, dtype=float)
    M = len(subjects)
    kind = term.kind
    if kind == TermKind.INTERCEPT:
        return np.ones((M, 1))
    if kind == TermKind.LINEAR_COVARIATE:
        values = data.covariate(term.covariate, subjects, long_rows)
        if term.levels:
            return _dummies(values, term.levels)
        return np.asarray(values, dtype=float)[:, None]
    if kind == TermKind.RANDOM_INTERCEPT:
        return _indicator(subjects, data.n)
    if kind == TermKind.PSPLINE_COVARIATE:
        x = np.asarray(data.covariate(term.covariate, subjects, long_rows), dtype=float)
        return _constrained(bspline_basis(x, term.basis), term.constraint)
    B = _constrained(bspline_basis(times, term.basis), term.constraint)
    if kind == TermKind.PSPLINE_TIME:
        return B
    if kind == TermKind.FUNCTIONAL_RANDOM_INTERCEPT:
        return row_tensor(_indicator(subjects, data.n), B)
    if kind == TermKind.VARYING_COEFFICIENT:
        x = np.asarray(data.covariate(term.covariate, subjects, long_rows), dtype=float)
        return row_tensor(B, x[:, None])
    raise ConfigurationError(f"Term kind '{kind.value}' has no standalone design.")


def _constrained(B: np.ndarray, constraint: ConstraintTransform) -> np.ndarray:
    return constraint.apply(B) if constraint is not None else B


def build_long_design(term: Term, data):
    """N x p design of a built term at the longitudinal measurement times."""
    return term_design(term, data, data.subject_index, data.t, long_rows=True)


def build_surv_design(term: Term, data, times):
    """n x p design of a built term, subject i evaluated at times[i]."""
    times = np.asarray(times, dtype=float)
    if len(times) != data.n:
        raise DataError(f'Expected {data.n} survival times, got {len(times)}.')
    return term_design(term, data, np.arange(data.n), times)


def term_penalties(term: Term, n_subjects: int) -> tuple:
    """
    Prior precision components of a term.

    Returns:
        tuple: (list of full-size PenaltyMatrix, marginals) where marginals is
            (K1, K2) for Kronecker-sum penalties and None otherwise. An empty
            list marks a parametric term with a vague normal prior.
    """
    kind = term.kind
    if kind in (TermKind.INTERCEPT, TermKind.LINEAR_COVARIATE):
        return [], None
    if kind == TermKind.RANDOM_INTERCEPT:
        return [PenaltyMatrix.identity(n_subjects)], None
    K = term.smooth_penalty()
    if kind == TermKind.FUNCTIONAL_RANDOM_INTERCEPT:
        Ks = PenaltyMatrix.identity(n_subjects)
        return _kronecker_components(Ks, K), (Ks, K)
    return [K], None


def assoc_penalties(alpha: AssocSpec) -> tuple:
    """Prior precision components of the association; same layout as term_penalties."""
    K1, K2 = alpha.marginal_penalties()
    components = _kronecker_components(K1, K2)
    if len(components) == 2:
        return components, (K1, K2)
    return components, None


def _kronecker_components(K1: PenaltyMatrix, K2: PenaltyMatrix) -> list:
    p1, p2 = K1.size, K2.size
    out = []
    if not K1.is_zero:
        out.append(PenaltyMatrix(np.kron(K1.K, np.eye(p2)), K1.rank * p2))
    if not K2.is_zero:
        out.append(PenaltyMatrix(np.kron(np.eye(p1), K2.K), K2.rank * p1))
    return out


def g1_design(alpha: AssocSpec, eta_mu: np.ndarray, order: int = 0) -> np.ndarray:
    """
    Marker basis g1 (order 0) or its first/second derivative at eta_mu.

    Identity association gives (eta, 1, 0); the nonlinear association the
    grid-constrained B-spline basis and its analytic derivatives.
    """
    eta_mu = np.asarray(eta_mu, dtype=float)
    if not np.all(np.isfinite(eta_mu)):
        raise NumericalError('non-finite marker predictor in the association', block='mu')
    if alpha.g1 == 'identity':
        if order == 0:
            return eta_mu[:, None]
        return np.full((len(eta_mu), 1), 1.0 if order == 1 else 0.0)
    B = bspline_basis(eta_mu, alpha.g1_basis) if order == 0 else bspline_deriv(eta_mu, alpha.g1_basis, order)
    return alpha.constraint.apply(B)


def g2_design(alpha: AssocSpec, covariate: np.ndarray = None, times: np.ndarray = None) -> np.ndarray:
    """g2 rows from per-row covariate values (covariate/group) or times (pspline_time)."""
    if alpha.g2 == 'constant':
        n = len(times) if times is not None else len(covariate)
        return np.ones((n, 1))
    if alpha.g2 == 'covariate':
        return np.asarray(covariate, dtype=float)[:, None]
    if alpha.g2 == 'group_factor':
        covariate = np.asarray(covariate)
        return np.column_stack([covariate == level for level in alpha.levels]).astype(float)
    return bspline_basis(times, alpha.g2_basis)


def group_design(alpha: AssocSpec, covariate: np.ndarray) -> np.ndarray:
    """Dummy columns of the non-reference group levels."""
    return _dummies(np.asarray(covariate), alpha.levels)


def assoc_covariate(alpha: AssocSpec, data, subjects: np.ndarray):
    if alpha.g2 in ('covariate', 'group_factor'):
        return data.covariate(alpha.g2_column, subjects)
    return None


def eval_association(alpha: AssocSpec, eta_mu_vals, beta_alpha,
                     covariate: np.ndarray = None, times: np.ndarray = None,
                     group_intercepts: np.ndarray = None) -> np.ndarray:
    """
    Evaluate eta_alpha = [g1(eta_mu) (row tensor) g2(x, t)] beta_alpha, plus
    the group intercepts of non-reference levels when present.

    Parameters:
        alpha (AssocSpec): Built association.
        eta_mu_vals (array_like): Marker predictor per row.
        beta_alpha (array_like): Association coefficients of length p_alpha.
        covariate (array_like, optional): Per-row covariate or group value.
        times (array_like, optional): Per-row time (needed for pspline_time).
        group_intercepts (array_like, optional): Non-reference level intercepts.

    Returns:
        np.ndarray: eta_alpha per row.
    """
    eta_mu_vals = np.atleast_1d(np.asarray(eta_mu_vals, dtype=float))
    if times is None and covariate is None:
        times = np.zeros(len(eta_mu_vals))
    X = row_tensor(g1_design(alpha, eta_mu_vals), g2_design(alpha, covariate, times))
    out = X @ np.asarray(beta_alpha, dtype=float)
    if alpha.has_group_intercepts and group_intercepts is not None:
        out = out + group_design(alpha, covariate) @ np.asarray(group_intercepts, dtype=float)
    return out


def eval_predictor(model, k: str, theta, times=None, subjects=None) -> np.ndarray:
    """
    Evaluate predictor k.

    With `times` None, mu and sigma are evaluated at the longitudinal records
    and survival predictors at the follow-up times. Otherwise subject
    `subjects[j]` (default: subject j) is evaluated at `times[j]`.

    Parameters:
        model (JointModel): Built model.
        k (str): One of 'lambda', 'gamma', 'alpha', 'mu', 'sigma'.
        theta (ThetaState or dict): State or mapping of block name to coefficients.
    """
    if k not in PREDICTORS:
        raise ConfigurationError(f"Unknown predictor '{k}'.")
    data = model.data
    coefficients = getattr(theta, 'coefficients', theta)
    long_rows = False
    if times is None:
        subjects, times, long_rows = fitting_rows(k, data)
    else:
        times = np.asarray(times, dtype=float)
        subjects = np.arange(len(times)) if subjects is None else np.asarray(subjects, dtype=int)
    if k == 'alpha':
        eta_mu = eval_predictor(model, 'mu', coefficients, times=times, subjects=subjects)
        alpha = model.alpha
        covariate = assoc_covariate(alpha, data, subjects)
        return eval_association(alpha, eta_mu, coefficients['alpha.assoc'], covariate, times,
                                coefficients.get('alpha.group'))
    out = np.zeros(len(subjects))
    for block in model.predictor_blocks(k):
        out = out + term_design(block.term, data, subjects, times, long_rows) @ coefficients[block.name]
    return out
