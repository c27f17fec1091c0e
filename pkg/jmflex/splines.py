"""
B-spline bases, difference penalties, row tensor products and sum-to-zero
constraint transforms.

All functions are pure; inputs are never modified.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.interpolate import BSpline

from jmflex.errors import ConfigurationError, DataError, DimensionError, DomainError


@dataclass(frozen=True)
class BasisSpec:
    """
    One marginal B-spline basis and its difference penalty.

    Attributes:
        interior_knots (tuple): Knots strictly inside the domain, increasing.
        degree (int): Polynomial degree l of the pieces. Default is 3 (cubic).
        diff_order (int): Order r of the difference penalty. Default is 2.
        domain (tuple): (lower, upper) boundary knots.

    The full knot vector adds the two boundary knots and 2l outer knots,
    spaced like the neighbouring boundary interval.
    """
    interior_knots: tuple = ()
    degree: int = 3
    diff_order: int = 2
    domain: tuple = (0.0, 1.0)

    def __post_init__(self) -> None:
        interior = tuple(float(k) for k in np.atleast_1d(self.interior_knots))
        lower, upper = (float(b) for b in self.domain)
        object.__setattr__(self, 'interior_knots', interior)
        object.__setattr__(self, 'domain', (lower, upper))
        object.__setattr__(self, 'degree', int(self.degree))
        object.__setattr__(self, 'diff_order', int(self.diff_order))
        if self.degree < 1:
            raise ConfigurationError(f'Spline degree must be at least 1, got {self.degree}.')
        if self.diff_order < 1:
            raise ConfigurationError(f'Difference order must be at least 1, got {self.diff_order}.')
        if not (np.isfinite(lower) and np.isfinite(upper)) or lower >= upper:
            raise ConfigurationError(f'Invalid basis domain ({lower}, {upper}).')
        inner = np.r_[lower, interior, upper]
        if np.any(np.diff(inner) <= 0):
            raise ConfigurationError('Knots must be strictly increasing and lie inside the domain.')
        if self.n_basis <= self.diff_order:
            raise ConfigurationError(
                f'Basis with {self.n_basis} functions cannot carry a difference penalty of order {self.diff_order}.')

    @classmethod
    def equidistant(cls, lower: float, upper: float, n_basis: int,
                    degree: int = 3, diff_order: int = 2) -> 'BasisSpec':
        """Basis with `n_basis` functions on equidistant knots over [lower, upper]."""
        n_interior = int(n_basis) - int(degree) - 1
        if n_interior < 0:
            raise ConfigurationError(
                f'{n_basis} basis functions are too few for degree {degree} (need at least {degree + 1}).')
        if not lower < upper:
            raise ConfigurationError(f'Invalid basis domain ({lower}, {upper}).')
        interior = np.linspace(lower, upper, n_interior + 2)[1:-1]
        return cls(tuple(interior), degree, diff_order, (lower, upper))

    @property
    def n_basis(self) -> int:
        return len(self.interior_knots) + self.degree + 1

    @property
    def knots(self) -> np.ndarray:
        lower, upper = self.domain
        inner = np.r_[lower, self.interior_knots, upper]
        h_left = inner[1] - inner[0]
        h_right = inner[-1] - inner[-2]
        left = lower - h_left * np.arange(self.degree, 0, -1)
        right = upper + h_right * np.arange(1, self.degree + 1)
        return np.r_[left, inner, right]


@dataclass(frozen=True, eq=False)
class PenaltyMatrix:
    K: np.ndarray
    rank: int

    @property
    def size(self) -> int:
        return self.K.shape[0]

    @classmethod
    def zeros(cls, p: int) -> 'PenaltyMatrix':
        return cls(np.zeros((p, p)), 0)

    @classmethod
    def identity(cls, p: int) -> 'PenaltyMatrix':
        return cls(np.eye(p), p)

    @classmethod
    def from_matrix(cls, K: np.ndarray) -> 'PenaltyMatrix':
        K = 0.5 * (np.asarray(K, dtype=float) + np.asarray(K, dtype=float).T)
        return cls(K, penalty_rank(K))

    @property
    def is_zero(self) -> bool:
        return self.rank == 0


@dataclass(frozen=True, eq=False)
class ConstraintTransform:
    """
    Reparameterization beta = Z beta_dot enforcing linear constraints C beta = 0.

    Attributes:
        Z (np.ndarray): p x (p - c) matrix with orthonormal columns spanning the null space of C.
        grid (np.ndarray, optional): Evaluation grid the constraint was built on, if any.
    """
    Z: np.ndarray
    grid: np.ndarray = field(default=None)

    @property
    def n_constraints(self) -> int:
        return self.Z.shape[0] - self.Z.shape[1]

    def apply(self, X):
        """Constrained design X Z; sparse inputs stay sparse."""
        if sparse.issparse(X):
            return sparse.csr_matrix(X @ self.Z)
        return np.asarray(X) @ self.Z

    def penalty(self, K: PenaltyMatrix) -> PenaltyMatrix:
        return PenaltyMatrix.from_matrix(self.Z.T @ K.K @ self.Z)

    def expand(self, beta_dot: np.ndarray) -> np.ndarray:
        return self.Z @ beta_dot


def bspline_basis(x, spec: BasisSpec) -> np.ndarray:
    """
    Evaluate all B-spline basis functions of `spec` at `x`.

    Points outside the domain are evaluated by extending the outermost
    polynomial pieces.

    Parameters:
        x (array_like): Evaluation points.
        spec (BasisSpec): The basis.

    Returns:
        np.ndarray: len(x) x p matrix, rows sum to one inside the domain.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return _basis(x, spec.knots, spec.degree)


def bspline_deriv(x, spec: BasisSpec, order: int = 1) -> np.ndarray:
    """
    First or second derivative of the basis with respect to x.

    Uses the recurrence expressing the derivative of a degree-l B-spline as a
    weighted difference of two degree-(l-1) B-splines on the same knots.

    Parameters:
        x (array_like): Evaluation points.
        spec (BasisSpec): The basis.
        order (int): 1 or 2.

    Returns:
        np.ndarray: len(x) x p matrix of derivatives.
    """
    if order not in (1, 2):
        raise ConfigurationError(f'Derivative order must be 1 or 2, got {order}.')
    if order > spec.degree:
        raise ConfigurationError(f'Derivative of order {order} is undefined for degree {spec.degree}.')
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t = spec.knots
    mapping = np.eye(spec.n_basis)
    for step in range(order):
        degree = spec.degree - step
        knots = t[step:len(t) - step]
        mapping = _derivative_map(knots, degree) @ mapping
    lower = _basis(x, t[order:len(t) - order], spec.degree - order)
    return lower @ mapping


def _basis(x: np.ndarray, t: np.ndarray, degree: int) -> np.ndarray:
    p = len(t) - degree - 1
    return BSpline(t, np.eye(p), degree, extrapolate=True)(x)


def _derivative_map(t: np.ndarray, degree: int) -> np.ndarray:
    # rows index degree-(l-1) functions on t[1:-1], columns degree-l functions on t
    p = len(t) - degree - 1
    M = np.zeros((p - 1, p))
    for d in range(p):
        if d >= 1:
            M[d - 1, d] = degree / (t[d + degree] - t[d])
        if d <= p - 2:
            M[d, d] = -degree / (t[d + degree + 1] - t[d + 1])
    return M


def penalty_rank(K: np.ndarray, rel_tol: float = 1e-10) -> int:
    if K.size == 0:
        return 0
    eig = np.linalg.eigvalsh(0.5 * (K + K.T))
    top = np.max(np.abs(eig))
    if top == 0:
        return 0
    return int(np.sum(eig > rel_tol * top))


def difference_penalty(p: int, r: int) -> PenaltyMatrix:
    """P-spline penalty K = D_r' D_r for p coefficients; rank p - r."""
    if r < 1 or p <= r:
        raise ConfigurationError(f'Difference penalty needs p > r >= 1, got p={p}, r={r}.')
    D = np.diff(np.eye(p), n=r, axis=0)
    return PenaltyMatrix(D.T @ D, p - r)


def row_tensor(A, B):
    """
    Row tensor product: row i is kron(A[i], B[i]).

    Sparse inputs give a sparse CSR result; dense inputs a dense array.
    """
    if A.shape[0] != B.shape[0]:
        raise DimensionError(f'Row tensor product needs equal row counts, got {A.shape[0]} and {B.shape[0]}.')
    n, a = A.shape
    b = B.shape[1]
    if sparse.issparse(A) or sparse.issparse(B):
        A = sparse.coo_matrix(A)
        B = B.toarray() if sparse.issparse(B) else np.asarray(B)
        rows = np.repeat(A.row, b)
        cols = (A.col[:, None] * b + np.arange(b)).ravel()
        vals = (A.data[:, None] * B[A.row]).ravel()
        return sparse.csr_matrix((vals, (rows, cols)), shape=(n, a * b))
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    return (A[:, :, None] * B[:, None, :]).reshape(n, a * b)


def anisotropic_penalty(K1, K2, tau1_sq: float, tau2_sq: float) -> np.ndarray:
    """Kronecker-sum precision (1/tau1^2) K1 x I + (1/tau2^2) I x K2."""
    if not (tau1_sq > 0 and tau2_sq > 0):
        raise DomainError(f'Variance parameters must be positive, got {tau1_sq} and {tau2_sq}.')
    K1 = K1.K if isinstance(K1, PenaltyMatrix) else np.asarray(K1, dtype=float)
    K2 = K2.K if isinstance(K2, PenaltyMatrix) else np.asarray(K2, dtype=float)
    p1, p2 = K1.shape[0], K2.shape[0]
    return np.kron(K1, np.eye(p2)) / tau1_sq + np.kron(np.eye(p1), K2) / tau2_sq


def constraint_from_rows(C: np.ndarray, grid: np.ndarray = None) -> ConstraintTransform:
    """Null-space transform of the constraint rows C via a complete QR of C'."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    c = C.shape[0]
    scale = np.max(np.abs(C)) if C.size else 0.0
    if scale == 0 or np.linalg.matrix_rank(C, tol=1e-12 * scale * max(C.shape)) < c:
        raise ConfigurationError('Constraint is vacuous: constraint rows are zero or rank deficient.')
    Q, _ = np.linalg.qr(C.T, mode='complete')
    return ConstraintTransform(Q[:, c:], grid)


def sum_to_zero(X, K: PenaltyMatrix):
    """
    Impose 1' X beta = 0 by reparameterization.

    Parameters:
        X (array_like or sparse matrix): n x p design.
        K (PenaltyMatrix): p x p penalty.

    Returns:
        tuple: (X Z, Z' K Z, ConstraintTransform)
    """
    C = np.asarray(X.sum(axis=0)).reshape(1, -1)
    transform = constraint_from_rows(C)
    return transform.apply(X), transform.penalty(K), transform


def alpha_grid_constraint(spec: BasisSpec, y_obs, grid_size: int = 100) -> ConstraintTransform:
    """
    Sum-to-zero constraint for the association basis on a fixed marker grid.

    The grid has `grid_size` equidistant points between the 2.5th and 97.5th
    empirical quantiles of the observed longitudinal response.
    """
    y = np.asarray(y_obs, dtype=float)
    y = y[np.isfinite(y)]
    if np.unique(y).size < 2:
        raise DataError('Observed marker values are degenerate; need at least two distinct values.')
    if grid_size < 2:
        raise ConfigurationError(f'Constraint grid needs at least 2 points, got {grid_size}.')
    lower, upper = np.quantile(y, [0.025, 0.975])
    if not upper > lower:
        raise DataError('Observed marker quantile range is empty.')
    grid = np.linspace(lower, upper, grid_size)
    C = bspline_basis(grid, spec).sum(axis=0)
    return constraint_from_rows(C, grid)
