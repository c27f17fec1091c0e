"""
Dense linear algebra helpers for block precisions.

Precision matrices of random-effect blocks are block diagonal (one small
block per subject); PrecisionFactor splits them into connected components
and factorizes each separately.
"""
import logging

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.csgraph import connected_components

from jmflex.errors import NonConcaveBlock

logger = logging.getLogger(__name__)

SPLIT_THRESHOLD = 64


def weighted_crossprod(X, w: np.ndarray, Y=None) -> np.ndarray:
    """X' diag(w) Y as a dense array; X and Y may be sparse."""
    Y = X if Y is None else Y
    if sparse.issparse(Y):
        WY = sparse.csr_matrix(Y.multiply(w[:, None]))
    else:
        WY = np.asarray(Y) * w[:, None]
    out = X.T @ WY
    if sparse.issparse(out):
        out = out.toarray()
    return np.asarray(out)


def log_pseudo_det(M: np.ndarray, rel_tol: float = 1e-10) -> float:
    """Sum of log eigenvalues above rel_tol * largest eigenvalue."""
    eig = np.linalg.eigvalsh(0.5 * (M + M.T))
    top = np.max(eig) if eig.size else 0.0
    if top <= 0:
        return 0.0
    return float(np.sum(np.log(eig[eig > rel_tol * top])))


def kronecker_sum_log_pdet(eig1: np.ndarray, eig2: np.ndarray, tau1_sq: float, tau2_sq: float,
                           rel_tol: float = 1e-10) -> float:
    """Log pseudo-determinant of (1/tau1) K1 x I + (1/tau2) I x K2 from marginal eigenvalues."""
    lam = (eig1[:, None] / tau1_sq + eig2[None, :] / tau2_sq).ravel()
    top = np.max(lam) if lam.size else 0.0
    if top <= 0:
        return 0.0
    return float(np.sum(np.log(lam[lam > rel_tol * top])))


class PrecisionFactor:
    """
    Cholesky factorization of a symmetric positive definite precision matrix.

    Attributes:
        P (np.ndarray): The factorized matrix (including any ridge).
        ridge (float): Ridge added to the diagonal before factorizing.
        components (list): Index arrays of the independent diagonal blocks.
    """

    def __init__(self, P: np.ndarray, ridge: float = 0.0) -> None:
        P = 0.5 * (P + P.T)
        if ridge > 0:
            P = P + ridge * np.eye(P.shape[0])
        self.P = P
        self.ridge = ridge
        self.components = _components(P)
        # raises LinAlgError when P is not positive definite
        self._factors = [linalg.cho_factor(P[np.ix_(idx, idx)], lower=True) for idx in self.components]

    @classmethod
    def with_ridge(cls, P: np.ndarray, block: str = '', max_doublings: int = 8) -> 'PrecisionFactor':
        """
        Factorize P, adding a growing ridge while it is not positive definite.

        The first ridge is 1e-6 * max|diag(P)|, doubled up to `max_doublings`
        times before giving up with NonConcaveBlock.
        """
        if not np.all(np.isfinite(P)):
            raise NonConcaveBlock(block, 'Hessian has non-finite entries')
        try:
            return cls(P)
        except np.linalg.LinAlgError:
            pass
        ridge = 1e-6 * max(np.max(np.abs(np.diag(P))), 1e-12)
        for attempt in range(max_doublings + 1):
            try:
                factor = cls(P, ridge)
                logger.debug(f'[{block}] ridge {ridge:.3g} applied after {attempt + 1} attempt(s)')
                return factor
            except np.linalg.LinAlgError:
                ridge *= 2.0
        raise NonConcaveBlock(block, f'Hessian not negative definite after {max_doublings} ridge doublings')

    @property
    def size(self) -> int:
        return self.P.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        out = np.empty_like(b, dtype=float)
        for idx, factor in zip(self.components, self._factors):
            out[idx] = linalg.cho_solve(factor, b[idx])
        return out

    def logdet(self) -> float:
        return float(sum(2.0 * np.sum(np.log(np.diag(c))) for c, _ in self._factors))

    def inverse_diag(self) -> np.ndarray:
        out = np.empty(self.size)
        for idx, factor in zip(self.components, self._factors):
            out[idx] = np.diag(linalg.cho_solve(factor, np.eye(len(idx))))
        return out

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.size))

    def draw(self, mean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One draw from N(mean, P^-1)."""
        z = rng.standard_normal(self.size)
        out = np.empty(self.size)
        for idx, (c, lower) in zip(self.components, self._factors):
            L = np.tril(c) if lower else np.triu(c).T
            out[idx] = linalg.solve_triangular(L.T, z[idx], lower=False)
        return mean + out

    def log_density(self, x: np.ndarray, mean: np.ndarray) -> float:
        """Log density of N(mean, P^-1) at x."""
        r = x - mean
        return 0.5 * self.logdet() - 0.5 * float(r @ self.P @ r) - 0.5 * self.size * np.log(2.0 * np.pi)


def _components(P: np.ndarray) -> list:
    p = P.shape[0]
    if p < SPLIT_THRESHOLD:
        return [np.arange(p)]
    n_comp, labels = connected_components(sparse.csr_matrix(P != 0), directed=False)
    if n_comp == 1:
        return [np.arange(p)]
    return [np.flatnonzero(labels == c) for c in range(n_comp)]
