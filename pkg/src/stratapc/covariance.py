"""Matrix-normal density and cross-strata covariance structures.

Three cross-strata structures are supported for the latent blocks:
independent, exchangeable (common correlation on an open interval), and a
graph-based mixture of independent and scaled intrinsic-CAR components
(bym2).  Separable (row x column) covariances are handled without ever
materializing the Kronecker product.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import scipy.linalg as sla

StructureKind = Literal["independent", "exchangeable", "bym2"]

# relative eigenvalue cutoff for the ICAR null space
_NULL_EIG_RTOL = 1e-10


class DisconnectedGraphError(ValueError):
    """The adjacency graph has more than one connected component."""


@dataclass(frozen=True)
class AdjacencyGraph:
    """Symmetric adjacency over strata 0..n_strata-1, no self-loops.

    Connectivity is reported, not required; operations that need a single
    component check for themselves.
    """

    n_strata: int
    edges: frozenset[tuple[int, int]]

    @classmethod
    def from_edges(cls, n_strata: int, pairs) -> "AdjacencyGraph":
        norm = set()
        for u, v in pairs:
            u, v = int(u), int(v)
            if u == v:
                raise ValueError(f"self-loop on stratum {u}")
            if not (0 <= u < n_strata and 0 <= v < n_strata):
                raise ValueError(f"edge ({u}, {v}) outside 0..{n_strata - 1}")
            norm.add((min(u, v), max(u, v)))
        return cls(n_strata=n_strata, edges=frozenset(norm))

    def adjacency_matrix(self) -> np.ndarray:
        w = np.zeros((self.n_strata, self.n_strata))
        for u, v in self.edges:
            w[u, v] = 1.0
            w[v, u] = 1.0
        return w

    def component_labels(self) -> np.ndarray:
        """Connected-component label per stratum (0-based, breadth-first)."""
        labels = np.full(self.n_strata, -1, dtype=int)
        neighbors: list[list[int]] = [[] for _ in range(self.n_strata)]
        for u, v in self.edges:
            neighbors[u].append(v)
            neighbors[v].append(u)
        comp = 0
        for start in range(self.n_strata):
            if labels[start] >= 0:
                continue
            stack = [start]
            labels[start] = comp
            while stack:
                node = stack.pop()
                for nb in neighbors[node]:
                    if labels[nb] < 0:
                        labels[nb] = comp
                        stack.append(nb)
            comp += 1
        return labels

    @property
    def n_components(self) -> int:
        return int(self.component_labels().max()) + 1


@dataclass(frozen=True)
class CrossStrataStructure:
    """Cross-strata correlation family, optionally with its parameter.

    rho is absent for the independent structure; for exchangeable it must lie
    strictly inside (-1/(R-1), 1); for bym2 strictly inside (0, 1).
    """

    kind: StructureKind
    rho: float | None = None
    graph: AdjacencyGraph | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("independent", "exchangeable", "bym2"):
            raise ValueError(f"unknown structure kind {self.kind!r}")
        if self.kind == "bym2" and self.graph is None:
            raise ValueError("bym2 structure requires an adjacency graph")
        if self.kind == "independent" and self.rho is not None:
            raise ValueError("independent structure takes no rho")

    def with_rho(self, rho: float) -> "CrossStrataStructure":
        return CrossStrataStructure(kind=self.kind, rho=rho, graph=self.graph)


@dataclass(frozen=True)
class MatrixNormalParams:
    """Mean and separable (row, column) covariances; factorized eagerly so a
    shared instance is read-only afterwards."""

    mean: np.ndarray
    row_cov: np.ndarray
    col_cov: np.ndarray
    _row_chol: np.ndarray = field(init=False, repr=False)
    _col_chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        mean = np.atleast_2d(np.asarray(self.mean, dtype=float))
        row_cov = np.atleast_2d(np.asarray(self.row_cov, dtype=float))
        col_cov = np.atleast_2d(np.asarray(self.col_cov, dtype=float))
        n_r, n_c = mean.shape
        if row_cov.shape != (n_r, n_r) or col_cov.shape != (n_c, n_c):
            raise ValueError(
                f"covariance shapes {row_cov.shape}, {col_cov.shape} do not "
                f"match mean {mean.shape}"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "row_cov", row_cov)
        object.__setattr__(self, "col_cov", col_cov)
        object.__setattr__(self, "_row_chol", sla.cholesky(row_cov, lower=True))
        object.__setattr__(self, "_col_chol", sla.cholesky(col_cov, lower=True))


def matrix_normal_logpdf(x: np.ndarray, params: MatrixNormalParams) -> float:
    """Log density of the matrix normal with separable covariance.

    Equals the multivariate-normal log density of vec(X) under the Kronecker
    covariance col_cov (x) row_cov, computed from the two small factors only.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n_r, n_c = params.mean.shape
    if x.shape != (n_r, n_c):
        raise ValueError(f"X has shape {x.shape}, expected {(n_r, n_c)}")
    resid = x - params.mean
    lr, lc = params._row_chol, params._col_chol
    # trace term: tr(col^-1 resid' row^-1 resid)
    s1 = sla.cho_solve((lr, True), resid)
    s2 = sla.cho_solve((lc, True), resid.T).T
    trace = float(np.sum(s1 * s2))
    logdet_row = 2.0 * float(np.sum(np.log(np.diag(lr))))
    logdet_col = 2.0 * float(np.sum(np.log(np.diag(lc))))
    return -0.5 * (
        n_r * n_c * np.log(2.0 * np.pi) + n_r * logdet_col + n_c * logdet_row + trace
    )


def exchangeable_corr(n_strata: int, rho: float) -> np.ndarray:
    """Correlation matrix with unit diagonal and constant off-diagonal rho.

    Positive definite exactly for rho strictly inside (-1/(R-1), 1); the open
    boundary is enforced.
    """
    if n_strata < 2:
        raise ValueError("exchangeable correlation needs at least 2 strata")
    lo = -1.0 / (n_strata - 1)
    if not (lo < rho < 1.0):
        raise ValueError(f"rho={rho} outside the open interval ({lo}, 1)")
    out = np.full((n_strata, n_strata), rho)
    np.fill_diagonal(out, 1.0)
    return out


def icar_precision(graph: AdjacencyGraph) -> np.ndarray:
    """Intrinsic-CAR precision Q = D - W; rows sum to zero, rank deficiency
    equals the number of connected components."""
    if graph.n_strata < 2:
        raise ValueError("need at least 2 strata")
    w = graph.adjacency_matrix()
    return np.diag(w.sum(axis=1)) - w


def scaled_generalized_inverse(q: np.ndarray) -> np.ndarray:
    """Pseudoinverse of an ICAR precision, scaled so the geometric mean of
    its diagonal is one.

    The graph must be connected (exactly one zero eigenvalue); disconnected
    precisions are rejected so callers can augment connectivity first.
    """
    q = np.asarray(q, dtype=float)
    eigvals, eigvecs = np.linalg.eigh(q)
    cutoff = _NULL_EIG_RTOL * float(eigvals.max())
    null_count = int(np.sum(eigvals <= cutoff))
    if null_count != 1:
        raise DisconnectedGraphError(
            f"precision has {null_count} (near-)zero eigenvalues; expected "
            "exactly one, i.e. a single connected component"
        )
    if eigvals[1] < 1e-8 * eigvals.max():
        warnings.warn(
            "second-smallest ICAR eigenvalue is nearly zero; the scaled "
            "generalized inverse is ill-conditioned",
            RuntimeWarning,
        )
    inv_vals = np.zeros_like(eigvals)
    keep = eigvals > cutoff
    inv_vals[keep] = 1.0 / eigvals[keep]
    qinv = (eigvecs * inv_vals) @ eigvecs.T
    qinv = 0.5 * (qinv + qinv.T)
    sigma2_ref = float(np.exp(np.mean(np.log(np.diag(qinv)))))
    return qinv / sigma2_ref


def bym2_corr(rho: float, scaled_qinv: np.ndarray) -> np.ndarray:
    """Cross-strata covariance (1-rho) I + rho Q*^-, rho strictly in (0, 1).

    Mixing the identity with the scaled generalized inverse keeps the matrix
    positive definite over the whole open interval.
    """
    if not (0.0 < rho < 1.0):
        raise ValueError(f"rho={rho} outside the open interval (0, 1)")
    scaled_qinv = np.asarray(scaled_qinv, dtype=float)
    return (1.0 - rho) * np.eye(scaled_qinv.shape[0]) + rho * scaled_qinv


def structure_covariance(
    structure: CrossStrataStructure, n_strata: int, scaled_qinv: np.ndarray | None = None
) -> np.ndarray:
    """Cross-strata covariance matrix for a structure with its rho set."""
    if structure.kind == "independent":
        return np.eye(n_strata)
    if structure.rho is None:
        raise ValueError(f"{structure.kind} structure needs rho")
    if structure.kind == "exchangeable":
        return exchangeable_corr(n_strata, structure.rho)
    if scaled_qinv is None:
        if structure.graph is None:
            raise ValueError("bym2 structure needs a graph")
        scaled_qinv = scaled_generalized_inverse(icar_precision(structure.graph))
    return bym2_corr(structure.rho, scaled_qinv)


@dataclass(frozen=True)
class KroneckerPrecision:
    """Precision of the strata-major vec of a (block_rows x R) latent block.

    The block follows a matrix normal with within-stratum covariance
    tau^-1 I and cross-strata covariance sigma, so the vec precision is
    sigma^-1 (x) tau I.  Quadratic forms, log-determinants and matvecs use
    the small factors; ``dense()`` materializes the Kronecker product only
    when a caller genuinely needs the full matrix.
    """

    block_rows: int
    n_strata: int
    tau: float
    sigma: np.ndarray | None  # None means independent (identity)
    _sigma_chol: np.ndarray | None = field(init=False, repr=False)
    _sigma_inv: np.ndarray | None = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.sigma is None:
            object.__setattr__(self, "_sigma_chol", None)
            object.__setattr__(self, "_sigma_inv", None)
            return
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.shape != (self.n_strata, self.n_strata):
            raise ValueError("sigma shape does not match n_strata")
        chol = sla.cholesky(sigma, lower=True)
        inv = sla.cho_solve((chol, True), np.eye(self.n_strata))
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "_sigma_chol", chol)
        object.__setattr__(self, "_sigma_inv", 0.5 * (inv + inv.T))

    @property
    def dim(self) -> int:
        return self.block_rows * self.n_strata

    def _as_matrix(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise ValueError(f"vector has shape {v.shape}, expected ({self.dim},)")
        return v.reshape(self.n_strata, self.block_rows)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        m = self._as_matrix(v)
        if self._sigma_inv is None:
            return (self.tau * m).ravel()
        return (self.tau * (self._sigma_inv @ m)).ravel()

    def quad_form(self, v: np.ndarray) -> float:
        m = self._as_matrix(v)
        if self._sigma_inv is None:
            return self.tau * float(np.sum(m * m))
        return self.tau * float(np.sum((self._sigma_inv @ m) * m))

    def logdet(self) -> float:
        out = self.dim * np.log(self.tau)
        if self._sigma_chol is not None:
            logdet_sigma = 2.0 * float(np.sum(np.log(np.diag(self._sigma_chol))))
            out -= self.block_rows * logdet_sigma
        return float(out)

    def dense(self) -> np.ndarray:
        if self._sigma_inv is None:
            return self.tau * np.eye(self.dim)
        return np.kron(self._sigma_inv, self.tau * np.eye(self.block_rows))

    def sample(self, rng: np.random.Generator, mean: np.ndarray | None = None) -> np.ndarray:
        """One draw of the block, returned as a strata-major vec."""
        z = rng.standard_normal((self.block_rows, self.n_strata))
        x = z / np.sqrt(self.tau)
        if self._sigma_chol is not None:
            x = x @ self._sigma_chol.T
        if mean is not None:
            x = x + mean.reshape(self.n_strata, self.block_rows).T
        return x.T.ravel()


def block_prior_precision(
    block_rows: int,
    n_strata: int,
    structure: CrossStrataStructure,
    tau: float,
    scaled_qinv: np.ndarray | None = None,
) -> KroneckerPrecision:
    """Precision operator for one latent block under a cross-strata structure."""
    if structure.kind == "independent":
        sigma = None
    else:
        sigma = structure_covariance(structure, n_strata, scaled_qinv)
    return KroneckerPrecision(
        block_rows=block_rows, n_strata=n_strata, tau=tau, sigma=sigma
    )
