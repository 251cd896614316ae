"""Stratified latent Gaussian model assembly and posterior inference.

A latent model stacks one canonical design per stratum, with parameter
blocks (baseline, age, period, cohort curvatures) either shared across
strata or stratum-specific with a matrix-normal prior.  Inference is
empirical-Bayes: a Newton/IRLS conditional mode and Gaussian (Laplace)
approximation of the latent field at each hyperparameter value, a
derivative-free simplex search maximizing the Laplace approximation of the
hyperparameter posterior, and Gaussian posterior sampling at the optimum.
``mcmc.py`` provides a sampling oracle for validating this pipeline on
small instances.

Cell vectorization is stratum-major, column-major by period within each
stratum.  All sampling is seed-driven; identical inputs and seeds produce
identical outputs on one platform.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize
from scipy.special import gammaln

from . import _kernels
from .core import (
    BaselineSpec,
    DesignParts,
    GridSpec,
    default_baseline_spec,
    design_parts,
)
from .covariance import (
    CrossStrataStructure,
    KroneckerPrecision,
    block_prior_precision,
    icar_precision,
    scaled_generalized_inverse,
)
from .priors import HyperParameters, PCPriorBYM2, PriorConfig, PriorModel

BLOCKS = ("baseline", "age", "period", "cohort")

_SHARING_TABLE: dict[str, frozenset[str]] = {
    "M1": frozenset({"baseline", "age", "period", "cohort"}),
    "M2": frozenset({"baseline", "age", "period"}),
    "M3": frozenset({"baseline", "age", "cohort"}),
    "M4": frozenset({"baseline", "age"}),
    "M5": frozenset({"baseline"}),
    "M6": frozenset(),
}


class ModeError(RuntimeError):
    """Conditional mode finding failed; ``.last`` holds the final iterate
    when one is available."""

    def __init__(self, message: str, last: np.ndarray | None = None):
        super().__init__(message)
        self.last = last


@dataclass(frozen=True)
class SharingPattern:
    """Which parameter blocks are constant across strata (one of the six
    named patterns, from everything shared down to nothing shared)."""

    name: str
    shared: frozenset[str]

    def __post_init__(self) -> None:
        expected = _SHARING_TABLE.get(self.name)
        if expected is None:
            raise ValueError(f"unknown pattern {self.name!r}; use M1..M6")
        if frozenset(self.shared) != expected:
            raise ValueError(
                f"pattern {self.name} shares {sorted(expected)}, got {sorted(self.shared)}"
            )

    @classmethod
    def from_name(cls, name: str) -> "SharingPattern":
        name = name.upper()
        if name not in _SHARING_TABLE:
            raise ValueError(f"unknown pattern {name!r}; use M1..M6")
        return cls(name=name, shared=_SHARING_TABLE[name])

    def is_shared(self, block: str) -> bool:
        return block in self.shared

    @property
    def varying(self) -> tuple[str, ...]:
        return tuple(b for b in BLOCKS if b not in self.shared)


def pattern_names() -> tuple[str, ...]:
    return tuple(_SHARING_TABLE)


def flatten_cells(arr: np.ndarray) -> np.ndarray:
    """(R, A, T) -> flat vector, stratum-major, column-major by period."""
    arr = np.asarray(arr)
    r = arr.shape[0]
    return arr.transpose(0, 2, 1).reshape(r, -1).ravel()


def unflatten_cells(flat: np.ndarray, n_strata: int, grid: GridSpec) -> np.ndarray:
    """Inverse of flatten_cells, back to (R, A, T)."""
    flat = np.asarray(flat)
    return flat.reshape(n_strata, grid.n_period, grid.n_age).transpose(0, 2, 1)


@dataclass(frozen=True)
class MortalityDataset:
    """Event counts and person-years at risk on an age x period x stratum
    grid, with a mask for the observed cells.  Missing cells are excluded
    from every likelihood sum; the latent model still defines their rates."""

    counts: np.ndarray      # (R, A, T)
    exposures: np.ndarray   # (R, A, T)
    observed: np.ndarray    # (R, A, T) bool
    grid: GridSpec
    strata: tuple[str, ...]

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=float)
        exposures = np.asarray(self.exposures, dtype=float)
        observed = np.asarray(self.observed, dtype=bool)
        shape = (len(self.strata), self.grid.n_age, self.grid.n_period)
        for name, arr in (("counts", counts), ("exposures", exposures), ("observed", observed)):
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        if np.any(counts[observed] < 0):
            raise ValueError("counts must be nonnegative")
        if np.any(counts[observed] != np.round(counts[observed])):
            raise ValueError("counts must be integers")
        if np.any(exposures[observed] <= 0):
            raise ValueError("observed cells need strictly positive exposure")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "exposures", exposures)
        object.__setattr__(self, "observed", observed)

    @classmethod
    def from_arrays(
        cls,
        counts: np.ndarray,
        exposures: np.ndarray,
        observed: np.ndarray | None = None,
        strata: Sequence[str] | None = None,
        interval_width: float = 5.0,
    ) -> "MortalityDataset":
        counts = np.asarray(counts, dtype=float)
        if counts.ndim != 3:
            raise ValueError("counts must be (n_strata, n_age, n_period)")
        r, a, t = counts.shape
        grid = GridSpec(n_age=a, n_period=t, interval_width=interval_width)
        if observed is None:
            observed = np.ones_like(counts, dtype=bool)
        if strata is None:
            strata = tuple(f"s{i}" for i in range(r))
        return cls(
            counts=counts,
            exposures=np.asarray(exposures, dtype=float),
            observed=np.asarray(observed, dtype=bool),
            grid=grid,
            strata=tuple(strata),
        )

    @property
    def n_strata(self) -> int:
        return len(self.strata)

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())


class PoissonLikelihood:
    """Poisson likelihood on the observed cells, flattened to the model's
    cell order, with the constant terms precomputed."""

    def __init__(self, data: MortalityDataset):
        self.y = flatten_cells(data.counts)
        self.exposure = flatten_cells(data.exposures)
        self.observed = flatten_cells(data.observed).astype(bool)
        y_obs = self.y[self.observed]
        n_obs = self.exposure[self.observed]
        self.constant = float(np.sum(y_obs * np.log(n_obs) - gammaln(y_obs + 1.0)))
        # per-observed-cell constants, for pointwise scoring
        self.cell_constants = y_obs * np.log(n_obs) - gammaln(y_obs + 1.0)

    def value_grad_weights(self, mu: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        if not np.all(np.isfinite(mu)):
            return -np.inf, np.zeros_like(mu), np.zeros_like(mu)
        core, grad, w = _kernels.poisson_ll_grad_w(mu, self.y, self.exposure, self.observed)
        if not np.isfinite(core):
            return -np.inf, grad, w
        return core + self.constant, grad, w

    def pointwise(self, logrates: np.ndarray) -> np.ndarray:
        """Per-sample per-observed-cell log pmf, (n_samples, n_observed)."""
        mu_obs = np.ascontiguousarray(logrates[:, self.observed])
        return _kernels.pointwise_poisson_ll(
            mu_obs,
            self.y[self.observed],
            self.exposure[self.observed],
            self.cell_constants,
        )


class GaussianPseudoLikelihood:
    """Gaussian stand-in likelihood on the observed cells, used to validate
    the Laplace approximation where it is exact."""

    def __init__(self, z: np.ndarray, noise_variance: float, observed: np.ndarray | None = None):
        self.z = np.asarray(z, dtype=float).ravel()
        self.noise_variance = float(noise_variance)
        if observed is None:
            observed = np.ones_like(self.z, dtype=bool)
        self.observed = np.asarray(observed, dtype=bool).ravel()
        n_obs = int(self.observed.sum())
        self.constant = -0.5 * n_obs * np.log(2.0 * np.pi * self.noise_variance)

    def value_grad_weights(self, mu: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        if not np.all(np.isfinite(mu)):
            return -np.inf, np.zeros_like(mu), np.zeros_like(mu)
        resid = np.where(self.observed, self.z - mu, 0.0)
        ll = self.constant - 0.5 * float(np.sum(resid**2)) / self.noise_variance
        grad = resid / self.noise_variance
        w = np.where(self.observed, 1.0 / self.noise_variance, 0.0)
        return ll, grad, w


class LatentPrior:
    """Gaussian prior over the free latent vector at fixed hyperparameters:
    dense precision, mean, and log density."""

    def __init__(self, precision: np.ndarray, mean: np.ndarray, logdet: float):
        self.precision = precision
        self.mean = mean
        self.logdet = logdet
        self.dim = mean.shape[0]

    def logpdf(self, xi: np.ndarray) -> float:
        resid = xi - self.mean
        quad = float(resid @ (self.precision @ resid))
        return -0.5 * (self.dim * np.log(2.0 * np.pi) - self.logdet + quad)

    def grad(self, xi: np.ndarray) -> np.ndarray:
        return -(self.precision @ (xi - self.mean))


@dataclass
class LatentModel:
    """Assembled stratified model for one (sharing pattern, structure) pair.

    ``col_index[r]`` maps the single-stratum design columns onto positions in
    the free latent vector for stratum r; shared blocks map every stratum to
    the same positions.
    """

    grid: GridSpec
    n_strata: int
    pattern: SharingPattern
    structure: CrossStrataStructure
    baseline_spec: BaselineSpec
    parts: DesignParts
    prior_config: PriorConfig
    prior_model: PriorModel
    blocks: dict[str, tuple[int, int, bool]]  # name -> (offset, per-stratum length, shared)
    col_index: np.ndarray                     # (R, n_canonical) int
    free_dim: int
    scaled_qinv: np.ndarray | None = None

    # ------------------------------------------------------------------
    # design application

    @property
    def design_matrix(self) -> np.ndarray:
        return self.parts.matrix

    @property
    def n_cells(self) -> int:
        return self.grid.n_cells * self.n_strata

    def logrates_matrix(self, xi: np.ndarray) -> np.ndarray:
        """Log rates as (R, n_cells_per_stratum)."""
        return xi[self.col_index] @ self.parts.matrix.T

    def logrates_flat(self, xi: np.ndarray) -> np.ndarray:
        return self.logrates_matrix(xi).ravel()

    def logrates_samples(self, xi_samples: np.ndarray) -> np.ndarray:
        """Map (n, free_dim) latent samples to (n, R * cells) log rates."""
        m_t = self.parts.matrix.T
        out = [xi_samples[:, self.col_index[r]] @ m_t for r in range(self.n_strata)]
        return np.concatenate(out, axis=1)

    def design_transpose_apply(self, v_flat: np.ndarray) -> np.ndarray:
        """Design' @ v for a flat cell vector, accumulated over strata."""
        cells = self.grid.n_cells
        out = np.zeros(self.free_dim)
        v = v_flat.reshape(self.n_strata, cells)
        mt_v = v @ self.parts.matrix  # (R, n_canonical)
        for r in range(self.n_strata):
            np.add.at(out, self.col_index[r], mt_v[r])
        return out

    def weighted_gram(self, w_flat: np.ndarray) -> np.ndarray:
        """Design' diag(w) Design, accumulated per stratum."""
        cells = self.grid.n_cells
        m = self.parts.matrix
        h = np.zeros((self.free_dim, self.free_dim))
        w = w_flat.reshape(self.n_strata, cells)
        for r in range(self.n_strata):
            gram = m.T @ (w[r][:, None] * m)
            idx = self.col_index[r]
            h[np.ix_(idx, idx)] += gram
        return h

    @staticmethod
    def flatten_cells(arr: np.ndarray) -> np.ndarray:
        return flatten_cells(arr)

    # ------------------------------------------------------------------
    # latent prior

    def _block_precisions(
        self, eta: HyperParameters
    ) -> list[tuple[str, slice, KroneckerPrecision | np.ndarray, np.ndarray]]:
        """(name, slice, precision, mean) per block; shared-block precisions
        come back as dense diagonals, varying blocks as Kronecker operators."""
        out = []
        for name in BLOCKS:
            offset, length, shared = self.blocks[name]
            total = length if shared else length * self.n_strata
            sl = slice(offset, offset + total)
            if name == "baseline":
                if shared:
                    prior = self.prior_config.baseline_mean
                    prec = np.diag(1.0 / prior.variances)
                    mean = prior.mean.copy()
                else:
                    if eta.nu0 is None:
                        raise ValueError("varying baseline needs nu0 in eta")
                    op = block_prior_precision(
                        length,
                        self.n_strata,
                        self._structure_with_rho(eta, name),
                        eta.taus["baseline"],
                        scaled_qinv=self.scaled_qinv,
                    )
                    prec = op
                    mean = np.tile(np.asarray(eta.nu0, dtype=float), self.n_strata)
            else:
                tau = eta.taus[name]
                if shared:
                    prec = tau * np.eye(length)
                    mean = np.zeros(length)
                else:
                    op = block_prior_precision(
                        length,
                        self.n_strata,
                        self._structure_with_rho(eta, name),
                        tau,
                        scaled_qinv=self.scaled_qinv,
                    )
                    prec = op
                    mean = np.zeros(total)
            out.append((name, sl, prec, mean))
        return out

    def _structure_with_rho(self, eta: HyperParameters, block: str) -> CrossStrataStructure:
        if self.structure.kind == "independent":
            return self.structure
        return self.structure.with_rho(eta.rhos[block])

    def latent_prior(self, eta: HyperParameters) -> LatentPrior:
        precision = np.zeros((self.free_dim, self.free_dim))
        mean = np.zeros(self.free_dim)
        logdet = 0.0
        for _, sl, prec, block_mean in self._block_precisions(eta):
            if isinstance(prec, KroneckerPrecision):
                precision[sl, sl] = prec.dense()
                logdet += prec.logdet()
            else:
                precision[sl, sl] = prec
                logdet += float(np.sum(np.log(np.diag(prec))))
            mean[sl] = block_mean
        return LatentPrior(precision=precision, mean=mean, logdet=logdet)

    def sample_latent_prior(self, eta: HyperParameters, rng: np.random.Generator) -> np.ndarray:
        """One draw of the free latent vector from its prior at eta."""
        xi = np.zeros(self.free_dim)
        for name, sl, prec, mean in self._block_precisions(eta):
            if isinstance(prec, KroneckerPrecision):
                xi[sl] = prec.sample(rng, mean=mean if name == "baseline" else None)
            else:
                sd = 1.0 / np.sqrt(np.diag(prec))
                xi[sl] = mean + sd * rng.standard_normal(len(mean))
        return xi

    # ------------------------------------------------------------------
    # hyperparameter layout and transforms

    @property
    def eta_layout(self) -> tuple[tuple[str, str], ...]:
        layout: list[tuple[str, str]] = []
        for block in self.prior_model.tau_blocks:
            layout.append(("tau", block))
        for block in self.prior_model.rho_blocks:
            layout.append(("rho", block))
        if self.prior_model.nu0_active:
            for i in range(3):
                layout.append(("nu0", str(i)))
        return tuple(layout)

    def default_eta(self) -> HyperParameters:
        taus = {b: 1.0 / self.prior_config.rate(b) for b in self.prior_model.tau_blocks}
        rhos = {}
        for b in self.prior_model.rho_blocks:
            rhos[b] = 0.0 if self.structure.kind == "exchangeable" else 0.5
        nu0 = self.prior_config.baseline_mean.mean.copy() if self.prior_model.nu0_active else None
        return HyperParameters(taus=taus, rhos=rhos, nu0=nu0)

    def eta_to_vector(self, eta: HyperParameters) -> np.ndarray:
        from .priors import zeta_from_rho

        vec = []
        for kind, block in self.eta_layout:
            if kind == "tau":
                vec.append(np.log(eta.taus[block]))
            elif kind == "rho":
                rho = eta.rhos[block]
                if self.structure.kind == "exchangeable":
                    vec.append(zeta_from_rho(rho, self.n_strata))
                else:
                    vec.append(np.log(rho / (1.0 - rho)))
            else:
                assert eta.nu0 is not None
                vec.append(float(eta.nu0[int(block)]))
        return np.asarray(vec)

    def eta_from_vector(self, vec: np.ndarray) -> HyperParameters:
        from .priors import rho_from_zeta

        vec = np.asarray(vec, dtype=float)
        taus: dict[str, float] = {}
        rhos: dict[str, float] = {}
        nu0 = np.zeros(3) if self.prior_model.nu0_active else None
        for x, (kind, block) in zip(vec, self.eta_layout):
            if kind == "tau":
                taus[block] = float(np.exp(np.clip(x, -46.0, 46.0)))
            elif kind == "rho":
                x = float(np.clip(x, -30.0, 30.0))
                if self.structure.kind == "exchangeable":
                    rhos[block] = rho_from_zeta(x, self.n_strata)
                else:
                    rhos[block] = 1.0 / (1.0 + np.exp(-x))
            else:
                assert nu0 is not None
                nu0[int(block)] = float(x)
        return HyperParameters(taus=taus, rhos=rhos, nu0=nu0)

    def transform_log_jacobian(self, vec: np.ndarray) -> float:
        """log |d eta / d vec| of the transform used by eta_from_vector."""
        from .priors import dzeta_drho, rho_from_zeta

        total = 0.0
        for x, (kind, block) in zip(np.asarray(vec, dtype=float), self.eta_layout):
            if kind == "tau":
                total += float(np.clip(x, -46.0, 46.0))
            elif kind == "rho":
                x = float(np.clip(x, -30.0, 30.0))
                if self.structure.kind == "exchangeable":
                    rho = rho_from_zeta(x, self.n_strata)
                    total += -np.log(dzeta_drho(rho, self.n_strata))
                else:
                    rho = 1.0 / (1.0 + np.exp(-x))
                    total += np.log(rho) + np.log1p(-rho)
        return float(total)

    # ------------------------------------------------------------------

    def default_init(self, likelihood) -> np.ndarray:
        """Zero start, with baseline coordinates seeded from the crude rate
        log(sum y / sum N) over the observed baseline cells (prior mean when
        those cells are all missing)."""
        xi = np.zeros(self.free_dim)
        offset, length, shared = self.blocks["baseline"]
        cells = self.grid.n_cells
        b_rows = self.parts.baseline_rows
        prior_mean = self.prior_config.baseline_mean.mean

        def crude(strata: Sequence[int]) -> np.ndarray:
            rows = np.concatenate([r * cells + b_rows for r in strata])
            use = rows[likelihood.observed[rows]] if hasattr(likelihood, "observed") else rows
            if use.size and hasattr(likelihood, "y"):
                ysum = float(likelihood.y[use].sum())
                nsum = float(likelihood.exposure[use].sum())
                if ysum > 0 and nsum > 0:
                    level = float(np.log(ysum / nsum))
                    if self.baseline_spec.form == "three-points":
                        return np.array([level, level, level])
                    return np.array([level, 0.0, 0.0])
            if self.baseline_spec.form == "three-points":
                m = prior_mean
                return np.array([m[0], m[0] + m[1], m[0] + m[2]])
            return prior_mean.copy()

        if shared:
            xi[offset : offset + 3] = crude(range(self.n_strata))
        else:
            for r in range(self.n_strata):
                xi[offset + 3 * r : offset + 3 * r + 3] = crude([r])
        return xi


def assemble_model(
    grid: GridSpec,
    n_strata: int,
    pattern: SharingPattern | str,
    structure: CrossStrataStructure | str,
    baseline_spec: BaselineSpec | None = None,
    prior_config: PriorConfig | None = None,
) -> LatentModel:
    """Build the latent model for one (sharing pattern, structure) pair.

    Fully-shared patterns admit no correlation structure; bym2 requires a
    connected adjacency graph covering exactly the data's strata.
    """
    if isinstance(pattern, str):
        pattern = SharingPattern.from_name(pattern)
    if isinstance(structure, str):
        structure = CrossStrataStructure(kind=structure)
    if prior_config is None:
        prior_config = PriorConfig()
    if baseline_spec is None:
        baseline_spec = default_baseline_spec(grid, form="point-plus-two-slopes")
    if n_strata < 1:
        raise ValueError("need at least one stratum")
    if not pattern.varying and structure.kind != "independent":
        raise ValueError(
            f"pattern {pattern.name} has no strata-varying block and admits "
            "no correlation structure; fit it under the independent label"
        )
    scaled_qinv = None
    if structure.kind == "bym2":
        assert structure.graph is not None
        if structure.graph.n_strata != n_strata:
            raise ValueError(
                f"graph covers {structure.graph.n_strata} strata, data has {n_strata}"
            )
        scaled_qinv = scaled_generalized_inverse(icar_precision(structure.graph))
    if structure.kind != "independent" and pattern.varying and n_strata < 2:
        raise ValueError("correlation structures need at least 2 strata")

    parts = design_parts(grid, baseline_spec)
    lengths = {
        "baseline": 3,
        "age": grid.n_age - 2,
        "period": grid.n_period - 2,
        "cohort": grid.n_cohort - 2,
    }
    blocks: dict[str, tuple[int, int, bool]] = {}
    offset = 0
    for name in BLOCKS:
        shared = pattern.is_shared(name)
        blocks[name] = (offset, lengths[name], shared)
        offset += lengths[name] if shared else lengths[name] * n_strata
    free_dim = offset

    n_canon = grid.n_canonical
    col_index = np.zeros((n_strata, n_canon), dtype=int)
    col = 0
    for name in BLOCKS:
        b_off, length, shared = blocks[name]
        for r in range(n_strata):
            start = b_off if shared else b_off + r * length
            col_index[r, col : col + length] = np.arange(start, start + length)
        col += length

    tau_blocks = tuple(
        b for b in BLOCKS if b != "baseline" or not pattern.is_shared("baseline")
    )
    rho_blocks = pattern.varying if structure.kind != "independent" else ()
    prior_model = PriorModel(
        n_strata=n_strata,
        structure_kind=structure.kind,
        tau_blocks=tau_blocks,
        rho_blocks=tuple(rho_blocks),
        nu0_active=not pattern.is_shared("baseline"),
        rates={b: prior_config.rate(b) for b in tau_blocks},
        baseline_mean=prior_config.baseline_mean,
        exchangeable_variance=prior_config.exchangeable_variance,
        pc_prior=PCPriorBYM2(scaled_qinv) if scaled_qinv is not None else None,
    )
    return LatentModel(
        grid=grid,
        n_strata=n_strata,
        pattern=pattern,
        structure=structure,
        baseline_spec=baseline_spec,
        parts=parts,
        prior_config=prior_config,
        prior_model=prior_model,
        blocks=blocks,
        col_index=col_index,
        free_dim=free_dim,
        scaled_qinv=scaled_qinv,
    )


def poisson_loglik(
    xi: np.ndarray, model: LatentModel, data: MortalityDataset
) -> tuple[float, np.ndarray, np.ndarray]:
    """Poisson log likelihood with its gradient (w.r.t. the free latent
    vector) and the per-cell Fisher weights N exp(mu)."""
    lik = PoissonLikelihood(data)
    mu = model.logrates_flat(xi)
    ll, grad_mu, w = lik.value_grad_weights(mu)
    return ll, model.design_transpose_apply(grad_mu), w


@dataclass
class ModeResult:
    xi: np.ndarray
    hessian: np.ndarray
    chol: np.ndarray            # lower Cholesky factor of the Hessian
    objective: float            # loglik + latent log prior at the mode
    loglik: float
    prior_logpdf: float
    n_iter: int
    converged: bool

    @property
    def logdet_hessian(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))


def conditional_mode(
    model: LatentModel,
    eta: HyperParameters,
    data: MortalityDataset | None = None,
    likelihood=None,
    init: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
    max_halvings: int = 30,
) -> ModeResult:
    """Newton/IRLS maximization of loglik + latent log prior at fixed eta.

    Converges when the gradient max-norm drops below ``tol`` or the relative
    objective change drops below 1e-12; raises ModeError (with the last
    iterate attached) on non-convergence or a failed line search.
    """
    if likelihood is None:
        if data is None:
            raise ValueError("pass data or likelihood")
        likelihood = PoissonLikelihood(data)
    prior = model.latent_prior(eta)
    xi = model.default_init(likelihood) if init is None else np.array(init, dtype=float)

    def evaluate(x: np.ndarray):
        ll, grad_mu, w = likelihood.value_grad_weights(model.logrates_flat(x))
        if not np.isfinite(ll):
            return -np.inf, None, None
        return ll + prior.logpdf(x), grad_mu, w

    obj, grad_mu, w = evaluate(xi)
    if not np.isfinite(obj):
        raise ModeError("objective not finite at the initial point", last=xi)

    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        grad = model.design_transpose_apply(grad_mu) + prior.grad(xi)
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        hessian = model.weighted_gram(w) + prior.precision
        chol = _chol_with_jitter(hessian)
        if chol is None:
            raise ModeError("Hessian factorization failed", last=xi)
        delta = sla.cho_solve((chol, True), grad)
        step = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            cand = xi + step * delta
            cand_obj, cand_grad_mu, cand_w = evaluate(cand)
            if np.isfinite(cand_obj) and cand_obj >= obj - 1e-12 * (1.0 + abs(obj)):
                rel_change = abs(cand_obj - obj) / (1.0 + abs(obj))
                xi, grad_mu, w = cand, cand_grad_mu, cand_w
                obj = cand_obj
                accepted = True
                if rel_change < 1e-12:
                    converged = True
                break
            step *= 0.5
        if not accepted:
            raise ModeError(
                f"step halving failed after {max_halvings} halvings", last=xi
            )
        if converged:
            break
    if not converged:
        raise ModeError(f"no convergence in {max_iter} Newton iterations", last=xi)

    # refresh curvature at the accepted mode
    ll, grad_mu, w = likelihood.value_grad_weights(model.logrates_flat(xi))
    hessian = model.weighted_gram(w) + prior.precision
    chol = _chol_with_jitter(hessian)
    if chol is None:
        raise ModeError("Hessian factorization failed at the mode", last=xi)
    prior_val = prior.logpdf(xi)
    return ModeResult(
        xi=xi,
        hessian=hessian,
        chol=chol,
        objective=ll + prior_val,
        loglik=ll,
        prior_logpdf=prior_val,
        n_iter=n_iter,
        converged=True,
    )


def _chol_with_jitter(h: np.ndarray, attempts: int = 4) -> np.ndarray | None:
    try:
        return sla.cholesky(h, lower=True, check_finite=False)
    except sla.LinAlgError:
        pass
    scale = float(np.mean(np.diag(h)))
    diag = np.diag_indices(h.shape[0])
    for k in range(1, attempts):
        bumped = h.copy()
        bumped[diag] += scale * 10.0 ** (-12 + 3 * (k - 1))
        try:
            return sla.cholesky(bumped, lower=True, check_finite=False)
        except sla.LinAlgError:
            continue
    return None


def laplace_log_marginal(
    model: LatentModel,
    eta: HyperParameters,
    data: MortalityDataset | None = None,
    likelihood=None,
    init: np.ndarray | None = None,
) -> float:
    """Laplace approximation of the log joint of data and hyperparameters:
    loglik + latent prior at the mode - 1/2 logdet(H) + (dim/2) log 2pi,
    plus the hyperprior log density."""
    value, _ = _laplace_with_mode(model, eta, data=data, likelihood=likelihood, init=init)
    return value


def _laplace_with_mode(
    model: LatentModel,
    eta: HyperParameters,
    data: MortalityDataset | None = None,
    likelihood=None,
    init: np.ndarray | None = None,
) -> tuple[float, ModeResult]:
    mode = conditional_mode(model, eta, data=data, likelihood=likelihood, init=init)
    value = (
        mode.objective
        - 0.5 * mode.logdet_hessian
        + 0.5 * model.free_dim * np.log(2.0 * np.pi)
        + model.prior_model.logpdf(eta)
    )
    return float(value), mode


@dataclass
class OptimizationResult:
    eta_hat: HyperParameters
    objective: float
    n_evaluations: int
    converged: bool
    mode: ModeResult


def optimize_hyperparameters(
    model: LatentModel,
    data: MortalityDataset | None = None,
    likelihood=None,
    init: HyperParameters | None = None,
    budget: int = 2000,
    rel_tol: float = 1e-6,
) -> OptimizationResult:
    """Maximize the Laplace objective over transformed hyperparameters
    (log precisions, transformed correlations, raw baseline means) with a
    derivative-free simplex search.  Deterministic given the initial point;
    exhausting the budget returns the best point with a warning flag."""
    if likelihood is None:
        if data is None:
            raise ValueError("pass data or likelihood")
        likelihood = PoissonLikelihood(data)
    x0 = model.eta_to_vector(init if init is not None else model.default_eta())
    state: dict = {"best": None, "best_val": -np.inf, "warm": None, "n": 0}
    big = 1e30

    def negobj(x: np.ndarray) -> float:
        state["n"] += 1
        try:
            eta = model.eta_from_vector(x)
            val, mode = _laplace_with_mode(
                model, eta, likelihood=likelihood, init=state["warm"]
            )
        except (ModeError, ValueError, sla.LinAlgError, np.linalg.LinAlgError):
            return big
        if not np.isfinite(val):
            return big
        state["warm"] = mode.xi
        if val > state["best_val"]:
            state["best_val"] = val
            state["best"] = (x.copy(), mode)
        return -val

    f0 = negobj(x0)
    if f0 >= big:
        raise ModeError("Laplace objective is not finite at the initial point")
    n = x0.shape[0]
    simplex = np.vstack([x0] + [x0 + 0.5 * np.eye(n)[i] for i in range(n)])
    res = minimize(
        negobj,
        x0,
        method="Nelder-Mead",
        options={
            "maxfev": budget,
            "fatol": rel_tol * (1.0 + abs(f0)),
            "xatol": 1e-3,
            "initial_simplex": simplex,
        },
    )
    converged = bool(res.success)
    if not converged:
        warnings.warn(
            f"hyperparameter search stopped after {state['n']} evaluations "
            "without meeting the tolerance; returning the best point",
            RuntimeWarning,
        )
    best_x, best_mode = state["best"]
    return OptimizationResult(
        eta_hat=model.eta_from_vector(best_x),
        objective=float(state["best_val"]),
        n_evaluations=int(state["n"]),
        converged=converged,
        mode=best_mode,
    )


@dataclass
class PosteriorFit:
    """Empirical-Bayes posterior: hyperparameters at the optimum, the
    Gaussian approximation of the latent field, and posterior draws."""

    model: LatentModel
    eta_hat: HyperParameters
    latent_mean: np.ndarray
    latent_chol: np.ndarray
    samples: np.ndarray           # (n, free_dim)
    lograte_samples: np.ndarray   # (n, R * cells)
    log_marginal: float
    seed: int
    converged: bool = True
    eta_grid: tuple | None = None

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    def lograte_cube(self) -> np.ndarray:
        """(n, R, A, T) view of the log-rate samples."""
        n = self.samples.shape[0]
        g = self.model.grid
        return self.lograte_samples.reshape(
            n, self.model.n_strata, g.n_period, g.n_age
        ).transpose(0, 1, 3, 2)


def sample_posterior(
    model: LatentModel,
    eta_hat: HyperParameters,
    data: MortalityDataset | None = None,
    n: int = 1000,
    seed: int = 0,
    likelihood=None,
    mode: ModeResult | None = None,
    log_marginal: float | None = None,
    eta_grid: bool = False,
    grid_delta: float = 0.5,
) -> PosteriorFit:
    """Draw latent samples from the Gaussian approximation N(mode, H^-1) at
    the plugged-in hyperparameters and map them to log rates.

    With ``eta_grid`` enabled, an axial grid of hyperparameter points around
    the optimum is weighted by the Laplace objective and the draw becomes a
    mixture over those points.
    """
    if likelihood is None:
        if data is None:
            raise ValueError("pass data or likelihood")
        likelihood = PoissonLikelihood(data)
    if mode is None:
        mode = conditional_mode(model, eta_hat, likelihood=likelihood)
    if log_marginal is None:
        log_marginal = (
            mode.objective
            - 0.5 * mode.logdet_hessian
            + 0.5 * model.free_dim * np.log(2.0 * np.pi)
            + model.prior_model.logpdf(eta_hat)
        )
    rng = np.random.default_rng(seed)

    grid_info = None
    if not eta_grid:
        samples = _gaussian_draws(mode, n, rng)
    else:
        x_hat = model.eta_to_vector(eta_hat)
        points = [(x_hat, float(log_marginal), mode)]
        for i in range(x_hat.shape[0]):
            for sgn in (-1.0, 1.0):
                x = x_hat.copy()
                x[i] += sgn * grid_delta
                try:
                    val, m = _laplace_with_mode(
                        model, model.eta_from_vector(x), likelihood=likelihood, init=mode.xi
                    )
                    points.append((x, val, m))
                except (ModeError, ValueError, sla.LinAlgError):
                    continue
        vals = np.array([p[1] for p in points])
        weights = np.exp(vals - vals.max())
        weights /= weights.sum()
        counts = rng.multinomial(n, weights)
        chunks = [
            _gaussian_draws(p[2], int(c), rng) for p, c in zip(points, counts) if c > 0
        ]
        samples = np.concatenate(chunks, axis=0)
        grid_info = tuple(
            (model.eta_from_vector(p[0]), float(w)) for p, w in zip(points, weights)
        )

    return PosteriorFit(
        model=model,
        eta_hat=eta_hat,
        latent_mean=mode.xi,
        latent_chol=mode.chol,
        samples=samples,
        lograte_samples=model.logrates_samples(samples),
        log_marginal=float(log_marginal),
        seed=seed,
        eta_grid=grid_info,
    )


def _gaussian_draws(mode: ModeResult, n: int, rng: np.random.Generator) -> np.ndarray:
    if n == 0:
        return np.empty((0, mode.xi.shape[0]))
    z = rng.standard_normal((mode.xi.shape[0], n))
    delta = sla.solve_triangular(mode.chol, z, lower=True, trans="T")
    return (mode.xi[:, None] + delta).T


def fit_model(
    model: LatentModel,
    data: MortalityDataset,
    n_samples: int = 1000,
    seed: int = 0,
    init: HyperParameters | None = None,
    budget: int = 2000,
    rel_tol: float = 1e-6,
    eta_grid: bool = False,
) -> PosteriorFit:
    """Optimize hyperparameters, then sample the posterior; the one-call
    entry point used by the model grid and the CLI."""
    likelihood = PoissonLikelihood(data)
    opt = optimize_hyperparameters(
        model, likelihood=likelihood, init=init, budget=budget, rel_tol=rel_tol
    )
    fit = sample_posterior(
        model,
        opt.eta_hat,
        likelihood=likelihood,
        n=n_samples,
        seed=seed,
        mode=opt.mode,
        log_marginal=opt.objective,
        eta_grid=eta_grid,
    )
    fit.converged = opt.converged
    return fit
