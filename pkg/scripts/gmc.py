#!/usr/bin/env python3
"""
Gaussian Mixture Compressor: per-domain, per-level feature compression.

Fits a K-component Gaussian mixture to one domain's features at one level by
expectation-maximization, scores fitted models (log-likelihood, BIC), selects
K by BIC, and provides the two lighter compressors used for comparison
(per-dimension mean & std, PCA). Every model reports its stored parameter
count for the memory tables.

EM outline (one restart):
1. Initialize means (k-means++ or random rows), uniform weights, global
   covariance.
2. E-step: responsibilities r_ik proportional to w_k N(x_i | mu_k, S_k),
   computed in log space.
3. M-step: weighted MLE of w, mu, S with variance flooring. A component whose
   responsibility mass falls below 1e-8 * n is reseeded at the lowest-density
   row with the global diagonal covariance.
4. Stop after max_iter rounds or when the relative log-likelihood gain drops
   below rel_tol. The best restart by final log-likelihood wins; ties go to
   the lower restart index.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import singledispatch
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from clustering import kmeans_plusplus_init
from soyo_core import (
    BadComponentCountError,
    BadWeightsError,
    ConfigError,
    DimMismatchError,
    EmptyInputError,
    FeatureMatrix,
    InsufficientSamplesError,
    InvalidModelError,
    NonFiniteError,
    RngStream,
    SingularCovarianceError,
    check_prob_vector,
    get_logger,
    log_sum_exp,
)

logger = get_logger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)
EMPTY_COMPONENT_FRACTION = 1e-8


class CovKind(str, Enum):
    DIAGONAL = "diagonal"
    FULL = "full"


class InitKind(str, Enum):
    KMEANS_PLUS_PLUS = "kmeans++"
    RANDOM_POINTS = "random"


class CompressorKind(str, Enum):
    GMM = "gmm"
    MEANSTD = "meanstd"
    PCA = "pca"


# ============================================================================
# Models and configuration
# ============================================================================

@dataclass(frozen=True)
class EmConfig:
    """EM settings. Defaults: 200 rounds, 1e-6 relative tolerance, 3 restarts."""
    max_iter: int = 200
    rel_tol: float = 1e-6
    var_floor: float = 1e-6
    n_restarts: int = 3
    init: InitKind = InitKind.KMEANS_PLUS_PLUS
    cov_kind: CovKind = CovKind.DIAGONAL
    seed: RngStream = field(default_factory=lambda: RngStream(0))

    def __post_init__(self) -> None:
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if not self.rel_tol > 0:
            raise ConfigError("rel_tol must be > 0")
        if not self.var_floor > 0:
            raise ConfigError("var_floor must be > 0")
        if self.n_restarts < 1:
            raise ConfigError("n_restarts must be >= 1")
        object.__setattr__(self, "init", InitKind(self.init))
        object.__setattr__(self, "cov_kind", CovKind(self.cov_kind))


@dataclass(frozen=True, eq=False)
class GmmModel:
    """Mixture parameters: weights (K,), means (K, d), covariances (K, d) or (K, d, d)."""
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    cov_kind: CovKind = CovKind.DIAGONAL

    def __post_init__(self) -> None:
        kind = CovKind(self.cov_kind)
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        means = np.array(self.means, dtype=np.float64)
        covs = np.array(self.covariances, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] != weights.shape[0] or means.shape[1] < 1:
            raise DimMismatchError(f"means shape {means.shape} does not fit {weights.shape[0]} components")
        k, d = means.shape
        expected = (k, d) if kind is CovKind.DIAGONAL else (k, d, d)
        if covs.shape != expected:
            raise DimMismatchError(f"{kind.value} covariances need shape {expected}, got {covs.shape}")
        check_prob_vector(weights)
        if np.any(weights <= 0.0):
            raise BadWeightsError("mixture weights must be in (0, 1]")
        for name, arr in (("means", means), ("covariances", covs)):
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"GMM {name} must be finite")
        if kind is CovKind.DIAGONAL and np.any(covs <= 0.0):
            raise SingularCovarianceError("diagonal variances must be positive")
        for arr in (weights, means, covs):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "cov_kind", kind)

    @property
    def k(self) -> int:
        return int(self.means.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    def mixture_mean(self) -> np.ndarray:
        return self.weights @ self.means


@dataclass(frozen=True, eq=False)
class MeanStdModel:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        std = np.array(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape or mean.size == 0:
            raise DimMismatchError(f"mean {mean.shape} and std {std.shape} must match")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise NonFiniteError("mean/std must be finite")
        if np.any(std < 0.0):
            raise InvalidModelError("std entries must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])


@dataclass(frozen=True, eq=False)
class PcaModel:
    """Top principal axes (rows of `components`) with the data variance along each."""
    mean: np.ndarray
    components: np.ndarray
    component_variances: np.ndarray

    def __post_init__(self) -> None:
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        comps = np.array(self.components, dtype=np.float64)
        var = np.array(self.component_variances, dtype=np.float64).reshape(-1)
        if comps.ndim != 2 or comps.shape[1] != mean.shape[0] or comps.shape[0] != var.shape[0]:
            raise DimMismatchError(f"components {comps.shape} do not fit mean {mean.shape} / variances {var.shape}")
        if comps.shape[0] < 1:
            raise BadComponentCountError("PCA model needs at least one component")
        if not all(np.all(np.isfinite(a)) for a in (mean, comps, var)):
            raise NonFiniteError("PCA parameters must be finite")
        if np.any(var < 0.0):
            raise InvalidModelError("component variances must be non-negative")
        gram = comps @ comps.T
        if not np.allclose(gram, np.eye(comps.shape[0]), atol=1e-6):
            raise InvalidModelError("PCA components must be orthonormal")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "component_variances", var)

    @property
    def n_components(self) -> int:
        return int(self.components.shape[0])

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])


CompressedModel = Union[GmmModel, MeanStdModel, PcaModel]


# ============================================================================
# Densities
# ============================================================================

def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(cov, lower=True)
    except (linalg.LinAlgError, ValueError) as e:
        raise SingularCovarianceError(f"covariance is not positive definite: {e}") from e


def _log_gaussian_rows(X: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """ln N(x | mean, cov) for every row; cov is a variance vector or a full matrix."""
    d = mean.shape[0]
    diff = X - mean
    if cov.ndim == 1:
        if np.any(cov <= 0.0):
            raise SingularCovarianceError("diagonal variances must be positive")
        return -0.5 * (d * _LOG_2PI + np.sum(np.log(cov)) + np.sum(diff * diff / cov, axis=1))
    chol = _cholesky(cov)
    z = linalg.solve_triangular(chol, diff.T, lower=True)
    return -0.5 * d * _LOG_2PI - np.sum(np.log(np.diag(chol))) - 0.5 * np.sum(z * z, axis=0)


def gaussian_logpdf(x: Sequence[float], mean: Sequence[float], cov: np.ndarray) -> float:
    """ln N(x | mean, cov). `cov` holds d variances (diagonal) or a d x d matrix."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    cov = np.asarray(cov, dtype=np.float64)
    if x.shape != mean.shape or cov.shape[0] != mean.shape[0] or cov.ndim not in (1, 2):
        raise DimMismatchError(f"x {x.shape}, mean {mean.shape}, cov {cov.shape} disagree")
    if cov.ndim == 2 and cov.shape[1] != cov.shape[0]:
        raise DimMismatchError(f"full covariance must be square, got {cov.shape}")
    return float(_log_gaussian_rows(x[None, :], mean, cov)[0])


def _log_prob_matrix(X: np.ndarray, weights: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """n x K matrix of ln w_k + ln N(x_i | mu_k, S_k)."""
    cols = [np.log(weights[k]) + _log_gaussian_rows(X, means[k], covs[k]) for k in range(weights.shape[0])]
    return np.stack(cols, axis=1)


def mixture_logpdf_rows(X: FeatureMatrix, model: GmmModel) -> np.ndarray:
    if X.dim != model.dim:
        raise DimMismatchError(f"features have dim {X.dim}, model has {model.dim}")
    if X.n_rows == 0:
        return np.zeros(0)
    return logsumexp(_log_prob_matrix(X.data, model.weights, model.means, model.covariances), axis=1)


def mixture_logpdf(x: Sequence[float], model: GmmModel) -> float:
    """ln sum_k w_k N(x | mu_k, S_k)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != model.dim:
        raise DimMismatchError(f"x has dim {x.shape[0]}, model has {model.dim}")
    terms = [
        math.log(model.weights[k]) + float(_log_gaussian_rows(x[None, :], model.means[k], model.covariances[k])[0])
        for k in range(model.k)
    ]
    return log_sum_exp(terms)


# ============================================================================
# EM
# ============================================================================

def _regularize_full(cov: np.ndarray, var_floor: float) -> np.ndarray:
    """Symmetrize; add var_floor * I (growing x10) only while Cholesky fails."""
    cov = 0.5 * (cov + cov.T)
    eye = np.eye(cov.shape[0])
    jitter = 0.0
    for _ in range(12):
        candidate = cov + jitter * eye
        try:
            linalg.cholesky(candidate, lower=True)
            return candidate
        except linalg.LinAlgError:
            jitter = var_floor if jitter == 0.0 else jitter * 10.0
    raise SingularCovarianceError("covariance stays singular after flooring")


def _global_covariance(X: np.ndarray, cfg: EmConfig) -> np.ndarray:
    var = np.maximum(X.var(axis=0), cfg.var_floor)
    if cfg.cov_kind is CovKind.DIAGONAL:
        return var
    diff = X - X.mean(axis=0)
    return _regularize_full(diff.T @ diff / X.shape[0], cfg.var_floor)


def _global_diagonal(X: np.ndarray, cfg: EmConfig) -> np.ndarray:
    var = np.maximum(X.var(axis=0), cfg.var_floor)
    return var if cfg.cov_kind is CovKind.DIAGONAL else np.diag(var)


@dataclass
class _EmRun:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    trace: list[float]
    rescues: int = 0


def _e_step(X, weights, means, covs):
    log_prob = _log_prob_matrix(X, weights, means, covs)
    log_norm = logsumexp(log_prob, axis=1)
    resp = np.exp(log_prob - log_norm[:, None])
    return resp, log_norm


def _m_step(X, resp, log_norm, cfg: EmConfig):
    n = X.shape[0]
    k = resp.shape[1]
    nk = resp.sum(axis=0)
    dead = nk < EMPTY_COMPONENT_FRACTION * n
    safe_nk = np.where(dead, 1.0, nk)
    means = (resp.T @ X) / safe_nk[:, None]
    covs = []
    for j in range(k):
        diff = X - means[j]
        if cfg.cov_kind is CovKind.DIAGONAL:
            covs.append(np.maximum((resp[:, j] @ (diff * diff)) / safe_nk[j], cfg.var_floor))
        else:
            cov = (resp[:, j, None] * diff).T @ diff / safe_nk[j]
            covs.append(_regularize_full(cov, cfg.var_floor))
    covs = np.stack(covs)
    weights = nk / n
    if np.any(dead):
        order = np.argsort(log_norm, kind="stable")
        global_cov = _global_diagonal(X, cfg)
        for slot, j in enumerate(np.flatnonzero(dead)):
            row = order[slot % n]
            means[j] = X[row]
            covs[j] = global_cov
            weights[j] = 1.0 / n
            logger.warning("EM component %d emptied; reseeded at row %d", j, row)
        weights = weights / weights.sum()
    return weights, means, covs, int(dead.sum())


def _initial_means(X: np.ndarray, k: int, cfg: EmConfig, rng: RngStream) -> np.ndarray:
    if cfg.init is InitKind.KMEANS_PLUS_PLUS:
        return kmeans_plusplus_init(X, k, rng.child("init"))
    rows = rng.child("init").generator().choice(X.shape[0], size=k, replace=False)
    return X[np.sort(rows)].copy()


def _em_single(
    X: np.ndarray,
    k: int,
    cfg: EmConfig,
    rng: RngStream,
    on_estep: Optional[Callable[[np.ndarray], None]],
) -> _EmRun:
    means = _initial_means(X, k, cfg, rng)
    weights = np.full(k, 1.0 / k)
    covs = np.stack([_global_covariance(X, cfg)] * k)
    resp, log_norm = _e_step(X, weights, means, covs)
    if on_estep is not None:
        on_estep(resp)
    trace = [float(log_norm.sum())]
    rescues = 0
    for _ in range(cfg.max_iter):
        weights, means, covs, dead = _m_step(X, resp, log_norm, cfg)
        rescues += dead
        resp, log_norm = _e_step(X, weights, means, covs)
        if on_estep is not None:
            on_estep(resp)
        ll_prev = trace[-1]
        trace.append(float(log_norm.sum()))
        if trace[-1] - ll_prev < cfg.rel_tol * abs(ll_prev):
            break
    return _EmRun(weights=weights, means=means, covs=covs, trace=trace, rescues=rescues)


def fit_gmm(
    X: FeatureMatrix,
    K: int,
    cfg: EmConfig = EmConfig(),
    on_estep: Optional[Callable[[np.ndarray], None]] = None,
    n_jobs: int = 1,
) -> tuple[GmmModel, list[float]]:
    """Fit a K-component mixture by EM; return the model and the winning ll trace.

    `on_estep` receives each responsibility matrix (n x K). Restarts run on
    `n_jobs` threads; each owns the sub-stream cfg.seed.child("em-restart", r).
    """
    if K < 1:
        raise BadComponentCountError(f"K must be >= 1, got {K}")
    if X.n_rows < K:
        raise InsufficientSamplesError(f"{X.n_rows} rows cannot support K={K}")
    data = X.data
    streams = [cfg.seed.child("em-restart", r) for r in range(cfg.n_restarts)]
    if n_jobs > 1 and cfg.n_restarts > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            runs = list(pool.map(lambda s: _em_single(data, K, cfg, s, on_estep), streams))
    else:
        runs = [_em_single(data, K, cfg, s, on_estep) for s in streams]

    best = runs[0]
    for run in runs[1:]:
        if run.trace[-1] > best.trace[-1]:
            best = run
    logger.debug(
        "fit_gmm K=%d n=%d d=%d: ll=%.6f after %d rounds (%d rescues)",
        K, X.n_rows, X.dim, best.trace[-1], len(best.trace) - 1, best.rescues,
    )
    model = GmmModel(best.weights, best.means, best.covs, cfg.cov_kind)
    return model, best.trace


# ============================================================================
# Model selection
# ============================================================================

def bic_score(log_likelihood: float, n_params: int, n_samples: int) -> float:
    """p * ln(n) - 2 * L. Lower is better."""
    return n_params * math.log(n_samples) - 2.0 * log_likelihood


def bic(model: GmmModel, X: FeatureMatrix) -> float:
    if X.n_rows == 0:
        raise EmptyInputError("BIC needs at least one row")
    ll = float(mixture_logpdf_rows(X, model).sum())
    return bic_score(ll, param_count(model), X.n_rows)


@dataclass(frozen=True)
class KScore:
    k: int
    bic: float
    model: GmmModel


def sweep_k(X: FeatureMatrix, k_range: Sequence[int], cfg: EmConfig = EmConfig(), n_jobs: int = 1) -> list[KScore]:
    """Fit every candidate K (ascending, duplicates dropped) and score it."""
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise EmptyInputError("k_range is empty")
    scores = []
    for k in ks:
        model, _ = fit_gmm(X, k, cfg, n_jobs=n_jobs)
        scores.append(KScore(k=k, bic=bic(model, X), model=model))
        logger.debug("BIC K=%d: %.4f", k, scores[-1].bic)
    return scores


def _best_score(scores: Sequence[KScore]) -> KScore:
    best = scores[0]
    for s in scores[1:]:
        if s.bic < best.bic:
            best = s
    return best


def select_k(
    X: FeatureMatrix, k_range: Sequence[int], cfg: EmConfig = EmConfig(), n_jobs: int = 1
) -> tuple[int, list[tuple[int, float]]]:
    """argmin-BIC K over k_range (e.g. range(1, 11)); ties go to the smaller K."""
    scores = sweep_k(X, k_range, cfg, n_jobs=n_jobs)
    return _best_score(scores).k, [(s.k, s.bic) for s in scores]


# ============================================================================
# Alternative compressors
# ============================================================================

def fit_meanstd(X: FeatureMatrix) -> MeanStdModel:
    """Per-dimension mean and population standard deviation."""
    if X.n_rows == 0:
        raise EmptyInputError("mean/std needs at least one row")
    return MeanStdModel(mean=X.data.mean(axis=0), std=X.data.std(axis=0))


def _sign_normalize(axes: np.ndarray) -> np.ndarray:
    """Flip each row so its first clearly nonzero coordinate is positive."""
    out = axes.copy()
    for i, row in enumerate(out):
        scale = np.max(np.abs(row))
        nz = np.flatnonzero(np.abs(row) > 1e-12 * max(scale, 1.0))
        if nz.size and row[nz[0]] < 0:
            out[i] = -row
    return out


def fit_pca(X: FeatureMatrix, N: int) -> PcaModel:
    """Top-N principal axes of centered X with per-axis (population) variances."""
    if not 1 <= N <= min(X.n_rows, X.dim):
        raise BadComponentCountError(f"N={N} outside 1..{min(X.n_rows, X.dim)}")
    mean = X.data.mean(axis=0)
    diff = X.data - mean
    cov = diff.T @ diff / X.n_rows
    eigvals, eigvecs = linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(eigvals, kind="stable")[::-1][:N]
    variances = np.clip(eigvals[order], 0.0, None)
    axes = _sign_normalize(eigvecs[:, order].T)
    return PcaModel(mean=mean, components=axes, component_variances=variances)


# ============================================================================
# Parameter accounting
# ============================================================================

@singledispatch
def param_count(model) -> int:
    """Number of stored real parameters (memory accounting)."""
    raise TypeError(f"no parameter count for {type(model).__name__}")


@param_count.register
def _(model: GmmModel) -> int:
    k, d = model.k, model.dim
    cov = k * d if model.cov_kind is CovKind.DIAGONAL else k * d * (d + 1) // 2
    return (k - 1) + k * d + cov


@param_count.register
def _(model: MeanStdModel) -> int:
    return 2 * model.dim


@param_count.register
def _(model: PcaModel) -> int:
    return model.dim + model.n_components * model.dim + model.n_components


def gmm_param_formula(k: int, d: int, cov_kind: CovKind) -> int:
    """Closed-form count without a fitted model (used by reports and checks)."""
    cov = k * d if CovKind(cov_kind) is CovKind.DIAGONAL else k * d * (d + 1) // 2
    return (k - 1) + k * d + cov


# ============================================================================
# Compressor dispatch
# ============================================================================

@dataclass(frozen=True)
class CompressorConfig:
    kind: CompressorKind = CompressorKind.GMM
    k: int = 2
    n_components: int = 10
    auto_k: bool = False
    k_min: int = 1
    k_max: int = 10
    em: EmConfig = field(default_factory=EmConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", CompressorKind(self.kind))
        if self.k < 1 or self.n_components < 1:
            raise BadComponentCountError("k and n_components must be >= 1")
        if not 1 <= self.k_min <= self.k_max:
            raise BadComponentCountError("need 1 <= k_min <= k_max")

    @property
    def label(self) -> str:
        if self.kind is CompressorKind.GMM:
            return "GMC(auto K)" if self.auto_k else f"GMC(K={self.k})"
        if self.kind is CompressorKind.PCA:
            return f"PCA(N={self.n_components})"
        return "Mean&std"


def compress(X: FeatureMatrix, cfg: CompressorConfig, rng: RngStream, n_jobs: int = 1) -> CompressedModel:
    """Compress one feature matrix with the configured compressor."""
    if cfg.kind is CompressorKind.MEANSTD:
        return fit_meanstd(X)
    if cfg.kind is CompressorKind.PCA:
        return fit_pca(X, min(cfg.n_components, X.n_rows, X.dim))
    em = replace(cfg.em, seed=rng)
    if cfg.auto_k:
        hi = min(cfg.k_max, X.n_rows)
        scores = sweep_k(X, range(cfg.k_min, hi + 1), em, n_jobs=n_jobs)
        best = _best_score(scores)
        logger.info("BIC selected K=%d for %d x %d features", best.k, X.n_rows, X.dim)
        return best.model
    model, _ = fit_gmm(X, cfg.k, em, n_jobs=n_jobs)
    return model
