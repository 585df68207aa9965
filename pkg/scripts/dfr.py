#!/usr/bin/env python3
"""
Domain Feature Resampler and the per-domain compressed store.

Prior domains survive only as compressed models (GMM, mean/std or PCA) per
level. At each training session the resampler draws N_t pseudo-features per
prior domain and level (N_t = size of the current domain by default), joins
them with the current domain's real features and shuffles, so every domain
label occurs exactly N_t times in the training batch.

Sampling is a pure function of (model, n, rng):
- component indices: inverse-CDF lookup of uniform draws against the
  cumulative weights (sub-stream "components");
- Gaussian noise: RngStream standard normals (sub-stream "normals"),
  transformed by the Cholesky factor (full) or per-dimension std (diagonal).

The two levels of one pseudo-sample are drawn independently; any
cross-level correlation of the original features is not reproduced.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import singledispatch
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import linalg

from gmc import CompressedModel, CovKind, GmmModel, MeanStdModel, PcaModel, param_count
from soyo_core import (
    ConfigError,
    FeatureMatrix,
    IncompleteStoreError,
    LabeledBatch,
    LengthMismatchError,
    LevelId,
    RngStream,
    SingularCovarianceError,
    check_prob_vector,
    get_logger,
    standard_normal,
)

logger = get_logger(__name__)


@dataclass(frozen=True)
class PseudoFeatureSet:
    domain: int
    level: LevelId
    features: FeatureMatrix


# ============================================================================
# Compressed store
# ============================================================================

@dataclass(frozen=True)
class DomainRecord:
    """Everything kept about one past domain: its size and one model per level."""
    domain: int
    n_samples: int
    models: Mapping[LevelId, CompressedModel]


@dataclass
class DomainStore:
    """Ordered compressed records, one per domain seen so far."""
    levels: tuple[LevelId, ...]
    records: list[DomainRecord] = field(default_factory=list)

    def append(self, models: Mapping[LevelId, CompressedModel], n_samples: int) -> DomainRecord:
        missing = [lvl for lvl in self.levels if lvl not in models]
        if missing:
            raise IncompleteStoreError(f"domain {len(self.records)} lacks levels {[str(m) for m in missing]}")
        record = DomainRecord(domain=len(self.records), n_samples=int(n_samples), models=dict(models))
        self.records.append(record)
        return record

    def models(self) -> list[Mapping[LevelId, CompressedModel]]:
        return [r.models for r in self.records]

    def memory_params(self) -> int:
        return sum(param_count(m) for r in self.records for m in r.models.values())

    def __len__(self) -> int:
        return len(self.records)


# ============================================================================
# Samplers
# ============================================================================

def sample_components(weights: Sequence[float], n: int, rng: RngStream) -> np.ndarray:
    """n i.i.d. categorical draws from `weights`."""
    w = check_prob_vector(weights)
    if n < 0:
        raise ConfigError("n must be non-negative")
    u = rng.generator().random(n)
    idx = np.searchsorted(np.cumsum(w), u, side="right")
    return np.minimum(idx, w.shape[0] - 1).astype(np.int64)


def _component_factor(model: GmmModel, k: int) -> np.ndarray:
    cov = model.covariances[k]
    if model.cov_kind is CovKind.DIAGONAL:
        return np.sqrt(cov)
    try:
        return linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError as e:
        raise SingularCovarianceError(f"component {k} covariance is not positive definite") from e


def sample_gmm(model: GmmModel, n: int, rng: RngStream) -> FeatureMatrix:
    """x_i = mu_{k_i} + A_{k_i} z_i with k_i ~ Cat(weights), z_i ~ N(0, I)."""
    d = model.dim
    if n == 0:
        return FeatureMatrix.empty(d)
    comps = sample_components(model.weights, n, rng.child("components"))
    z = standard_normal(rng.child("normals"), n * d).reshape(n, d)
    out = np.empty((n, d))
    for k in range(model.k):
        rows = comps == k
        if not np.any(rows):
            continue
        factor = _component_factor(model, k)
        if model.cov_kind is CovKind.DIAGONAL:
            out[rows] = model.means[k] + z[rows] * factor
        else:
            out[rows] = model.means[k] + z[rows] @ factor.T
    return FeatureMatrix(out)


def sample_meanstd(model: MeanStdModel, n: int, rng: RngStream) -> FeatureMatrix:
    if n == 0:
        return FeatureMatrix.empty(model.dim)
    z = standard_normal(rng.child("normals"), n * model.dim).reshape(n, model.dim)
    return FeatureMatrix(model.mean + z * model.std)


def sample_pca(model: PcaModel, n: int, rng: RngStream) -> FeatureMatrix:
    """mean + sum_j sqrt(var_j) z_j axis_j."""
    if n == 0:
        return FeatureMatrix.empty(model.dim)
    z = standard_normal(rng.child("normals"), n * model.n_components).reshape(n, model.n_components)
    return FeatureMatrix(model.mean + (z * np.sqrt(model.component_variances)) @ model.components)


@singledispatch
def sample_model(model, n: int, rng: RngStream) -> FeatureMatrix:
    raise TypeError(f"cannot resample from {type(model).__name__}")


sample_model.register(GmmModel, sample_gmm)
sample_model.register(MeanStdModel, sample_meanstd)
sample_model.register(PcaModel, sample_pca)


# ============================================================================
# Training batches
# ============================================================================

def resample_domain(
    models: Mapping[LevelId, CompressedModel],
    domain: int,
    n: int,
    rng: RngStream,
    levels: Sequence[LevelId],
) -> list[PseudoFeatureSet]:
    out = []
    for lvl in levels:
        if lvl not in models:
            raise IncompleteStoreError(f"no stored model for domain {domain}, level '{lvl}'")
        feats = sample_model(models[lvl], n, rng.child("pseudo", domain, lvl.tag))
        out.append(PseudoFeatureSet(domain=domain, level=lvl, features=feats))
    return out


def build_balanced_batch(
    stores: Sequence[Mapping[LevelId, CompressedModel]],
    current: Mapping[LevelId, FeatureMatrix],
    n_current: int,
    rng: RngStream,
    n_pseudo: Optional[int] = None,
) -> LabeledBatch:
    """Pseudo-features for domains 0..t-2 plus real features for domain t-1, shuffled.

    Each prior domain contributes n_pseudo rows per level (default n_current),
    so with the default every label occurs exactly N_t times.
    """
    levels = tuple(current)
    for lvl, fm in current.items():
        if fm.n_rows != n_current:
            raise LengthMismatchError(f"level '{lvl}' has {fm.n_rows} rows, expected {n_current}")
    n_prior = n_current if n_pseudo is None else int(n_pseudo)
    t = len(stores) + 1

    parts: dict[LevelId, list[FeatureMatrix]] = {lvl: [] for lvl in levels}
    labels = []
    for tau, models in enumerate(stores):
        for pseudo in resample_domain(models, tau, n_prior, rng, levels):
            parts[pseudo.level].append(pseudo.features)
        labels.append(np.full(n_prior, tau, dtype=np.int64))
    for lvl in levels:
        parts[lvl].append(current[lvl])
    labels.append(np.full(n_current, t - 1, dtype=np.int64))

    batch = LabeledBatch({lvl: FeatureMatrix.concat(parts[lvl]) for lvl in levels}, np.concatenate(labels))
    if t == 1:
        return batch
    order = rng.child("shuffle").generator().permutation(batch.n_rows)
    logger.debug("balanced batch: t=%d, %d rows per level", t, batch.n_rows)
    return batch.take(order)


def build_current_batch(current: Mapping[LevelId, FeatureMatrix], domain: int, rng: RngStream) -> LabeledBatch:
    """Current-domain rows only (rehearsal switched off)."""
    n = next(iter(current.values())).n_rows
    batch = LabeledBatch(dict(current), np.full(n, domain, dtype=np.int64))
    return batch.take(rng.child("shuffle").generator().permutation(n))
