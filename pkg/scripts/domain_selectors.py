#!/usr/bin/env python3
"""
Domain selectors: pick the parameter set (domain id) for each test sample.

Training-free baselines work on final-level features only:
- NMC: nearest per-domain centroid.
- KMeans+KNN: M k-means centers per domain, 1-NN over all centers.

SoyoSelector is the trainable one: compress each finished domain per level,
resample prior domains into a balanced batch, retrain the fusion network.

All three share one incremental interface (learn_domain / predict) so the
harness can run them side by side. Distances are squared Euclidean; ties go
to the lowest domain index (then lowest center index).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np

from clustering import lloyd_kmeans, squared_distances
from dfr import DomainStore, build_balanced_batch, build_current_batch
from gmc import CompressorConfig, compress
from mdfn import MdfnParams, TrainConfig, predict_batch, train
from soyo_core import (
    LAST,
    DimMismatchError,
    EmptyInputError,
    FeatureMatrix,
    InsufficientSamplesError,
    LevelId,
    RngStream,
    get_logger,
)

logger = get_logger(__name__)

DEFAULT_CENTERS = 5


# ============================================================================
# Nearest mean classifier
# ============================================================================

@dataclass(frozen=True, eq=False)
class NmcModel:
    centroids: np.ndarray  # T x d

    @property
    def n_domains(self) -> int:
        return int(self.centroids.shape[0])


def nmc_fit(per_domain_features: Sequence[FeatureMatrix]) -> NmcModel:
    """One centroid per domain, in domain order."""
    if not per_domain_features:
        raise EmptyInputError("no domains to fit")
    for tau, fm in enumerate(per_domain_features):
        if fm.n_rows == 0:
            raise EmptyInputError(f"domain {tau} has no features")
    return NmcModel(np.stack([fm.data.mean(axis=0) for fm in per_domain_features]))


def _as_rows(x, dim: int) -> np.ndarray:
    arr = x.data if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[1] != dim:
        raise DimMismatchError(f"input dim {arr.shape[1]} vs model dim {dim}")
    return arr


def nmc_predict_batch(model: NmcModel, X) -> np.ndarray:
    dist = squared_distances(_as_rows(X, model.centroids.shape[1]), model.centroids)
    return np.argmin(dist, axis=1).astype(np.int64)


def nmc_predict(model: NmcModel, x: Sequence[float]) -> int:
    return int(nmc_predict_batch(model, x)[0])


# ============================================================================
# KMeans + KNN
# ============================================================================

@dataclass(frozen=True, eq=False)
class KmeansKnnModel:
    centers: np.ndarray  # T x M x d

    @property
    def n_domains(self) -> int:
        return int(self.centers.shape[0])

    @property
    def m(self) -> int:
        return int(self.centers.shape[1])


def _domain_centers(X: FeatureMatrix, M: int, rng: RngStream) -> np.ndarray:
    if X.n_rows < M:
        raise InsufficientSamplesError(f"{X.n_rows} rows cannot support {M} centers")
    return lloyd_kmeans(X.data, M, rng).centers


def kmeans_fit(per_domain_features: Sequence[FeatureMatrix], M: int, seed: RngStream) -> KmeansKnnModel:
    """Lloyd's k-means (k-means++ seeds, 100 rounds, 1e-6 tolerance) per domain."""
    if not per_domain_features:
        raise EmptyInputError("no domains to fit")
    centers = [_domain_centers(fm, M, seed.child("kmeans", tau)) for tau, fm in enumerate(per_domain_features)]
    return KmeansKnnModel(np.stack(centers))


def knn_predict_batch(model: KmeansKnnModel, X) -> np.ndarray:
    t, m, d = model.centers.shape
    dist = squared_distances(_as_rows(X, d), model.centers.reshape(t * m, d))
    return (np.argmin(dist, axis=1) // m).astype(np.int64)


def knn_predict(model: KmeansKnnModel, x: Sequence[float]) -> int:
    return int(knn_predict_batch(model, x)[0])


# ============================================================================
# Incremental selectors
# ============================================================================

class DomainSelector(Protocol):
    name: str

    def learn_domain(self, features: Mapping[LevelId, FeatureMatrix]) -> None: ...

    def predict(self, features: Mapping[LevelId, FeatureMatrix]) -> np.ndarray: ...

    def memory_params(self) -> int: ...

    def extra_params(self) -> int: ...


class NmcSelector:
    name = "NMC"

    def __init__(self, level: LevelId = LAST) -> None:
        self.level = level
        self.model: Optional[NmcModel] = None

    def learn_domain(self, features: Mapping[LevelId, FeatureMatrix]) -> None:
        new = nmc_fit([features[self.level]]).centroids
        old = self.model.centroids if self.model is not None else np.zeros((0, new.shape[1]))
        self.model = NmcModel(np.vstack([old, new]))

    def predict(self, features: Mapping[LevelId, FeatureMatrix]) -> np.ndarray:
        return nmc_predict_batch(self.model, features[self.level])

    def memory_params(self) -> int:
        return 0 if self.model is None else int(self.model.centroids.size)

    def extra_params(self) -> int:
        return 0


class KmeansKnnSelector:
    name = "KMeans+KNN"

    def __init__(self, seed: RngStream, n_centers: int = DEFAULT_CENTERS, level: LevelId = LAST) -> None:
        self.seed = seed
        self.n_centers = n_centers
        self.level = level
        self.model: Optional[KmeansKnnModel] = None

    def learn_domain(self, features: Mapping[LevelId, FeatureMatrix]) -> None:
        tau = 0 if self.model is None else self.model.n_domains
        new = _domain_centers(features[self.level], self.n_centers, self.seed.child("kmeans", tau))
        stacked = new[None] if self.model is None else np.concatenate([self.model.centers, new[None]])
        self.model = KmeansKnnModel(stacked)

    def predict(self, features: Mapping[LevelId, FeatureMatrix]) -> np.ndarray:
        return knn_predict_batch(self.model, features[self.level])

    def memory_params(self) -> int:
        return 0 if self.model is None else int(self.model.centers.size)

    def extra_params(self) -> int:
        return 0


class SoyoSelector:
    """Compress -> resample -> retrain, once per arriving domain.

    Session t (1-based) trains on the balanced batch built from the stored
    models of domains 1..t-1 plus the real features of domain t, then
    compresses domain t. With balance=False the network sees domain t only.
    """

    def __init__(
        self,
        levels: Sequence[LevelId],
        compressor: CompressorConfig,
        train_cfg: TrainConfig,
        seed: RngStream,
        balance: bool = True,
        n_pseudo: Optional[int] = None,
        n_jobs: int = 1,
    ) -> None:
        self.levels = tuple(levels)
        self.compressor = compressor
        self.train_cfg = train_cfg
        self.seed = seed
        self.balance = balance
        self.n_pseudo = n_pseudo
        self.n_jobs = n_jobs
        self.store = DomainStore(self.levels)
        self.params: Optional[MdfnParams] = None
        self.loss_curve: list[float] = []
        suffix = "" if balance else " (no DFR)"
        self.name = f"SOYO+{compressor.label}{suffix}"

    def learn_domain(self, features: Mapping[LevelId, FeatureMatrix]) -> None:
        current = {lvl: features[lvl] for lvl in self.levels}
        n = current[self.levels[-1]].n_rows
        t = len(self.store) + 1
        session = self.seed.child("session", t)
        if t >= 2:
            if self.balance:
                batch = build_balanced_batch(self.store.models(), current, n, session.child("dfr"), self.n_pseudo)
            else:
                batch = build_current_batch(current, t - 1, session.child("dfr"))
            cfg = replace(self.train_cfg, seed=session.child("mdfn"))
            self.params, self.loss_curve = train(batch, t, cfg, self.levels, previous=self.params)
            logger.info("%s session %d: trained on %d rows, final loss %.4f", self.name, t, batch.n_rows, self.loss_curve[-1])
        models = {
            lvl: compress(current[lvl], self.compressor, session.child("compress", lvl.tag), n_jobs=self.n_jobs)
            for lvl in self.levels
        }
        self.store.append(models, n)

    def predict(self, features: Mapping[LevelId, FeatureMatrix]) -> np.ndarray:
        if self.params is None:
            n = features[self.levels[-1]].n_rows
            return np.zeros(n, dtype=np.int64)
        return predict_batch(features, self.params)[0]

    def memory_params(self) -> int:
        return self.store.memory_params()

    def extra_params(self) -> int:
        return 0 if self.params is None else self.params.param_count()
