#!/usr/bin/env python3
"""
Incremental protocol harness: synthetic feature streams, session loop,
selection metrics and selector comparison.

Session loop (t = 1..T):
1. hand domain t's training features to the selector (SOYO compresses,
   resamples and retrains; baselines store centroids/centers);
2. evaluate on the union of test splits of domains 1..t;
3. record S_t, confusion, A_t (expert-matrix proxy), oracle A_t, F_t and
   memory / extra-parameter totals.

The synthetic generator stands in for backbone features. Domain means sit at
equal pairwise distance `domain_separation` on orthonormal axes (one basis
per level). Every class adds an offset shared by all domains: at shallow
levels in a random direction, at the final level inside the span of the
domain means, so deep features alone confuse class identity with domain
identity. The first level's noise z_0 is the shared latent; every later level
mixes it with fresh noise: e_i = rho * z_0 + (1 - rho) * z_i.
"""

from __future__ import annotations

import math
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from domain_selectors import DEFAULT_CENTERS, DomainSelector, KmeansKnnSelector, NmcSelector, SoyoSelector
from feat_io import read_feat, write_feat
from gmc import CompressorConfig, CompressorKind
from mdfn import TrainConfig
from soyo_core import (
    DEFAULT_LEVELS,
    BadLabelError,
    ConfigError,
    DimMismatchError,
    EmptyInputError,
    FeatureMatrix,
    FormatError,
    IncompleteStoreError,
    LabeledBatch,
    LengthMismatchError,
    LevelId,
    NotEnoughSessionsError,
    RngStream,
    as_float32_exact,
    get_logger,
    standard_normal,
)

logger = get_logger(__name__)

DEFAULT_BACKBONE_PARAMS = 86_000_000
SPLITS = ("train", "test")
_FEAT_NAME = re.compile(r"^d(\d{2,})_(train|test)_([A-Za-z0-9_]+)\.feat$")


# ============================================================================
# Streams
# ============================================================================

@dataclass(frozen=True)
class StreamConfig:
    """Synthetic stream. Defaults are the acceptance stream."""
    n_domains: int = 4
    dim: int = 32
    classes_per_domain: int = 5
    train_per_domain: int = 500
    test_per_domain: int = 200
    domain_separation: float = 3.0
    class_offset_scale: float = 2.0
    within_noise: float = 1.0
    level_correlation: float = 0.5
    levels: tuple[LevelId, ...] = DEFAULT_LEVELS
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "levels", tuple(self.levels))
        counts = (self.n_domains, self.dim, self.classes_per_domain, self.train_per_domain, self.test_per_domain)
        if min(counts) < 1:
            raise ConfigError("stream counts must all be >= 1")
        if self.n_domains > self.dim:
            raise ConfigError(f"{self.n_domains} equidistant domain means need dim >= {self.n_domains}")
        if self.domain_separation < 0 or self.class_offset_scale < 0:
            raise ConfigError("separation and class offset scale must be >= 0")
        if not self.within_noise > 0:
            raise ConfigError("within_noise must be > 0")
        if not 0.0 <= self.level_correlation <= 1.0:
            raise ConfigError("level_correlation must lie in [0, 1]")
        if not self.levels or len(set(self.levels)) != len(self.levels):
            raise ConfigError("levels must be non-empty and distinct")


@dataclass(frozen=True)
class DomainSplit:
    domain: int
    train: LabeledBatch
    test: LabeledBatch

    def split(self, name: str) -> LabeledBatch:
        return self.train if name == "train" else self.test


@dataclass(frozen=True)
class FeatureStream:
    levels: tuple[LevelId, ...]
    domains: tuple[DomainSplit, ...]
    config: Optional[StreamConfig] = None

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    @property
    def dim(self) -> int:
        return self.domains[0].train.level(self.levels[-1]).dim


def _orthonormal_basis(rng: RngStream, d: int) -> np.ndarray:
    q, r = np.linalg.qr(standard_normal(rng, d * d).reshape(d, d))
    return q * np.sign(np.where(np.diag(r) == 0.0, 1.0, np.diag(r)))


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    return rows / np.where(norms > 0.0, norms, 1.0)


def _level_geometry(cfg: StreamConfig, rng: RngStream, lvl: LevelId, deep: bool):
    d, T, C = cfg.dim, cfg.n_domains, cfg.classes_per_domain
    axes = _orthonormal_basis(rng.child("basis", lvl.tag), d)[:, :T]
    means = (cfg.domain_separation / math.sqrt(2.0)) * axes.T
    draws = standard_normal(rng.child("classes", lvl.tag), C * (T if deep else d))
    if deep:
        offsets = _unit_rows(draws.reshape(C, T)) @ axes.T
    else:
        offsets = _unit_rows(draws.reshape(C, d))
    return means, cfg.class_offset_scale * offsets


def _draw_split(cfg: StreamConfig, geometry, tau: int, n: int, rng: RngStream) -> LabeledBatch:
    d = cfg.dim
    classes = rng.child("labels").generator().integers(0, cfg.classes_per_domain, size=n)
    rho = cfg.level_correlation
    shared = None
    features = {}
    for lvl in cfg.levels:
        fresh = standard_normal(rng.child("noise", lvl.tag), n * d).reshape(n, d)
        if shared is None:
            shared = noise = fresh
        else:
            noise = rho * shared + (1.0 - rho) * fresh
        means, offsets = geometry[lvl]
        values = means[tau] + offsets[classes] + cfg.within_noise * noise
        features[lvl] = FeatureMatrix(as_float32_exact(values))
    return LabeledBatch(features, np.full(n, tau, dtype=np.int64))


def generate_stream(cfg: StreamConfig) -> FeatureStream:
    """Train/test splits for every domain at every configured level."""
    root = RngStream(cfg.seed).child("stream")
    deepest = cfg.levels[-1]
    geometry = {lvl: _level_geometry(cfg, root, lvl, lvl == deepest) for lvl in cfg.levels}
    domains = []
    for tau in range(cfg.n_domains):
        train = _draw_split(cfg, geometry, tau, cfg.train_per_domain, root.child("domain", tau, "train"))
        test = _draw_split(cfg, geometry, tau, cfg.test_per_domain, root.child("domain", tau, "test"))
        domains.append(DomainSplit(tau, train, test))
    logger.info(
        "generated %d domains x %d levels (d=%d, separation=%.3g, class offset=%.3g)",
        cfg.n_domains, len(cfg.levels), cfg.dim, cfg.domain_separation, cfg.class_offset_scale,
    )
    return FeatureStream(cfg.levels, tuple(domains), cfg)


def feat_filename(domain: int, split: str, level: LevelId) -> str:
    return f"d{domain:02d}_{split}_{level.tag}.feat"


def export_stream(stream: FeatureStream, directory: Path) -> list[Path]:
    """Write every (domain, split, level) matrix as a FEAT file labelled with the domain."""
    directory = Path(directory)
    written = []
    for dom in stream.domains:
        for split in SPLITS:
            batch = dom.split(split)
            for lvl in stream.levels:
                path = directory / feat_filename(dom.domain, split, lvl)
                write_feat(path, batch.level(lvl).data, batch.labels)
                written.append(path)
    return written


def _collect_paths(source: Union[Path, str, Iterable[Path]]) -> list[Path]:
    if isinstance(source, (str, Path)):
        source = Path(source)
        if source.is_dir():
            return sorted(source.glob("*.feat"))
        return [source]
    return [Path(p) for p in source]


def ingest_features(
    source: Union[Path, str, Iterable[Path]],
    levels: Sequence[LevelId] = DEFAULT_LEVELS,
) -> FeatureStream:
    """Load a FEAT stream (a directory or explicit file set) into a FeatureStream."""
    levels = tuple(levels)
    found: dict[tuple[int, str, LevelId], Path] = {}
    for path in _collect_paths(source):
        m = _FEAT_NAME.match(path.name)
        if m is None:
            logger.warning("ignoring %s: not a d<NN>_<split>_<level>.feat name", path.name)
            continue
        found[(int(m.group(1)), m.group(2), LevelId(m.group(3)))] = path
    if not found:
        raise EmptyInputError("no FEAT files found")
    n_domains = max(key[0] for key in found) + 1

    dims: dict[LevelId, int] = {}
    domains = []
    for tau in range(n_domains):
        batches = {}
        for split in SPLITS:
            features = {}
            for lvl in levels:
                path = found.get((tau, split, lvl))
                if path is None:
                    raise IncompleteStoreError(f"missing {feat_filename(tau, split, lvl)}")
                feat = read_feat(path)
                if feat.labels is not None and np.any(feat.labels != tau):
                    raise FormatError(f"{path.name}: labels disagree with domain {tau}")
                if dims.setdefault(lvl, feat.dim) != feat.dim:
                    raise DimMismatchError(f"{path.name}: dim {feat.dim}, other domains have {dims[lvl]}")
                features[lvl] = FeatureMatrix(feat.features.astype(np.float64))
            n = next(iter(features.values())).n_rows
            batches[split] = LabeledBatch(features, np.full(n, tau, dtype=np.int64))
        domains.append(DomainSplit(tau, batches["train"], batches["test"]))
    logger.info("ingested %d domains from %d files", n_domains, len(found))
    return FeatureStream(levels, tuple(domains))


# ============================================================================
# Metrics
# ============================================================================

@dataclass(frozen=True, eq=False)
class ExpertMatrix:
    """a[i, j]: downstream accuracy when the true domain is i and expert j is used."""
    a: np.ndarray

    def __post_init__(self) -> None:
        a = np.array(self.a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise DimMismatchError(f"expert matrix must be square, got {a.shape}")
        if not np.all(np.isfinite(a)) or np.any(a < 0.0) or np.any(a > 1.0):
            raise ConfigError("expert accuracies must lie in [0, 1]")
        if np.any(a > np.diag(a)[:, None]):
            raise ConfigError("each row's diagonal must dominate its off-diagonal entries")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)

    @classmethod
    def uniform(cls, n_domains: int, diagonal: float = 0.9, off_diagonal: float = 0.5) -> "ExpertMatrix":
        a = np.full((n_domains, n_domains), off_diagonal)
        np.fill_diagonal(a, diagonal)
        return cls(a)

    @property
    def n_domains(self) -> int:
        return int(self.a.shape[0])


def confusion_counts(true_labels: Sequence[int], predicted_labels: Sequence[int], n_domains: int) -> np.ndarray:
    """counts[i, j]: samples of true domain i predicted as j."""
    true = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    pred = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
    if true.shape != pred.shape:
        raise LengthMismatchError(f"{true.shape[0]} true labels vs {pred.shape[0]} predictions")
    for name, arr in (("true", true), ("predicted", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_domains):
            raise BadLabelError(f"{name} labels outside 0..{n_domains - 1}")
    counts = np.zeros((n_domains, n_domains), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return counts


def _row_percentages(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=1, keepdims=True)
    return np.where(totals > 0, 100.0 * counts / np.where(totals > 0, totals, 1), 0.0)


def compute_selection_metrics(
    true_labels: Sequence[int], predicted_labels: Sequence[int], n_domains: Optional[int] = None
) -> tuple[float, np.ndarray]:
    """S_T (fraction correct) and the row-normalized confusion matrix in percent."""
    true = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    pred = np.asarray(predicted_labels, dtype=np.int64).reshape(-1)
    if true.shape != pred.shape:
        raise LengthMismatchError(f"{true.shape[0]} true labels vs {pred.shape[0]} predictions")
    if true.size == 0:
        raise EmptyInputError("no labels to score")
    if n_domains is None:
        n_domains = int(max(true.max(), pred.max())) + 1
    counts = confusion_counts(true, pred, n_domains)
    return float(np.trace(counts) / true.size), _row_percentages(counts)


def _joint(counts: np.ndarray, expert: ExpertMatrix) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.shape != expert.a.shape:
        raise DimMismatchError(f"confusion {counts.shape} vs expert matrix {expert.a.shape}")
    total = counts.sum()
    if total <= 0:
        raise EmptyInputError("confusion counts are all zero")
    return counts / total


def compute_accuracy_proxy(counts: np.ndarray, expert: ExpertMatrix) -> float:
    """A_T = sum_ij P(true=i, selected=j) * a[i, j]."""
    return float(np.sum(_joint(counts, expert) * expert.a))


def oracle_accuracy(counts: np.ndarray, expert: ExpertMatrix) -> float:
    """sum_i P(true=i) * a[i, i]: what a selector that always knows the domain scores."""
    return float(_joint(counts, expert).sum(axis=1) @ np.diag(expert.a))


def compute_forgetting(history: Sequence[Sequence[float]]) -> float:
    """F_T from per-session accuracies; history[s][tau] is domain tau's accuracy after session s+1.

    F_T = mean over tau < T of (acc at session T - acc right after session tau),
    negative when accuracy was lost.
    """
    T = len(history)
    if T < 2:
        raise NotEnoughSessionsError(f"forgetting needs at least 2 sessions, got {T}")
    final = history[-1]
    if len(final) < T - 1 or any(len(history[tau]) <= tau for tau in range(T - 1)):
        raise LengthMismatchError("each session must report every domain seen so far")
    return float(np.mean([final[tau] - history[tau][tau] for tau in range(T - 1)]))


# ============================================================================
# Session loop
# ============================================================================

class SelectorKind(str, Enum):
    SOYO = "soyo"
    NMC = "nmc"
    KMEANS_KNN = "kmeans_knn"


@dataclass(frozen=True)
class HarnessConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    n_centers: int = DEFAULT_CENTERS
    balance: bool = True
    n_pseudo: Optional[int] = None
    backbone_params: int = DEFAULT_BACKBONE_PARAMS
    expert_diagonal: float = 0.9
    expert_off_diagonal: float = 0.5
    seed: int = 0
    threads: int = 1
    progress: bool = False

    def __post_init__(self) -> None:
        if self.n_centers < 1 or self.threads < 1:
            raise ConfigError("n_centers and threads must be >= 1")
        if self.backbone_params < 1:
            raise ConfigError("backbone_params must be >= 1")


@dataclass(frozen=True, eq=False)
class SessionReport:
    session: int  # 1-based
    selector: str
    compressor: str
    s_t: float
    confusion_pct: np.ndarray
    confusion: np.ndarray
    domain_accuracy: tuple[float, ...]
    prior_s_t: Optional[float]
    a_t: float
    oracle_a_t: float
    f_t: Optional[float]
    memory_params: int
    memory_ratio: float
    extra_params: int
    extra_ratio: float
    final_loss: Optional[float] = None

    def row(self) -> dict:
        return {
            "session": self.session,
            "selector": self.selector,
            "compressor": self.compressor,
            "s_t": self.s_t,
            "prior_s_t": self.prior_s_t,
            "a_t": self.a_t,
            "oracle_a_t": self.oracle_a_t,
            "f_t": self.f_t,
            "memory_params": self.memory_params,
            "memory_pct": 100.0 * self.memory_ratio,
            "extra_params": self.extra_params,
            "extra_pct": 100.0 * self.extra_ratio,
            "final_loss": self.final_loss,
        }

    def to_dict(self) -> dict:
        out = self.row()
        out["domain_accuracy"] = list(self.domain_accuracy)
        out["confusion_pct"] = self.confusion_pct.tolist()
        out["confusion"] = self.confusion.tolist()
        return out


REPORT_COLUMNS = [
    "session", "selector", "compressor", "s_t", "prior_s_t", "a_t", "oracle_a_t", "f_t",
    "memory_params", "memory_pct", "extra_params", "extra_pct", "final_loss",
]


def reports_frame(reports: Iterable[SessionReport]) -> pd.DataFrame:
    return pd.DataFrame([r.row() for r in reports], columns=REPORT_COLUMNS)


def make_selector(
    kind: SelectorKind,
    levels: Sequence[LevelId],
    compressor: CompressorConfig,
    cfg: HarnessConfig,
) -> DomainSelector:
    kind = SelectorKind(kind)
    seed = RngStream(cfg.seed).child("selector", kind.value)
    if kind is SelectorKind.NMC:
        return NmcSelector(level=levels[-1])
    if kind is SelectorKind.KMEANS_KNN:
        return KmeansKnnSelector(seed, cfg.n_centers, level=levels[-1])
    return SoyoSelector(
        levels, compressor, cfg.train, seed, balance=cfg.balance, n_pseudo=cfg.n_pseudo, n_jobs=cfg.threads,
    )


def _test_union(stream: FeatureStream, t: int) -> LabeledBatch:
    return LabeledBatch.concat([dom.test for dom in stream.domains[:t]])


def run_selector(
    stream: FeatureStream,
    selector: DomainSelector,
    cfg: HarnessConfig,
    compressor_label: str = "-",
) -> list[SessionReport]:
    """Feed domains one at a time; evaluate on all test splits seen so far."""
    if stream.n_domains < 1:
        raise EmptyInputError("stream has no domains")
    expert = ExpertMatrix.uniform(stream.n_domains, cfg.expert_diagonal, cfg.expert_off_diagonal)
    history: list[list[float]] = []
    reports = []
    for t in range(1, stream.n_domains + 1):
        selector.learn_domain(stream.domains[t - 1].train.features)
        test = _test_union(stream, t)
        pred = selector.predict(test.features)
        s_t, confusion_pct = compute_selection_metrics(test.labels, pred, t)
        counts = confusion_counts(test.labels, pred, t)
        per_domain = tuple(float(counts[i, i] / counts[i].sum()) for i in range(t))
        history.append(list(per_domain))
        prior = test.labels < t - 1
        sub_expert = ExpertMatrix(expert.a[:t, :t])
        loss_curve = getattr(selector, "loss_curve", None)
        reports.append(SessionReport(
            session=t,
            selector=selector.name,
            compressor=compressor_label,
            s_t=s_t,
            confusion_pct=confusion_pct,
            confusion=counts,
            domain_accuracy=per_domain,
            prior_s_t=float(np.mean(pred[prior] == test.labels[prior])) if np.any(prior) else None,
            a_t=compute_accuracy_proxy(counts, sub_expert),
            oracle_a_t=oracle_accuracy(counts, sub_expert),
            f_t=compute_forgetting(history) if t >= 2 else None,
            memory_params=selector.memory_params(),
            memory_ratio=selector.memory_params() / cfg.backbone_params,
            extra_params=selector.extra_params(),
            extra_ratio=selector.extra_params() / cfg.backbone_params,
            final_loss=loss_curve[-1] if loss_curve else None,
        ))
        logger.debug("%s session %d: S=%.4f", selector.name, t, s_t)
    return reports


def run_incremental(
    stream: FeatureStream,
    selector_kind: SelectorKind,
    compressor: CompressorConfig = CompressorConfig(),
    cfg: HarnessConfig = HarnessConfig(),
) -> list[SessionReport]:
    kind = SelectorKind(selector_kind)
    selector = make_selector(kind, stream.levels, compressor, cfg)
    label = compressor.label if kind is SelectorKind.SOYO else "-"
    return run_selector(stream, selector, cfg, label)


# ============================================================================
# Comparisons
# ============================================================================

@dataclass(frozen=True)
class _Job:
    label: str
    kind: SelectorKind
    compressor: CompressorConfig
    cfg: HarnessConfig
    levels: tuple[LevelId, ...]


def _run_job(stream: FeatureStream, job: _Job) -> list[SessionReport]:
    view = FeatureStream(job.levels, stream.domains, stream.config)
    return run_incremental(view, job.kind, job.compressor, job.cfg)


def _run_jobs(stream: FeatureStream, jobs: Sequence[_Job], threads: int, progress: bool) -> list[tuple[str, list[SessionReport]]]:
    bar = tqdm(total=len(jobs), desc="selectors", file=sys.stderr, disable=not progress)
    try:
        if threads > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                futures = [pool.submit(_run_job, stream, job) for job in jobs]
                results = []
                for fut in futures:
                    results.append(fut.result())
                    bar.update(1)
        else:
            results = []
            for job in jobs:
                results.append(_run_job(stream, job))
                bar.update(1)
    finally:
        bar.close()
    return [(job.label, reports) for job, reports in zip(jobs, results)]


def compare_selectors(
    stream: FeatureStream,
    compressor: CompressorConfig = CompressorConfig(),
    cfg: HarnessConfig = HarnessConfig(),
    include_no_dfr: bool = False,
) -> list[tuple[str, list[SessionReport]]]:
    """SOYO with each compressor, NMC and KMeans+KNN on identical data and seeds."""
    inner = replace(cfg, threads=1)
    gmm = replace(compressor, kind=CompressorKind.GMM)
    jobs = [
        _Job("SOYO+GMC", SelectorKind.SOYO, gmm, inner, stream.levels),
        _Job("SOYO+Mean&std", SelectorKind.SOYO, replace(compressor, kind=CompressorKind.MEANSTD), inner, stream.levels),
        _Job("SOYO+PCA", SelectorKind.SOYO, replace(compressor, kind=CompressorKind.PCA), inner, stream.levels),
        _Job("NMC", SelectorKind.NMC, gmm, inner, stream.levels),
        _Job("KMeans+KNN", SelectorKind.KMEANS_KNN, gmm, inner, stream.levels),
    ]
    if include_no_dfr:
        jobs.append(_Job("SOYO+GMC (no DFR)", SelectorKind.SOYO, gmm, replace(inner, balance=False), stream.levels))
    return _run_jobs(stream, jobs, cfg.threads, cfg.progress)


def layer_ablation(
    stream: FeatureStream,
    compressor: CompressorConfig = CompressorConfig(),
    cfg: HarnessConfig = HarnessConfig(),
    level_sets: Optional[Sequence[Sequence[LevelId]]] = None,
) -> list[tuple[str, list[SessionReport]]]:
    """SOYO+GMC over level subsets: final level only, last two, all levels."""
    if level_sets is None:
        candidates = [stream.levels[-1:], stream.levels[-2:], stream.levels]
        level_sets = list(dict.fromkeys(tuple(s) for s in candidates))
    inner = replace(cfg, threads=1)
    jobs = []
    for levels in level_sets:
        levels = tuple(levels)
        missing = [lvl for lvl in levels if lvl not in stream.levels]
        if missing:
            raise IncompleteStoreError(f"stream lacks levels {[str(m) for m in missing]}")
        train = replace(inner.train, fusion=len(levels) > 1)
        label = "+".join(lvl.tag for lvl in levels)
        jobs.append(_Job(label, SelectorKind.SOYO, compressor, replace(inner, train=train), levels))
    return _run_jobs(stream, jobs, cfg.threads, cfg.progress)


def summary_frame(results: Sequence[tuple[str, list[SessionReport]]]) -> pd.DataFrame:
    """One row per run: final-session S_T, A_T, oracle A_T, F_T and memory columns."""
    rows = []
    for label, reports in results:
        final = reports[-1]
        row = final.row()
        row["selector"] = label
        rows.append(row)
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)
