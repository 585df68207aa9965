#!/usr/bin/env python3
"""
Shared types, numeric conventions and the random-number contract for the
SOYO parameter selector.

Conventions:
- Internal arithmetic is float64. On-disk feature payloads are float32 and are
  widened to float64 on load (see feat_io.py).
- Domain indices are 0-based everywhere in code; reports add 1.
- Randomness comes only from RngStream: numpy's Philox counter-based
  generator keyed by (seed, stream id). Normal draws use
  Generator.standard_normal (ziggurat). Platform-native generators
  (random, np.random.seed) are never used.
"""

from __future__ import annotations

import hashlib
import logging
import math
import sys
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import colorlog
import numpy as np
from scipy.special import logsumexp

_MASK64 = (1 << 64) - 1


# ============================================================================
# Logging
# ============================================================================

_LOG_FORMAT = "%(log_color)s%(levelname)-8s%(reset)s %(name)s: %(message)s"


def get_logger(name: str) -> logging.Logger:
    """Module logger under the shared 'soyo' hierarchy."""
    short = name.rsplit(".", 1)[-1]
    return logging.getLogger(f"soyo.{short}")


def configure_logging(quiet: bool = False, verbose: bool = False) -> None:
    """Install one colored stderr handler on the 'soyo' logger."""
    root = logging.getLogger("soyo")
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = colorlog.StreamHandler(sys.stderr)
    handler.setFormatter(colorlog.ColoredFormatter(_LOG_FORMAT))
    root.addHandler(handler)
    if quiet:
        root.setLevel(logging.WARNING)
    elif verbose:
        root.setLevel(logging.DEBUG)
    else:
        root.setLevel(logging.INFO)
    root.propagate = False


# ============================================================================
# Errors
# ============================================================================

class SoyoError(Exception):
    """Base class for every error raised by the pipeline."""


class EmptyInputError(SoyoError, ValueError):
    pass


class DimMismatchError(SoyoError, ValueError):
    pass


class InsufficientSamplesError(SoyoError, ValueError):
    pass


class SingularCovarianceError(SoyoError, ValueError):
    pass


class BadComponentCountError(SoyoError, ValueError):
    pass


class BadWeightsError(SoyoError, ValueError):
    pass


class IncompleteStoreError(SoyoError, KeyError):
    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message.
        return str(self.args[0]) if self.args else ""


class BadLabelError(SoyoError, ValueError):
    pass


class LengthMismatchError(SoyoError, ValueError):
    pass


class NotEnoughSessionsError(SoyoError, ValueError):
    pass


class ConfigError(SoyoError, ValueError):
    pass


class NonFiniteError(SoyoError, ValueError):
    pass


class InvalidModelError(SoyoError, ValueError):
    """Model parameters that break a structural rule (sign, orthonormality)."""


class FormatError(SoyoError):
    """Malformed file content. `location` is a byte offset or a JSON path."""

    def __init__(self, message: str, location: int | str | None = None) -> None:
        self.location = location
        if isinstance(location, int):
            message = f"{message} (at byte offset {location})"
        elif location:
            message = f"{message} (at {location})"
        super().__init__(message)


# ============================================================================
# Domain types
# ============================================================================

@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """n x d float64 features at one network level. Read-only after construction."""
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise DimMismatchError(f"FeatureMatrix needs a 2-D array, got {arr.ndim}-D")
        if arr.shape[1] < 1:
            raise DimMismatchError("FeatureMatrix dim must be positive")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("FeatureMatrix values must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def empty(cls, dim: int) -> "FeatureMatrix":
        return cls(np.zeros((0, dim)))

    @classmethod
    def concat(cls, parts: Sequence["FeatureMatrix"]) -> "FeatureMatrix":
        if not parts:
            raise EmptyInputError("nothing to concatenate")
        dims = {p.dim for p in parts}
        if len(dims) != 1:
            raise DimMismatchError(f"cannot concatenate dims {sorted(dims)}")
        return cls(np.vstack([p.data for p in parts]))

    @property
    def n_rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def take(self, rows: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(self.data[rows])

    def __len__(self) -> int:
        return self.n_rows


def as_float32_exact(values: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 and widen back, so FEAT export is lossless."""
    return np.asarray(values, dtype=np.float32).astype(np.float64)


@dataclass(frozen=True, order=True)
class LevelId:
    """A network level that features are taken from."""
    tag: str

    @classmethod
    def layer(cls, index: int) -> "LevelId":
        return cls(f"L{index}")

    @classmethod
    def parse(cls, text: str) -> "LevelId":
        text = text.strip()
        if not text or not text.replace("_", "").isalnum():
            raise ConfigError(f"invalid level tag: {text!r}")
        return cls(text)

    def __str__(self) -> str:
        return self.tag


MID = LevelId("mid")
LAST = LevelId("last")
DEFAULT_LEVELS: tuple[LevelId, ...] = (MID, LAST)


def check_domain_id(index: int, n_domains: int) -> int:
    if not 0 <= int(index) < n_domains:
        raise BadLabelError(f"domain {index} outside 0..{n_domains - 1}")
    return int(index)


@dataclass(frozen=True, eq=False)
class LabeledBatch:
    """Per-level features sharing one row order, plus a domain label per row."""
    features: Mapping[LevelId, FeatureMatrix]
    labels: np.ndarray

    def __post_init__(self) -> None:
        if not self.features:
            raise EmptyInputError("LabeledBatch needs at least one level")
        labels = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        rows = {fm.n_rows for fm in self.features.values()}
        if len(rows) != 1:
            raise LengthMismatchError(f"levels disagree on n_rows: {sorted(rows)}")
        if labels.shape[0] != rows.pop():
            raise LengthMismatchError("labels length differs from n_rows")
        if labels.size and labels.min() < 0:
            raise BadLabelError("domain labels must be non-negative")
        labels.setflags(write=False)
        object.__setattr__(self, "features", dict(self.features))
        object.__setattr__(self, "labels", labels)

    @property
    def n_rows(self) -> int:
        return int(self.labels.shape[0])

    @property
    def levels(self) -> tuple[LevelId, ...]:
        return tuple(self.features)

    def level(self, level: LevelId) -> FeatureMatrix:
        try:
            return self.features[level]
        except KeyError:
            raise IncompleteStoreError(f"batch has no level '{level}'") from None

    def take(self, rows: np.ndarray) -> "LabeledBatch":
        return LabeledBatch(
            {lvl: fm.take(rows) for lvl, fm in self.features.items()},
            self.labels[rows],
        )

    @classmethod
    def concat(cls, parts: Sequence["LabeledBatch"]) -> "LabeledBatch":
        if not parts:
            raise EmptyInputError("nothing to concatenate")
        levels = parts[0].levels
        for p in parts[1:]:
            if set(p.levels) != set(levels):
                raise IncompleteStoreError("batches carry different level sets")
        return cls(
            {lvl: FeatureMatrix.concat([p.features[lvl] for p in parts]) for lvl in levels},
            np.concatenate([p.labels for p in parts]),
        )


def check_prob_vector(values: Sequence[float], tol: float = 1e-9) -> np.ndarray:
    """Validate a probability vector; raise BadWeightsError otherwise."""
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise BadWeightsError("empty probability vector")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise BadWeightsError(f"probabilities must lie in [0, 1]: {arr.tolist()}")
    total = float(arr.sum())
    if abs(total - 1.0) > tol:
        raise BadWeightsError(f"probabilities sum to {total!r}, not 1")
    return arr


@dataclass(frozen=True)
class RngStream:
    """Deterministic random source: Philox keyed by (seed, stream id)."""
    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *labels: object) -> "RngStream":
        """Sub-stream for a named consumer; same labels give the same stream."""
        text = "/".join([str(self.stream)] + [str(lbl) for lbl in labels])
        digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
        return RngStream(self.seed, int.from_bytes(digest, "little"))


# ============================================================================
# Numeric helpers
# ============================================================================

def log_sum_exp(v: Iterable[float]) -> float:
    """ln(sum(exp(v))) with max-shift; exactly -inf when every entry is -inf."""
    arr = np.asarray(list(v), dtype=np.float64)
    if arr.size == 0:
        raise EmptyInputError("log_sum_exp of an empty sequence")
    if np.any(np.isnan(arr)) or np.any(arr == np.inf):
        raise NonFiniteError("log_sum_exp expects finite values or -inf")
    if np.all(arr == -np.inf):
        return -math.inf
    return float(logsumexp(arr))


def standard_normal(rng: RngStream, n: int) -> np.ndarray:
    """n i.i.d. N(0, 1) draws, a pure function of (seed, stream)."""
    if n < 0:
        raise ConfigError("n must be non-negative")
    return rng.generator().standard_normal(n)


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax via log-sum-exp; works on 1-D or 2-D input."""
    logits = np.asarray(logits, dtype=np.float64)
    return np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
