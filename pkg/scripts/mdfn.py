#!/usr/bin/env python3
"""
Multi-level Domain Feature Fusion Network (MDFN).

Fusion of a deep level with one or more shallower levels:

    x_D = x_last + sum_aux g_aux(x_aux) + g2(x_last)

Each g is a two-layer MLP (d -> hidden -> d, hidden 16 by default, ReLU by
default). With the usual two levels (mid, last) the single auxiliary MLP is
g1. A linear head g3 maps x_D to t domain logits; training minimizes the mean
cross-entropy with plain SGD (lr 0.01, weight decay 2e-4 on weights only,
100 epochs). Gradients are derived by hand; backbone features are inputs and
are never differentiated.

Initialization: second-layer weights and all biases of every MLP start at
zero so x_D == x_last at init; first-layer and head weights are uniform in
+-1/sqrt(fan_in) under the training seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from soyo_core import (
    LAST,
    MID,
    BadLabelError,
    ConfigError,
    DimMismatchError,
    EmptyInputError,
    FeatureMatrix,
    IncompleteStoreError,
    LabeledBatch,
    LevelId,
    RngStream,
    get_logger,
    stable_softmax,
)

logger = get_logger(__name__)

DEFAULT_HIDDEN = 16


class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"


def _act(kind: Activation, h: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(h, 0.0)
    return np.tanh(h)


def _act_grad(kind: Activation, h: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return (h > 0.0).astype(np.float64)
    return 1.0 - a * a


# ============================================================================
# Parameters
# ============================================================================

@dataclass(frozen=True, eq=False)
class MlpParams:
    """w1: hidden x d, b1: hidden, w2: d_out x hidden, b2: d_out."""
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self) -> None:
        h, d = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape[1] != h or self.b2.shape != (self.w2.shape[0],):
            raise DimMismatchError(
                f"inconsistent MLP shapes w1{self.w1.shape} b1{self.b1.shape} w2{self.w2.shape} b2{self.b2.shape}"
            )

    @property
    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays)


@dataclass(frozen=True, eq=False)
class HeadParams:
    """w: t x d, b: t."""
    w: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],) or self.w.shape[0] < 1:
            raise DimMismatchError(f"inconsistent head shapes w{self.w.shape} b{self.b.shape}")

    @property
    def n_domains(self) -> int:
        return int(self.w.shape[0])

    def param_count(self) -> int:
        return self.w.size + self.b.size


@dataclass(frozen=True, eq=False)
class MdfnParams:
    """Trainable set: one MLP per auxiliary level, g2 on the final level, head g3.

    `levels` is ordered shallow -> deep; `aux` pairs with levels[:-1]. With
    fusion disabled `aux` is empty and g2 is None (head on x_last alone).
    """
    levels: tuple[LevelId, ...]
    aux: tuple[MlpParams, ...]
    g2: Optional[MlpParams]
    g3: HeadParams
    activation: Activation = Activation.RELU

    def __post_init__(self) -> None:
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels:
            raise EmptyInputError("MDFN needs at least one level")
        expected_aux = len(self.levels) - 1 if self.g2 is not None else 0
        if len(self.aux) != expected_aux:
            raise DimMismatchError(f"{len(self.aux)} auxiliary MLPs, expected {expected_aux}")
        d = self.g3.w.shape[1]
        for mlp in self.mlps:
            if mlp.w1.shape[1] != d or mlp.w2.shape[0] != d:
                raise DimMismatchError("fusion MLPs must map d -> d with d = head input")

    @property
    def g1(self) -> MlpParams:
        return self.aux[0]

    @property
    def fusion(self) -> bool:
        return self.g2 is not None

    @property
    def dim(self) -> int:
        return int(self.g3.w.shape[1])

    @property
    def n_domains(self) -> int:
        return self.g3.n_domains

    @property
    def mlps(self) -> tuple[MlpParams, ...]:
        return self.aux + ((self.g2,) if self.g2 is not None else ())

    def param_count(self) -> int:
        return sum(m.param_count() for m in self.mlps) + self.g3.param_count()

    def map_arrays(self, fn, *others: "MdfnParams") -> "MdfnParams":
        """Apply fn(name, array, *other_arrays) to every tensor; keep structure."""
        def mlp(i, m, om):
            return MlpParams(*(fn(f"mlp{i}.{n}", a, *(o.arrays[j] for o in om))
                              for j, (n, a) in enumerate(zip(("w1", "b1", "w2", "b2"), m.arrays))))

        aux = tuple(mlp(i, m, [o.aux[i] for o in others]) for i, m in enumerate(self.aux))
        g2 = None
        if self.g2 is not None:
            g2 = mlp(len(self.aux), self.g2, [o.g2 for o in others])
        g3 = HeadParams(fn("g3.w", self.g3.w, *(o.g3.w for o in others)),
                        fn("g3.b", self.g3.b, *(o.g3.b for o in others)))
        return MdfnParams(self.levels, aux, g2, g3, self.activation)

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, m in enumerate(self.mlps):
            out.extend((f"mlp{i}.{n}", a) for n, a in zip(("w1", "b1", "w2", "b2"), m.arrays))
        out.extend([("g3.w", self.g3.w), ("g3.b", self.g3.b)])
        return out


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings; defaults lr 0.01, weight decay 2e-4, 100 epochs, batch 64."""
    learning_rate: float = 0.01
    weight_decay: float = 2e-4
    epochs: int = 100
    batch_size: int = 64
    hidden: int = DEFAULT_HIDDEN
    activation: Activation = Activation.RELU
    fusion: bool = True
    warm_start: bool = False
    seed: RngStream = field(default_factory=lambda: RngStream(0))

    def __post_init__(self) -> None:
        object.__setattr__(self, "activation", Activation(self.activation))
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be > 0 and weight_decay >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ConfigError("epochs, batch_size and hidden must be >= 1")


def _uniform(gen: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return gen.uniform(-bound, bound, size=shape)


def _init_mlp(gen: np.random.Generator, d: int, hidden: int) -> MlpParams:
    return MlpParams(
        w1=_uniform(gen, (hidden, d), d),
        b1=np.zeros(hidden),
        w2=np.zeros((d, hidden)),
        b2=np.zeros(d),
    )


def init_params(
    levels: Sequence[LevelId],
    dim: int,
    n_domains: int,
    cfg: TrainConfig,
    previous: Optional[MdfnParams] = None,
) -> MdfnParams:
    """Fresh parameters, or (warm start) `previous` with the head grown to n_domains."""
    levels = tuple(levels)
    gen = cfg.seed.child("init", n_domains).generator()
    if previous is not None and cfg.warm_start and previous.levels == levels and previous.dim == dim:
        grow = n_domains - previous.n_domains
        if grow < 0:
            raise DimMismatchError("cannot shrink the domain head")
        w = np.vstack([previous.g3.w, np.zeros((grow, dim))])
        b = np.concatenate([previous.g3.b, np.zeros(grow)])
        return MdfnParams(levels, previous.aux, previous.g2, HeadParams(w, b), previous.activation)
    if cfg.fusion:
        aux = tuple(_init_mlp(gen, dim, cfg.hidden) for _ in levels[:-1])
        g2 = _init_mlp(gen, dim, cfg.hidden)
    else:
        aux, g2 = (), None
    head = HeadParams(w=_uniform(gen, (n_domains, dim), dim), b=np.zeros(n_domains))
    return MdfnParams(levels, aux, g2, head, cfg.activation)


# ============================================================================
# Forward pass
# ============================================================================

def _mlp_forward(m: MlpParams, X: np.ndarray, kind: Activation):
    h = X @ m.w1.T + m.b1
    a = _act(kind, h)
    return h, a, a @ m.w2.T + m.b2


def _level_arrays(features: Mapping[LevelId, FeatureMatrix] | Mapping[LevelId, np.ndarray], params: MdfnParams):
    arrays = []
    for lvl in params.levels:
        if lvl not in features:
            raise IncompleteStoreError(f"features lack level '{lvl}'")
        arr = features[lvl]
        arr = arr.data if isinstance(arr, FeatureMatrix) else np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.shape[1] != params.dim:
            raise DimMismatchError(f"level '{lvl}' has dim {arr.shape[1]}, network expects {params.dim}")
        arrays.append(arr)
    rows = {a.shape[0] for a in arrays}
    if len(rows) != 1:
        raise DimMismatchError(f"levels disagree on row count: {sorted(rows)}")
    return arrays


def _fuse(arrays: Sequence[np.ndarray], params: MdfnParams):
    """Fused features plus the cache needed for backprop."""
    x_last = arrays[-1]
    fused = x_last.copy()
    cache = []
    if params.fusion:
        for m, x in zip(params.mlps, list(arrays[:-1]) + [x_last]):
            h, a, out = _mlp_forward(m, x, params.activation)
            fused = fused + out
            cache.append((x, h, a))
    return fused, cache


def fuse_batch(features: Mapping[LevelId, FeatureMatrix], params: MdfnParams) -> np.ndarray:
    return _fuse(_level_arrays(features, params), params)[0]


def forward_fuse(x_mid: Sequence[float], x_last: Sequence[float], params: MdfnParams) -> np.ndarray:
    """x_last + g1(x_mid) + g2(x_last) for one sample of the two-level network."""
    x_mid = np.asarray(x_mid, dtype=np.float64).reshape(-1)
    x_last = np.asarray(x_last, dtype=np.float64).reshape(-1)
    if x_mid.shape != x_last.shape:
        raise DimMismatchError(f"x_mid dim {x_mid.shape[0]} vs x_last dim {x_last.shape[0]}")
    if len(params.levels) != 2:
        raise DimMismatchError(f"forward_fuse needs a two-level network, got {len(params.levels)} levels")
    feats = {params.levels[0]: x_mid, params.levels[1]: x_last}
    return fuse_batch(feats, params)[0]


def forward_logits(x_fused: np.ndarray, head: HeadParams) -> np.ndarray:
    x = np.asarray(x_fused, dtype=np.float64)
    if x.shape[-1] != head.w.shape[1]:
        raise DimMismatchError(f"fused dim {x.shape[-1]} vs head input {head.w.shape[1]}")
    return x @ head.w.T + head.b


def cross_entropy(logits: Sequence[float], label: int) -> float:
    """-log softmax(logits)[label], via log-sum-exp."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not 0 <= int(label) < z.shape[0]:
        raise BadLabelError(f"label {label} outside 0..{z.shape[0] - 1}")
    return float(logsumexp(z) - z[int(label)])


# ============================================================================
# Backprop and SGD
# ============================================================================

def loss_and_grad(batch: LabeledBatch, params: MdfnParams) -> tuple[float, MdfnParams]:
    """Mean cross-entropy over the batch and its exact gradient for every tensor."""
    if batch.n_rows == 0:
        raise EmptyInputError("empty batch")
    arrays = _level_arrays(batch.features, params)
    labels = batch.labels
    t = params.n_domains
    if labels.max() >= t:
        raise BadLabelError(f"label {int(labels.max())} outside 0..{t - 1}")
    n = labels.shape[0]

    fused, cache = _fuse(arrays, params)
    logits = fused @ params.g3.w.T + params.g3.b
    log_norm = logsumexp(logits, axis=1)
    loss = float(np.mean(log_norm - logits[np.arange(n), labels]))

    dlogits = np.exp(logits - log_norm[:, None])
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    head_grad = HeadParams(w=dlogits.T @ fused, b=dlogits.sum(axis=0))
    dfused = dlogits @ params.g3.w

    mlp_grads = []
    for m, (x, h, a) in zip(params.mlps, cache):
        dw2 = dfused.T @ a
        db2 = dfused.sum(axis=0)
        dh = (dfused @ m.w2) * _act_grad(params.activation, h, a)
        mlp_grads.append(MlpParams(w1=dh.T @ x, b1=dh.sum(axis=0), w2=dw2, b2=db2))

    n_aux = len(params.aux)
    grads = MdfnParams(
        params.levels,
        tuple(mlp_grads[:n_aux]),
        mlp_grads[n_aux] if params.fusion else None,
        head_grad,
        params.activation,
    )
    return loss, grads


def sgd_step(params: MdfnParams, grads: MdfnParams, cfg: TrainConfig) -> MdfnParams:
    """w <- w - lr * (grad + weight_decay * w); biases skip weight decay."""
    lr, wd = cfg.learning_rate, cfg.weight_decay

    def step(name: str, w: np.ndarray, g: np.ndarray) -> np.ndarray:
        if name.endswith(("b1", "b2", ".b")):
            return w - lr * g
        return w - lr * (g + wd * w)

    return params.map_arrays(step, grads)


def train(
    batch: LabeledBatch,
    t: int,
    cfg: TrainConfig = TrainConfig(),
    levels: Optional[Sequence[LevelId]] = None,
    previous: Optional[MdfnParams] = None,
) -> tuple[MdfnParams, list[float]]:
    """Minibatch SGD for cfg.epochs epochs; returns params and per-epoch mean loss.

    Each epoch reshuffles rows with cfg.seed.child("epoch", e).
    """
    if batch.n_rows == 0:
        raise EmptyInputError("cannot train on an empty batch")
    levels = tuple(levels) if levels is not None else (MID, LAST)
    dim = batch.level(levels[-1]).dim
    params = init_params(levels, dim, t, cfg, previous)
    n = batch.n_rows
    curve = []
    for epoch in range(cfg.epochs):
        order = cfg.seed.child("epoch", epoch).generator().permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grad(batch.take(rows), params)
            params = sgd_step(params, grads, cfg)
            total += loss * rows.shape[0]
        curve.append(total / n)
    logger.debug("MDFN t=%d: loss %.4f -> %.4f over %d epochs", t, curve[0], curve[-1], cfg.epochs)
    return params, curve


# ============================================================================
# Prediction
# ============================================================================

def predict_batch(features: Mapping[LevelId, FeatureMatrix], params: MdfnParams) -> tuple[np.ndarray, np.ndarray]:
    """Domain ids (argmax, lowest index on ties) and probability rows."""
    logits = forward_logits(fuse_batch(features, params), params.g3)
    return np.argmax(logits, axis=1).astype(np.int64), stable_softmax(logits)


def predict(x_mid: Sequence[float], x_last: Sequence[float], params: MdfnParams) -> tuple[int, np.ndarray]:
    logits = forward_logits(forward_fuse(x_mid, x_last, params), params.g3)
    return int(np.argmax(logits)), stable_softmax(logits)


# ============================================================================
# Gradient checking
# ============================================================================

def finite_difference_grad(batch: LabeledBatch, params: MdfnParams, eps: float = 1e-5) -> MdfnParams:
    """Central differences of the mean loss, one coordinate at a time."""
    def numeric(name: str, w: np.ndarray) -> np.ndarray:
        grad = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            bump = np.zeros_like(w)
            bump[idx] = eps

            def shifted(sign: float) -> float:
                moved = params.map_arrays(lambda n, a: a + sign * bump if n == name else a)
                return loss_and_grad(batch, moved)[0]

            grad[idx] = (shifted(1.0) - shifted(-1.0)) / (2.0 * eps)
        return grad

    return params.map_arrays(numeric)


def gradient_relative_error(analytic: MdfnParams, numeric: MdfnParams) -> dict[str, float]:
    """Per-tensor ||a - n|| / max(||a||, ||n||, 1e-12)."""
    out = {}
    for (name, a), (_, n) in zip(analytic.named_arrays(), numeric.named_arrays()):
        scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), 1e-12)
        out[name] = float(np.linalg.norm(a - n)) / scale
    return out
