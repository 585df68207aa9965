#!/usr/bin/env python3
"""
ModelStore: the persisted, privacy-safe state of a selector.

A JSON document holding, per (domain, level), one compressor record
(gmm | meanstd | pca), optionally the trained fusion network or the baseline
centroids/centers, and a provenance block (seed, config hash, levels).

Every real number is written as a decimal string with 17 significant digits,
which reproduces a float64 exactly on reload. Documents are validated with
jsonschema before any array is built; NaN and infinities fail the number
pattern and are reported with their JSON path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from jsonschema import Draft202012Validator
from jsonschema.exceptions import best_match

from dfr import DomainRecord, DomainStore
from domain_selectors import KmeansKnnModel, KmeansKnnSelector, NmcModel, NmcSelector, SoyoSelector
from gmc import CompressedModel, GmmModel, MeanStdModel, PcaModel, param_count
from mdfn import HeadParams, MdfnParams, MlpParams
from soyo_core import FormatError, LevelId, get_logger

logger = get_logger(__name__)

STORE_FORMAT = "soyo-model-store"
STORE_VERSION = 1

_NUMBER = r"^-?(0|[1-9][0-9]*)(\.[0-9]+)?([eE][-+]?[0-9]+)?$"

STORE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["format", "version", "provenance", "domains"],
    "additionalProperties": False,
    "properties": {
        "format": {"const": STORE_FORMAT},
        "version": {"const": STORE_VERSION},
        "provenance": {
            "type": "object",
            "required": ["seed", "config_hash", "levels", "selector", "compressor"],
            "additionalProperties": False,
            "properties": {
                "seed": {"type": "integer", "minimum": 0},
                "config_hash": {"type": "string"},
                "levels": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "selector": {"enum": ["soyo", "nmc", "kmeans_knn"]},
                "compressor": {"type": "string"},
            },
        },
        "domains": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["domain", "n_samples", "levels"],
                "additionalProperties": False,
                "properties": {
                    "domain": {"type": "integer", "minimum": 0},
                    "n_samples": {"type": "integer", "minimum": 0},
                    "levels": {"type": "object", "additionalProperties": {"$ref": "#/$defs/compressor"}},
                },
            },
        },
        "mdfn": {"$ref": "#/$defs/mdfn"},
        "baseline": {"$ref": "#/$defs/baseline"},
    },
    "$defs": {
        "num": {"type": "string", "pattern": _NUMBER},
        "vec": {"type": "array", "items": {"$ref": "#/$defs/num"}},
        "mat": {"type": "array", "items": {"$ref": "#/$defs/vec"}},
        "mat3": {"type": "array", "items": {"$ref": "#/$defs/mat"}},
        "compressor": {
            "oneOf": [
                {
                    "type": "object",
                    "required": ["kind", "cov_kind", "weights", "means", "covariances"],
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"const": "gmm"},
                        "cov_kind": {"enum": ["diagonal", "full"]},
                        "weights": {"$ref": "#/$defs/vec"},
                        "means": {"$ref": "#/$defs/mat"},
                        "covariances": {"anyOf": [{"$ref": "#/$defs/mat"}, {"$ref": "#/$defs/mat3"}]},
                    },
                },
                {
                    "type": "object",
                    "required": ["kind", "mean", "std"],
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"const": "meanstd"},
                        "mean": {"$ref": "#/$defs/vec"},
                        "std": {"$ref": "#/$defs/vec"},
                    },
                },
                {
                    "type": "object",
                    "required": ["kind", "mean", "components", "variances"],
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"const": "pca"},
                        "mean": {"$ref": "#/$defs/vec"},
                        "components": {"$ref": "#/$defs/mat"},
                        "variances": {"$ref": "#/$defs/vec"},
                    },
                },
            ]
        },
        "mlp": {
            "type": "object",
            "required": ["w1", "b1", "w2", "b2"],
            "additionalProperties": False,
            "properties": {
                "w1": {"$ref": "#/$defs/mat"},
                "b1": {"$ref": "#/$defs/vec"},
                "w2": {"$ref": "#/$defs/mat"},
                "b2": {"$ref": "#/$defs/vec"},
            },
        },
        "mdfn": {
            "type": "object",
            "required": ["levels", "activation", "aux", "g2", "head"],
            "additionalProperties": False,
            "properties": {
                "levels": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "activation": {"enum": ["relu", "tanh"]},
                "aux": {"type": "array", "items": {"$ref": "#/$defs/mlp"}},
                "g2": {"oneOf": [{"type": "null"}, {"$ref": "#/$defs/mlp"}]},
                "head": {
                    "type": "object",
                    "required": ["w", "b"],
                    "additionalProperties": False,
                    "properties": {"w": {"$ref": "#/$defs/mat"}, "b": {"$ref": "#/$defs/vec"}},
                },
            },
        },
        "baseline": {
            "oneOf": [
                {
                    "type": "object",
                    "required": ["kind", "centroids"],
                    "additionalProperties": False,
                    "properties": {"kind": {"const": "nmc"}, "centroids": {"$ref": "#/$defs/mat"}},
                },
                {
                    "type": "object",
                    "required": ["kind", "centers"],
                    "additionalProperties": False,
                    "properties": {"kind": {"const": "kmeans_knn"}, "centers": {"$ref": "#/$defs/mat3"}},
                },
            ]
        },
    },
}

_VALIDATOR = Draft202012Validator(STORE_SCHEMA)

Baseline = Union[NmcModel, KmeansKnnModel]


@dataclass
class ModelStore:
    levels: tuple[LevelId, ...]
    records: list[DomainRecord] = field(default_factory=list)
    mdfn: Optional[MdfnParams] = None
    baseline: Optional[Baseline] = None
    seed: int = 0
    config_hash: str = ""
    selector: str = "soyo"
    compressor: str = ""

    def domain_store(self) -> DomainStore:
        store = DomainStore(self.levels)
        for rec in self.records:
            store.append(rec.models, rec.n_samples)
        return store

    @classmethod
    def from_selector(cls, selector, seed: int, config_hash: str) -> "ModelStore":
        if isinstance(selector, SoyoSelector):
            return cls(
                levels=selector.levels,
                records=list(selector.store.records),
                mdfn=selector.params,
                seed=seed,
                config_hash=config_hash,
                selector="soyo",
                compressor=selector.compressor.label,
            )
        if isinstance(selector, NmcSelector):
            kind = "nmc"
        elif isinstance(selector, KmeansKnnSelector):
            kind = "kmeans_knn"
        else:
            raise TypeError(f"cannot persist {type(selector).__name__}")
        return cls(
            levels=(selector.level,), baseline=selector.model, seed=seed, config_hash=config_hash, selector=kind,
        )


# ============================================================================
# Encoding
# ============================================================================

def _enc(arr: np.ndarray):
    """float64 array -> nested lists of %.17g strings."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 0:
        return "%.17g" % float(arr)
    return [_enc(a) for a in arr]


def _dec(nested) -> np.ndarray:
    def walk(x):
        return float(x) if isinstance(x, str) else [walk(v) for v in x]
    return np.array(walk(nested), dtype=np.float64)


def _encode_model(model: CompressedModel) -> dict:
    if isinstance(model, GmmModel):
        return {
            "kind": "gmm",
            "cov_kind": model.cov_kind.value,
            "weights": _enc(model.weights),
            "means": _enc(model.means),
            "covariances": _enc(model.covariances),
        }
    if isinstance(model, MeanStdModel):
        return {"kind": "meanstd", "mean": _enc(model.mean), "std": _enc(model.std)}
    if isinstance(model, PcaModel):
        return {
            "kind": "pca",
            "mean": _enc(model.mean),
            "components": _enc(model.components),
            "variances": _enc(model.component_variances),
        }
    raise TypeError(f"cannot encode {type(model).__name__}")


def _decode_model(doc: dict) -> CompressedModel:
    kind = doc["kind"]
    if kind == "gmm":
        return GmmModel(_dec(doc["weights"]), _dec(doc["means"]), _dec(doc["covariances"]), doc["cov_kind"])
    if kind == "meanstd":
        return MeanStdModel(_dec(doc["mean"]), _dec(doc["std"]))
    return PcaModel(_dec(doc["mean"]), _dec(doc["components"]), _dec(doc["variances"]))


def _encode_mlp(m: MlpParams) -> dict:
    return {"w1": _enc(m.w1), "b1": _enc(m.b1), "w2": _enc(m.w2), "b2": _enc(m.b2)}


def _decode_mlp(doc: dict) -> MlpParams:
    return MlpParams(_dec(doc["w1"]), _dec(doc["b1"]), _dec(doc["w2"]), _dec(doc["b2"]))


def _encode_mdfn(p: MdfnParams) -> dict:
    return {
        "levels": [lvl.tag for lvl in p.levels],
        "activation": p.activation.value,
        "aux": [_encode_mlp(m) for m in p.aux],
        "g2": _encode_mlp(p.g2) if p.g2 is not None else None,
        "head": {"w": _enc(p.g3.w), "b": _enc(p.g3.b)},
    }


def _decode_mdfn(doc: dict) -> MdfnParams:
    return MdfnParams(
        levels=tuple(LevelId(tag) for tag in doc["levels"]),
        aux=tuple(_decode_mlp(m) for m in doc["aux"]),
        g2=_decode_mlp(doc["g2"]) if doc["g2"] is not None else None,
        g3=HeadParams(_dec(doc["head"]["w"]), _dec(doc["head"]["b"])),
        activation=doc["activation"],
    )


def _encode_baseline(model: Baseline) -> dict:
    if isinstance(model, NmcModel):
        return {"kind": "nmc", "centroids": _enc(model.centroids)}
    return {"kind": "kmeans_knn", "centers": _enc(model.centers)}


def _decode_baseline(doc: dict) -> Baseline:
    if doc["kind"] == "nmc":
        return NmcModel(_dec(doc["centroids"]))
    return KmeansKnnModel(_dec(doc["centers"]))


def store_to_dict(store: ModelStore) -> dict:
    doc = {
        "format": STORE_FORMAT,
        "version": STORE_VERSION,
        "provenance": {
            "seed": int(store.seed),
            "config_hash": store.config_hash,
            "levels": [lvl.tag for lvl in store.levels],
            "selector": store.selector,
            "compressor": store.compressor,
        },
        "domains": [
            {
                "domain": rec.domain,
                "n_samples": rec.n_samples,
                "levels": {lvl.tag: _encode_model(rec.models[lvl]) for lvl in store.levels if lvl in rec.models},
            }
            for rec in store.records
        ],
    }
    if store.mdfn is not None:
        doc["mdfn"] = _encode_mdfn(store.mdfn)
    if store.baseline is not None:
        doc["baseline"] = _encode_baseline(store.baseline)
    return doc


def dumps_store(store: ModelStore) -> str:
    return json.dumps(store_to_dict(store), indent=2) + "\n"


def _json_path(parts) -> str:
    return "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in parts)


def store_from_dict(doc: dict) -> ModelStore:
    error = best_match(_VALIDATOR.iter_errors(doc))
    if error is not None:
        raise FormatError(f"invalid model store: {error.message}", _json_path(error.absolute_path))
    prov = doc["provenance"]
    levels = tuple(LevelId(tag) for tag in prov["levels"])
    records = []
    for i, rec in enumerate(doc["domains"]):
        if rec["domain"] != i:
            raise FormatError(f"domain {rec['domain']} out of order", f"$.domains[{i}].domain")
        try:
            models = {LevelId(tag): _decode_model(m) for tag, m in rec["levels"].items()}
        except ValueError as e:
            raise FormatError(f"bad compressor record: {e}", f"$.domains[{i}].levels") from e
        records.append(DomainRecord(domain=i, n_samples=rec["n_samples"], models=models))
    try:
        mdfn = _decode_mdfn(doc["mdfn"]) if "mdfn" in doc else None
        baseline = _decode_baseline(doc["baseline"]) if "baseline" in doc else None
    except ValueError as e:
        raise FormatError(f"bad parameter block: {e}", "$") from e
    return ModelStore(
        levels=levels,
        records=records,
        mdfn=mdfn,
        baseline=baseline,
        seed=prov["seed"],
        config_hash=prov["config_hash"],
        selector=prov["selector"],
        compressor=prov["compressor"],
    )


def loads_store(text: str) -> ModelStore:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"not JSON: {e.msg}", e.pos) from None
    return store_from_dict(doc)


def save_store(path: Path, store: ModelStore) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_store(store), encoding="utf-8")
    logger.debug("model store written to %s", path)


def load_store(path: Path) -> ModelStore:
    return loads_store(Path(path).read_text(encoding="utf-8"))


def summary_rows(store: ModelStore) -> list[dict]:
    """One row per (domain, level) with the stored parameter count."""
    rows = []
    for rec in store.records:
        for lvl in store.levels:
            model = rec.models.get(lvl)
            if model is None:
                continue
            rows.append({
                "domain": rec.domain + 1,
                "level": lvl.tag,
                "kind": type(model).__name__,
                "n_samples": rec.n_samples,
                "params": param_count(model),
            })
    return rows
