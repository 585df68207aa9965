#!/usr/bin/env python3
"""
INI configuration for the SOYO tools.

Sections and keys (all optional; unknown ones are rejected):

  [stream]     n_domains, dim, classes_per_domain, train_per_domain,
               test_per_domain, domain_separation, class_offset_scale,
               within_noise, level_correlation, levels (comma list, shallow first)
  [em]         max_iter, rel_tol, var_floor, n_restarts, init, cov_kind
  [compressor] kind (gmm|meanstd|pca), k, n_components, auto_k, k_min, k_max
  [train]      learning_rate, weight_decay, epochs, batch_size, hidden,
               activation, fusion, warm_start
  [selectors]  n_centers, balance, n_pseudo (auto = size of current domain)
  [harness]    seed, backbone_params, expert_diagonal, expert_off_diagonal

Seed resolution: --seed, then $SOYO_SEED, then [harness] seed, then 0.
config_hash is the first 16 hex digits of SHA-256 over the sorted
"[section] key = value" rendering of the resolved values.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional

from gmc import CompressorConfig, CompressorKind, CovKind, EmConfig, InitKind
from harness import DEFAULT_BACKBONE_PARAMS, HarnessConfig, StreamConfig
from mdfn import Activation, TrainConfig
from soyo_core import ConfigError, LevelId, RngStream, get_logger

logger = get_logger(__name__)

SEED_ENV = "SOYO_SEED"

_BOOLEANS = configparser.ConfigParser.BOOLEAN_STATES


def _bool(text: str) -> bool:
    try:
        return _BOOLEANS[text.strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {text!r}") from None


def _levels(text: str) -> tuple[LevelId, ...]:
    levels = tuple(LevelId.parse(part) for part in text.split(",") if part.strip())
    if not levels:
        raise ValueError("at least one level is required")
    return levels


def _choice(*allowed: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        value = text.strip()
        if value not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}, got {value!r}")
        return value
    return parse


def _optional_int(text: str) -> Optional[int]:
    return None if text.strip().lower() == "auto" else int(text)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], object], object]]] = {
    "stream": {
        "n_domains": (int, 4),
        "dim": (int, 32),
        "classes_per_domain": (int, 5),
        "train_per_domain": (int, 500),
        "test_per_domain": (int, 200),
        "domain_separation": (float, 3.0),
        "class_offset_scale": (float, 2.0),
        "within_noise": (float, 1.0),
        "level_correlation": (float, 0.5),
        "levels": (_levels, (LevelId("mid"), LevelId("last"))),
    },
    "em": {
        "max_iter": (int, 200),
        "rel_tol": (float, 1e-6),
        "var_floor": (float, 1e-6),
        "n_restarts": (int, 3),
        "init": (_choice(*(k.value for k in InitKind)), InitKind.KMEANS_PLUS_PLUS.value),
        "cov_kind": (_choice(*(k.value for k in CovKind)), CovKind.DIAGONAL.value),
    },
    "compressor": {
        "kind": (_choice(*(k.value for k in CompressorKind)), CompressorKind.GMM.value),
        "k": (int, 2),
        "n_components": (int, 10),
        "auto_k": (_bool, False),
        "k_min": (int, 1),
        "k_max": (int, 10),
    },
    "train": {
        "learning_rate": (float, 0.01),
        "weight_decay": (float, 2e-4),
        "epochs": (int, 100),
        "batch_size": (int, 64),
        "hidden": (int, 16),
        "activation": (_choice(*(a.value for a in Activation)), Activation.RELU.value),
        "fusion": (_bool, True),
        "warm_start": (_bool, False),
    },
    "selectors": {
        "n_centers": (int, 5),
        "balance": (_bool, True),
        "n_pseudo": (_optional_int, None),
    },
    "harness": {
        "seed": (int, 0),
        "backbone_params": (int, DEFAULT_BACKBONE_PARAMS),
        "expert_diagonal": (float, 0.9),
        "expert_off_diagonal": (float, 0.5),
    },
}


def _render(value: object) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class SoyoConfig:
    """Resolved configuration: every key of SCHEMA with a typed value."""
    values: Mapping[str, Mapping[str, object]]

    def get(self, section: str, key: str):
        return self.values[section][key]

    def with_seed(self, seed: int) -> "SoyoConfig":
        values = {s: dict(kv) for s, kv in self.values.items()}
        values["harness"]["seed"] = int(seed)
        return SoyoConfig(values)

    @property
    def seed(self) -> int:
        return int(self.get("harness", "seed"))

    def canonical(self) -> str:
        lines = []
        for section in sorted(self.values):
            lines.append(f"[{section}]")
            lines.extend(f"{key} = {_render(self.values[section][key])}" for key in sorted(self.values[section]))
        return "\n".join(lines) + "\n"

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    # ------------------------------------------------------------------
    # Typed views
    # ------------------------------------------------------------------

    def stream_config(self) -> StreamConfig:
        s = self.values["stream"]
        try:
            return StreamConfig(
                n_domains=s["n_domains"],
                dim=s["dim"],
                classes_per_domain=s["classes_per_domain"],
                train_per_domain=s["train_per_domain"],
                test_per_domain=s["test_per_domain"],
                domain_separation=s["domain_separation"],
                class_offset_scale=s["class_offset_scale"],
                within_noise=s["within_noise"],
                level_correlation=s["level_correlation"],
                levels=s["levels"],
                seed=self.seed,
            )
        except ValueError as e:
            raise ConfigError(f"[stream] {e}") from e

    def em_config(self, label: str = "em") -> EmConfig:
        e = self.values["em"]
        try:
            return EmConfig(
                max_iter=e["max_iter"],
                rel_tol=e["rel_tol"],
                var_floor=e["var_floor"],
                n_restarts=e["n_restarts"],
                init=e["init"],
                cov_kind=e["cov_kind"],
                seed=RngStream(self.seed).child(label),
            )
        except ValueError as err:
            raise ConfigError(f"[em] {err}") from err

    def compressor_config(self) -> CompressorConfig:
        c = self.values["compressor"]
        try:
            return CompressorConfig(
                kind=c["kind"],
                k=c["k"],
                n_components=c["n_components"],
                auto_k=c["auto_k"],
                k_min=c["k_min"],
                k_max=c["k_max"],
                em=self.em_config(),
            )
        except ValueError as e:
            raise ConfigError(f"[compressor] {e}") from e

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        try:
            return TrainConfig(
                learning_rate=t["learning_rate"],
                weight_decay=t["weight_decay"],
                epochs=t["epochs"],
                batch_size=t["batch_size"],
                hidden=t["hidden"],
                activation=t["activation"],
                fusion=t["fusion"],
                warm_start=t["warm_start"],
                seed=RngStream(self.seed).child("train"),
            )
        except ValueError as e:
            raise ConfigError(f"[train] {e}") from e

    def harness_config(self, threads: int = 1, progress: bool = False) -> HarnessConfig:
        sel, h = self.values["selectors"], self.values["harness"]
        try:
            return HarnessConfig(
                train=self.train_config(),
                n_centers=sel["n_centers"],
                balance=sel["balance"],
                n_pseudo=sel["n_pseudo"],
                backbone_params=h["backbone_params"],
                expert_diagonal=h["expert_diagonal"],
                expert_off_diagonal=h["expert_off_diagonal"],
                seed=self.seed,
                threads=threads,
                progress=progress,
            )
        except ValueError as e:
            raise ConfigError(f"[harness] {e}") from e


def default_config() -> SoyoConfig:
    return SoyoConfig({s: {k: default for k, (_, default) in keys.items()} for s, keys in SCHEMA.items()})


def parse_config(text: str, source: str = "<config>") -> SoyoConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e
    if parser.defaults():
        raise ConfigError(f"{source}: [DEFAULT] section is not supported")
    values = {s: dict(kv) for s, kv in default_config().values.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key '{key}' in [{section}]")
            convert = SCHEMA[section][key][0]
            try:
                values[section][key] = convert(raw)
            except (ValueError, ConfigError) as e:
                raise ConfigError(f"{source}: [{section}] {key}: {e}") from e
    return SoyoConfig(values)


def load_config(path: Optional[Path]) -> SoyoConfig:
    if path is None:
        return default_config()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    logger.debug("loaded config %s", path)
    return parse_config(text, str(path))


def resolve_seed(flag: Optional[int], config: SoyoConfig, environ: Optional[Mapping[str, str]] = None) -> int:
    """--seed, then $SOYO_SEED, then the config's [harness] seed (default 0)."""
    if flag is not None:
        seed = flag
    else:
        env = os.environ if environ is None else environ
        raw = env.get(SEED_ENV)
        if raw is not None and raw.strip():
            try:
                seed = int(raw)
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
        else:
            seed = config.seed
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    return seed
