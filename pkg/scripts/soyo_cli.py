#!/usr/bin/env python3
"""
SOYO command-line tools.

Usage (global flags go before the subcommand):
  python scripts/soyo_cli.py [--seed N] [--config FILE] [--out DIR] [--threads N] [--quiet|--verbose] <command> ...

Commands:
  gen        generate a synthetic stream and write it as FEAT files
  fit-gmc    compress one FEAT file (GMM, mean/std or PCA) into a model store
  bic-sweep  BIC for K = k_min..k_max on one FEAT file
  resample   draw pseudo-features from a model store into FEAT files
  train      feed every domain of a stream to a selector; write its model store
  predict    per-sample domain predictions from a model store
  run        incremental sessions for one selector (CSV + JSON report)
  compare    SOYO (three compressors) vs NMC vs KMeans+KNN
  inspect    parameter counts and memory ratio of a model store
  ablate     SOYO+GMC over level subsets

Exit codes: 0 success, 1 usage or configuration error, 2 data or format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

# Scripts dir for sibling imports when run from the repo root
_SCRIPTS = Path(__file__).resolve().parent
if str(_SCRIPTS) not in sys.path:
    sys.path.insert(0, str(_SCRIPTS))

import numpy as np
import pandas as pd

from dfr import DomainStore, resample_domain
from domain_selectors import knn_predict_batch, nmc_predict_batch
from feat_io import read_feat, write_feat
from gmc import CompressorKind, GmmModel, bic, compress, mixture_logpdf_rows, param_count, select_k
from harness import (
    SPLITS,
    FeatureStream,
    SelectorKind,
    compare_selectors,
    export_stream,
    generate_stream,
    ingest_features,
    layer_ablation,
    make_selector,
    reports_frame,
    run_incremental,
    summary_frame,
)
from mdfn import fuse_batch, predict_batch
from model_store import ModelStore, load_store, save_store, summary_rows
from soyo_config import SoyoConfig, load_config, resolve_seed
from soyo_core import (
    ConfigError,
    FeatureMatrix,
    LabeledBatch,
    LevelId,
    RngStream,
    SoyoError,
    configure_logging,
    get_logger,
)

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
CSV_FLOAT_FORMAT = "%.10g"


class UsageError(Exception):
    pass


class SoyoArgumentParser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; these tools reserve 2 for data errors."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ============================================================================
# Output helpers
# ============================================================================

def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    print(f"  Written to: {path}")
    return path


def write_json(obj, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
    print(f"  Written to: {path}")
    return path


def _provenance(cfg: SoyoConfig) -> dict:
    return {"seed": cfg.seed, "config_hash": cfg.config_hash}


def _stream(args, cfg: SoyoConfig) -> FeatureStream:
    levels = cfg.get("stream", "levels")
    if args.stream is not None:
        stream = ingest_features(args.stream, levels)
        print(f"Loaded {stream.n_domains} domains from {args.stream}")
        return stream
    return generate_stream(cfg.stream_config())


def _harness(args, cfg: SoyoConfig):
    hcfg = cfg.harness_config(threads=args.threads, progress=not args.quiet)
    if getattr(args, "no_balance", False):
        hcfg = replace(hcfg, balance=False)
    return hcfg


def _compressor(args, cfg: SoyoConfig):
    comp = cfg.compressor_config()
    overrides = {}
    if getattr(args, "kind", None):
        overrides["kind"] = CompressorKind(args.kind)
    if getattr(args, "k", None) is not None:
        overrides["k"] = args.k
    if getattr(args, "n_components", None) is not None:
        overrides["n_components"] = args.n_components
    if getattr(args, "auto_k", False):
        overrides["auto_k"] = True
    return replace(comp, **overrides) if overrides else comp


def _read_matrix(path: Path) -> FeatureMatrix:
    feat = read_feat(path)
    return FeatureMatrix(feat.features.astype(np.float64))


# ============================================================================
# Commands
# ============================================================================

def cmd_gen(args, cfg: SoyoConfig) -> int:
    stream = generate_stream(cfg.stream_config())
    target = args.stream or (args.out / "stream")
    paths = export_stream(stream, target)
    print(f"Generated {stream.n_domains} domains x {len(stream.levels)} levels: {len(paths)} FEAT files in {target}")
    write_json({**_provenance(cfg), "levels": [lvl.tag for lvl in stream.levels]}, target / "provenance.json")
    return EXIT_OK


def cmd_fit_gmc(args, cfg: SoyoConfig) -> int:
    X = _read_matrix(args.features)
    comp = _compressor(args, cfg)
    level = LevelId.parse(args.level)
    model = compress(X, comp, RngStream(cfg.seed).child("fit-gmc"), n_jobs=args.threads)
    print(f"Fitted {comp.label} on {X.n_rows} x {X.dim} features: {param_count(model)} parameters")
    if isinstance(model, GmmModel):
        ll = float(mixture_logpdf_rows(X, model).sum())
        print(f"  K={model.k}  log-likelihood={ll:.6f}  BIC={bic(model, X):.6f}")
    ds = DomainStore((level,))
    ds.append({level: model}, X.n_rows)
    store = ModelStore(
        levels=(level,), records=ds.records, seed=cfg.seed, config_hash=cfg.config_hash, compressor=comp.label,
    )
    path = args.out / "fit_gmc.json"
    save_store(path, store)
    print(f"  Written to: {path}")
    return EXIT_OK


def cmd_bic_sweep(args, cfg: SoyoConfig) -> int:
    X = _read_matrix(args.features)
    em = cfg.em_config("bic-sweep")
    best, table = select_k(X, range(args.k_min, args.k_max + 1), em, n_jobs=args.threads)
    frame = pd.DataFrame(table, columns=["k", "bic"])
    print(frame.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print(f"\nBest K by BIC: {best}")
    write_csv(frame, args.out / "bic_sweep.csv")
    return EXIT_OK


def cmd_resample(args, cfg: SoyoConfig) -> int:
    store = load_store(args.store)
    rng = RngStream(cfg.seed).child("resample")
    domains = [args.domain] if args.domain is not None else range(len(store.records))
    for tau in domains:
        if not 0 <= tau < len(store.records):
            raise UsageError(f"--domain {tau} outside 0..{len(store.records) - 1}")
        rec = store.records[tau]
        n = args.n if args.n is not None else rec.n_samples
        for pseudo in resample_domain(rec.models, tau, n, rng, store.levels):
            path = args.out / f"d{tau:02d}_pseudo_{pseudo.level.tag}.feat"
            write_feat(path, pseudo.features.data, np.full(n, tau))
            print(f"  Domain {tau + 1}, level {pseudo.level}: {n} rows -> {path}")
    return EXIT_OK


def cmd_train(args, cfg: SoyoConfig) -> int:
    stream = _stream(args, cfg)
    hcfg = _harness(args, cfg)
    selector = make_selector(SelectorKind(args.selector), stream.levels, _compressor(args, cfg), hcfg)
    for dom in stream.domains:
        selector.learn_domain(dom.train.features)
        print(f"  Session {dom.domain + 1}: {selector.name} memory={selector.memory_params()} extra={selector.extra_params()}")
    path = args.out / "model_store.json"
    save_store(path, ModelStore.from_selector(selector, cfg.seed, cfg.config_hash))
    print(f"  Written to: {path}")
    return EXIT_OK


def _predict(store: ModelStore, batch: LabeledBatch) -> tuple[np.ndarray, Optional[np.ndarray]]:
    if store.selector == "nmc":
        return nmc_predict_batch(store.baseline, batch.level(store.levels[-1])), None
    if store.selector == "kmeans_knn":
        return knn_predict_batch(store.baseline, batch.level(store.levels[-1])), None
    if store.mdfn is None:
        return np.zeros(batch.n_rows, dtype=np.int64), np.ones((batch.n_rows, 1))
    return predict_batch(batch.features, store.mdfn)


def cmd_predict(args, cfg: SoyoConfig) -> int:
    store = load_store(args.store)
    stream = _stream(args, cfg)
    batch = LabeledBatch.concat([dom.split(args.split) for dom in stream.domains])
    pred, probs = _predict(store, batch)
    frame = pd.DataFrame({"row": np.arange(batch.n_rows), "true_domain": batch.labels, "predicted": pred})
    if probs is not None:
        for j in range(probs.shape[1]):
            frame[f"p{j}"] = probs[:, j]
    accuracy = float(np.mean(pred == batch.labels))
    print(f"Predicted {batch.n_rows} {args.split} rows with {store.selector}: selection accuracy {accuracy:.4f}")
    write_csv(frame, args.out / "predictions.csv")
    if args.dump_fused:
        if store.mdfn is None:
            raise UsageError("--dump-fused needs a store with a trained fusion network")
        fused = fuse_batch(batch.features, store.mdfn)
        cols = {"true_domain": batch.labels}
        cols.update({f"f{j}": fused[:, j] for j in range(fused.shape[1])})
        write_csv(pd.DataFrame(cols), args.out / "fused.csv")
    return EXIT_OK


def cmd_run(args, cfg: SoyoConfig) -> int:
    stream = _stream(args, cfg)
    reports = run_incremental(stream, SelectorKind(args.selector), _compressor(args, cfg), _harness(args, cfg))
    frame = reports_frame(reports)
    print(frame[["session", "selector", "s_t", "a_t", "oracle_a_t", "f_t"]].to_string(index=False))
    stem = f"report_{args.selector}"
    write_csv(frame, args.out / f"{stem}.csv")
    write_json({**_provenance(cfg), "sessions": [r.to_dict() for r in reports]}, args.out / f"{stem}.json")
    return EXIT_OK


def _write_runs(results, cfg: SoyoConfig, out: Path, stem: str) -> None:
    summary = summary_frame(results)
    print(summary[["selector", "s_t", "a_t", "oracle_a_t", "memory_pct", "extra_pct"]].to_string(index=False))
    write_csv(summary, out / f"{stem}.csv")
    sessions = pd.concat([reports_frame(reports).assign(selector=label) for label, reports in results], ignore_index=True)
    write_csv(sessions, out / f"{stem}_sessions.csv")
    runs = [{"label": label, "sessions": [r.to_dict() for r in reports]} for label, reports in results]
    write_json({**_provenance(cfg), "runs": runs}, out / f"{stem}.json")


def cmd_compare(args, cfg: SoyoConfig) -> int:
    stream = _stream(args, cfg)
    results = compare_selectors(stream, _compressor(args, cfg), _harness(args, cfg), include_no_dfr=args.no_dfr_row)
    _write_runs(results, cfg, args.out, "compare")
    return EXIT_OK


def cmd_ablate(args, cfg: SoyoConfig) -> int:
    stream = _stream(args, cfg)
    results = layer_ablation(stream, _compressor(args, cfg), _harness(args, cfg))
    _write_runs(results, cfg, args.out, "ablation")
    return EXIT_OK


def cmd_inspect(args, cfg: SoyoConfig) -> int:
    store = load_store(args.store)
    backbone = cfg.get("harness", "backbone_params")
    rows = summary_rows(store)
    compressed = sum(r["params"] for r in rows)
    network = store.mdfn.param_count() if store.mdfn is not None else 0
    baseline = int(store.baseline.centroids.size if store.selector == "nmc" else store.baseline.centers.size) \
        if store.baseline is not None else 0
    print(f"Model store: selector={store.selector} compressor={store.compressor or '-'} "
          f"levels={','.join(lvl.tag for lvl in store.levels)} config_hash={store.config_hash}")
    if rows:
        print(pd.DataFrame(rows).to_string(index=False))
    print("\nParameter summary:")
    print("-" * 60)
    print(f"  Compressed store:   {compressed:>12,d}  ({100.0 * compressed / backbone:.6f}% of backbone)")
    print(f"  Fusion network:     {network:>12,d}  ({100.0 * network / backbone:.6f}% of backbone)")
    print(f"  Baseline centers:   {baseline:>12,d}  ({100.0 * baseline / backbone:.6f}% of backbone)")
    totals = pd.DataFrame([
        {"item": "compressed", "params": compressed, "pct_of_backbone": 100.0 * compressed / backbone},
        {"item": "mdfn", "params": network, "pct_of_backbone": 100.0 * network / backbone},
        {"item": "baseline", "params": baseline, "pct_of_backbone": 100.0 * baseline / backbone},
    ])
    write_csv(totals, args.out / "inspect.csv")
    return EXIT_OK


# ============================================================================
# Parser
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = SoyoArgumentParser(prog="soyo", description="SOYO domain selector: compress, resample, fuse, select")
    parser.add_argument("--seed", type=int, default=None, help="Random seed (falls back to $SOYO_SEED, then config)")
    parser.add_argument("--config", type=Path, default=None, help="INI configuration file")
    parser.add_argument("--out", type=Path, default=Path("out"), help="Output directory (default: out)")
    parser.add_argument("--threads", type=int, default=1, help="Worker threads; outputs do not depend on this")
    noise = parser.add_mutually_exclusive_group()
    noise.add_argument("--quiet", action="store_true", help="Warnings and errors only")
    noise.add_argument("--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=SoyoArgumentParser)

    def stream_arg(p):
        p.add_argument("--stream", type=Path, default=None, help="Directory of d<NN>_<split>_<level>.feat files")

    def compressor_args(p):
        p.add_argument("--kind", choices=[k.value for k in CompressorKind], default=None, help="Compressor")
        p.add_argument("--k", type=int, default=None, help="GMM components")
        p.add_argument("--n-components", type=int, default=None, help="PCA components")
        p.add_argument("--auto-k", action="store_true", help="Select K by BIC")

    def selector_args(p):
        p.add_argument("--selector", choices=[k.value for k in SelectorKind], default=SelectorKind.SOYO.value)
        p.add_argument("--no-balance", action="store_true", help="Train SOYO on the current domain only")

    p = sub.add_parser("gen", help="Generate a synthetic stream")
    stream_arg(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("fit-gmc", help="Compress one FEAT file")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--level", default="last", help="Level tag recorded in the store")
    compressor_args(p)
    p.set_defaults(func=cmd_fit_gmc)

    p = sub.add_parser("bic-sweep", help="BIC table over K")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--k-min", type=int, default=1)
    p.add_argument("--k-max", type=int, default=10)
    p.set_defaults(func=cmd_bic_sweep)

    p = sub.add_parser("resample", help="Pseudo-features from a model store")
    p.add_argument("--store", type=Path, required=True)
    p.add_argument("--n", type=int, default=None, help="Rows per domain (default: stored sample count)")
    p.add_argument("--domain", type=int, default=None, help="0-based domain (default: all)")
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("train", help="Train a selector over a stream")
    stream_arg(p)
    selector_args(p)
    compressor_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="Predict domains with a model store")
    p.add_argument("--store", type=Path, required=True)
    stream_arg(p)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--dump-fused", action="store_true", help="Also write fused features as CSV")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("run", help="Incremental sessions for one selector")
    stream_arg(p)
    selector_args(p)
    compressor_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="Compare all selectors")
    stream_arg(p)
    compressor_args(p)
    p.add_argument("--no-dfr-row", action="store_true", help="Add SOYO+GMC trained without resampling")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("inspect", help="Parameter counts of a model store")
    p.add_argument("--store", type=Path, required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("ablate", help="SOYO+GMC over level subsets")
    stream_arg(p)
    compressor_args(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    configure_logging(quiet=args.quiet, verbose=args.verbose)
    if args.threads < 1:
        print("Error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
        cfg = cfg.with_seed(resolve_seed(args.seed, cfg))
        return args.func(args, cfg)
    except (ConfigError, UsageError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SoyoError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
