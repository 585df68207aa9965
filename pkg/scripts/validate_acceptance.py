#!/usr/bin/env python3
"""
Validate the SOYO pipeline end to end: EM, BIC, resampling, gradients,
balancing, selector ordering, oracle gap, memory accounting, determinism.

Run from repo root:
  python scripts/validate_acceptance.py            # full checks (a few minutes)
  python scripts/validate_acceptance.py --quick    # fewer seeds and instances

Checks:
1.  EM log-likelihood traces never decrease
2.  K=1 fit equals the closed-form mean / population covariance
3.  BIC recovers K=3 on well-separated 2-D mixtures
4.  GMM resampling matches the mixture mean and component weights
5.  Analytic MDFN gradients match central differences
6.  Balanced batches hold exactly N_t rows per domain
7.  SOYO+GMC beats NMC and KMeans+KNN; resampling protects prior domains
8.  A_T never exceeds the oracle, which equals the diagonal expectation
9.  Stored parameter counts equal the closed-form formulas
10. gen + run + compare outputs are byte-identical across reruns and threads
"""

import argparse
import sys
import tempfile
import time
from pathlib import Path

# Scripts dir for imports
_SCRIPTS = Path(__file__).resolve().parent
if str(_SCRIPTS) not in sys.path:
    sys.path.insert(0, str(_SCRIPTS))

import numpy as np

from dfr import DomainStore, build_balanced_batch, sample_components, sample_gmm
from gmc import (
    CompressorConfig,
    CompressorKind,
    CovKind,
    EmConfig,
    fit_gmm,
    fit_meanstd,
    fit_pca,
    gmm_param_formula,
    param_count,
    select_k,
)
from harness import HarnessConfig, SelectorKind, StreamConfig, generate_stream, run_incremental
from mdfn import Activation, TrainConfig, finite_difference_grad, gradient_relative_error, init_params, loss_and_grad
from model_store import ModelStore, dumps_store, loads_store, summary_rows
from soyo_cli import cli_main
from soyo_core import DEFAULT_LEVELS, FeatureMatrix, LabeledBatch, LevelId, RngStream

Check = tuple[str, bool, str]


def _blobs(gen: np.random.Generator, n: int, d: int, k: int, spread: float = 4.0) -> np.ndarray:
    centers = gen.normal(0.0, spread, size=(k, d))
    labels = gen.integers(0, k, size=n)
    return centers[labels] + gen.normal(size=(n, d))


def check_em_monotone(n_instances: int) -> Check:
    worst = 0.0
    for i in range(n_instances):
        gen = RngStream(1).child("em-monotone", i).generator()
        d = int(gen.integers(1, 17))
        k = int(gen.integers(1, 6))
        n = int(gen.integers(max(k, 50), 2001))
        X = FeatureMatrix(_blobs(gen, n, d, k))
        _, trace = fit_gmm(X, k, EmConfig(n_restarts=1, seed=RngStream(1).child("em", i)))
        steps = np.diff(trace)
        tol = 1e-8
        worst = min(worst, float(np.min(steps + tol))) if steps.size else worst
    return ("EM traces non-decreasing", worst >= 0.0, f"{n_instances} instances, worst slack {worst:.3g}")


def check_k1_exact(n_instances: int) -> Check:
    err = 0.0
    for i in range(n_instances):
        gen = RngStream(2).child("k1", i).generator()
        d = int(gen.integers(1, 9))
        X = gen.normal(size=(200, d)) @ gen.normal(size=(d, d)) + gen.normal(size=d)
        model, _ = fit_gmm(FeatureMatrix(X), 1, EmConfig(cov_kind=CovKind.FULL, n_restarts=1))
        diff = X - X.mean(axis=0)
        err = max(err, float(np.max(np.abs(model.means[0] - X.mean(axis=0)))))
        err = max(err, float(np.max(np.abs(model.covariances[0] - diff.T @ diff / X.shape[0]))))
    return ("K=1 closed form", err <= 1e-10, f"max abs error {err:.3g}")


def check_bic_recovery(n_seeds: int) -> Check:
    centers = np.array([[0.0, 0.0], [8.0, 0.0], [4.0, 7.0]])
    hits = 0
    for s in range(n_seeds):
        gen = RngStream(3).child("bic", s).generator()
        X = centers[gen.integers(0, 3, size=1000)] + gen.normal(size=(1000, 2))
        best, _ = select_k(FeatureMatrix(X), range(1, 11), EmConfig(seed=RngStream(3).child("bic-em", s)))
        hits += best == 3
    need = int(np.ceil(0.9 * n_seeds))
    return ("BIC recovers K=3", hits >= need, f"{hits}/{n_seeds} seeds (need {need})")


def check_resampling() -> Check:
    gen = RngStream(4).child("data").generator()
    model, _ = fit_gmm(FeatureMatrix(_blobs(gen, 1500, 4, 3)), 3, EmConfig(seed=RngStream(4)))
    n = 100_000
    rng = RngStream(4).child("draw")
    draws = sample_gmm(model, n, rng).data
    second = model.weights @ (model.covariances + model.means ** 2)
    mix_mean = model.mixture_mean()
    sigma_max = float(np.sqrt(np.max(second - mix_mean ** 2)))
    mean_err = float(np.max(np.abs(draws.mean(axis=0) - mix_mean)))
    freq = np.bincount(sample_components(model.weights, n, rng.child("components")), minlength=model.k) / n
    freq_err = float(np.max(np.abs(freq - model.weights)))
    ok = mean_err <= 5 * sigma_max / np.sqrt(n) and freq_err <= 0.01
    return ("Resampling fidelity", ok, f"mean err {mean_err:.4g} (bound {5 * sigma_max / np.sqrt(n):.4g}), freq err {freq_err:.4g}")


def check_gradients(n_instances: int) -> Check:
    worst = 0.0
    for i in range(n_instances):
        gen = RngStream(5).child("grad", i).generator()
        d = int(gen.integers(2, 9))
        t = int(gen.integers(2, 5))
        act = Activation.TANH if i % 2 else Activation.RELU
        cfg = TrainConfig(hidden=int(gen.integers(2, 9)), activation=act, seed=RngStream(5).child("init", i))
        params = init_params(DEFAULT_LEVELS, d, t, cfg)
        params = params.map_arrays(lambda name, a: a + 0.3 * gen.normal(size=a.shape))
        batch = LabeledBatch(
            {lvl: FeatureMatrix(gen.normal(size=(12, d))) for lvl in DEFAULT_LEVELS},
            gen.integers(0, t, size=12),
        )
        _, analytic = loss_and_grad(batch, params)
        errors = gradient_relative_error(analytic, finite_difference_grad(batch, params))
        worst = max(worst, max(errors.values()))
    return ("MDFN gradients", worst < 1e-4, f"max relative error {worst:.3g}")


def check_balance() -> Check:
    gen = RngStream(6).child("balance").generator()
    d = 6
    bad = []
    for t in (2, 3, 4, 5):
        store = DomainStore(DEFAULT_LEVELS)
        for tau in range(t - 1):
            store.append({lvl: fit_meanstd(FeatureMatrix(gen.normal(tau, 1.0, size=(30, d)))) for lvl in DEFAULT_LEVELS}, 30)
        n_t = int(gen.integers(10, 60))
        current = {lvl: FeatureMatrix(gen.normal(size=(n_t, d))) for lvl in DEFAULT_LEVELS}
        batch = build_balanced_batch(store.models(), current, n_t, RngStream(6).child("batch", t))
        counts = np.bincount(batch.labels, minlength=t)
        if not np.all(counts == n_t):
            bad.append(f"t={t}: {counts.tolist()}")
    return ("Balanced batches", not bad, "; ".join(bad) or "N_t rows per label for t=2..5")


def check_selectors(n_seeds: int) -> list[Check]:
    s_t = {"soyo": [], "nmc": [], "kmeans_knn": []}
    prior = {"balanced": [], "unbalanced": []}
    oracle_ok = True
    oracle_msg = "A_T <= oracle and oracle == 0.9 on every session"
    comp = CompressorConfig(kind=CompressorKind.GMM, k=2)
    for s in range(n_seeds):
        stream = generate_stream(StreamConfig(seed=s))
        cfg = HarnessConfig(train=TrainConfig(seed=RngStream(s).child("train")), seed=s)
        runs = {kind.value: run_incremental(stream, kind, comp, cfg) for kind in SelectorKind}
        unbalanced = run_incremental(stream, SelectorKind.SOYO, comp, HarnessConfig(train=cfg.train, seed=s, balance=False))
        for name, reports in runs.items():
            s_t[name].append(reports[-1].s_t)
            for r in reports:
                if r.a_t > r.oracle_a_t + 1e-12 or abs(r.oracle_a_t - 0.9) > 1e-12:
                    oracle_ok = False
                    oracle_msg = f"seed {s} {name} session {r.session}: A_T {r.a_t}, oracle {r.oracle_a_t}"
        prior["balanced"].append(runs["soyo"][-1].prior_s_t)
        prior["unbalanced"].append(unbalanced[-1].prior_s_t)
    means = {k: 100.0 * float(np.mean(v)) for k, v in s_t.items()}
    margin = min(means["soyo"] - means["nmc"], means["soyo"] - means["kmeans_knn"])
    prior_gap = 100.0 * (np.mean(prior["balanced"]) - np.mean(prior["unbalanced"]))
    return [
        ("SOYO+GMC beats baselines by 3 points", margin >= 3.0,
         f"S_T soyo {means['soyo']:.2f}, nmc {means['nmc']:.2f}, kmeans_knn {means['kmeans_knn']:.2f}"),
        ("Resampling protects prior domains by 10 points", prior_gap >= 10.0, f"prior-domain gap {prior_gap:.2f}"),
        ("Oracle gap", oracle_ok, oracle_msg),
    ]


def check_memory_identity() -> Check:
    gen = RngStream(9).child("memory").generator()
    combos = [
        (CompressorKind.GMM, CovKind.DIAGONAL, 1, 4), (CompressorKind.GMM, CovKind.DIAGONAL, 2, 32),
        (CompressorKind.GMM, CovKind.DIAGONAL, 5, 8), (CompressorKind.GMM, CovKind.FULL, 1, 3),
        (CompressorKind.GMM, CovKind.FULL, 2, 6), (CompressorKind.GMM, CovKind.FULL, 3, 4),
        (CompressorKind.MEANSTD, None, 0, 8), (CompressorKind.MEANSTD, None, 0, 32),
        (CompressorKind.MEANSTD, None, 0, 1), (CompressorKind.PCA, None, 1, 8),
        (CompressorKind.PCA, None, 4, 16), (CompressorKind.PCA, None, 10, 32),
    ]
    bad = []
    for kind, cov, k, d in combos:
        X = FeatureMatrix(_blobs(gen, 200, d, max(k, 1)))
        if kind is CompressorKind.GMM:
            model, _ = fit_gmm(X, k, EmConfig(cov_kind=cov, n_restarts=1))
            expected = gmm_param_formula(k, d, cov)
        elif kind is CompressorKind.MEANSTD:
            model, expected = fit_meanstd(X), 2 * d
        else:
            model, expected = fit_pca(X, k), d + k * d + k
        lvl = LevelId("last")
        ds = DomainStore((lvl,))
        ds.append({lvl: model}, X.n_rows)
        reloaded = loads_store(dumps_store(ModelStore(levels=(lvl,), records=ds.records)))
        counted = summary_rows(reloaded)[0]["params"]
        if counted != expected or param_count(model) != expected:
            bad.append(f"{kind.value} k={k} d={d}: {counted} vs {expected}")
    return ("Memory accounting identity", not bad, "; ".join(bad) or f"{len(combos)} combinations match")


_SMALL_CONFIG = """\
[stream]
n_domains = 3
dim = 8
train_per_domain = 120
test_per_domain = 60

[train]
epochs = 10
"""


def _cli_outputs(root: Path, threads: int) -> dict[str, bytes]:
    config = root / "small.ini"
    config.write_text(_SMALL_CONFIG, encoding="utf-8")
    out = root / "out"
    base = ["--seed", "7", "--config", str(config), "--out", str(out), "--threads", str(threads), "--quiet"]
    for argv in (["gen"], ["run", "--stream", str(out / "stream")], ["compare", "--stream", str(out / "stream")]):
        if cli_main(base + argv) != 0:
            raise RuntimeError(f"cli {' '.join(argv)} failed")
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def check_determinism() -> Check:
    runs = []
    for threads in (1, 1, 3):
        with tempfile.TemporaryDirectory() as tmp:
            runs.append(_cli_outputs(Path(tmp), threads))
    same = all(r == runs[0] for r in runs[1:])
    return ("Byte-identical CLI outputs", same, f"{len(runs[0])} files compared over 3 executions")


def validate(quick: bool) -> list[Check]:
    steps = [
        lambda: [check_em_monotone(10 if quick else 50)],
        lambda: [check_k1_exact(20)],
        lambda: [check_bic_recovery(3 if quick else 10)],
        lambda: [check_resampling()],
        lambda: [check_gradients(4 if quick else 10)],
        lambda: [check_balance()],
        lambda: check_selectors(2 if quick else 10),
        lambda: [check_memory_identity()],
        lambda: [check_determinism()],
    ]
    results = []
    for step in steps:
        started = time.perf_counter()
        for name, ok, msg in step():
            results.append((name, ok, f"{msg} [{time.perf_counter() - started:.1f}s]"))
    return results


def main():
    parser = argparse.ArgumentParser(description="Run the SOYO acceptance checks")
    parser.add_argument("--quick", action="store_true", help="Fewer seeds and instances")
    args = parser.parse_args()
    print("Running acceptance checks...")
    results = validate(args.quick)
    passed = sum(1 for _, ok, _ in results if ok)
    total = len(results)
    for name, ok, msg in results:
        status = "PASS" if ok else "FAIL"
        print(f"  [{status}] {name}: {msg}")
    print(f"\nResult: {passed}/{total} checks passed")
    sys.exit(0 if passed == total else 1)


if __name__ == "__main__":
    main()
