import json

import numpy as np
import pandas as pd
import pytest

from conftest import blobs
from feat_io import read_feat, write_feat
from model_store import load_store
from soyo_cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, cli_main

INSPECT_CONFIG = """\
[stream]
n_domains = 3
dim = 32
train_per_domain = 60
test_per_domain = 20

[train]
epochs = 2
"""


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv("SOYO_SEED", raising=False)


def _cli(tmp_path, config, *argv, threads=1):
    base = ["--seed", "7", "--config", str(config), "--out", str(tmp_path / "out"), "--threads", str(threads), "--quiet"]
    return cli_main(base + list(argv))


def _outputs(out):
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


class TestCommands:
    def test_gen_writes_stream_and_provenance(self, tmp_path, small_config):
        assert _cli(tmp_path, small_config, "gen") == EXIT_OK
        stream_dir = tmp_path / "out" / "stream"
        assert len(list(stream_dir.glob("*.feat"))) == 3 * 2 * 2
        provenance = json.loads((stream_dir / "provenance.json").read_text())
        assert provenance["seed"] == 7
        assert provenance["levels"] == ["mid", "last"]
        assert len(provenance["config_hash"]) == 16

    def test_run_report(self, tmp_path, small_config):
        assert _cli(tmp_path, small_config, "run", "--selector", "nmc") == EXIT_OK
        frame = pd.read_csv(tmp_path / "out" / "report_nmc.csv")
        assert frame["session"].tolist() == [1, 2, 3]
        report = json.loads((tmp_path / "out" / "report_nmc.json").read_text())
        assert len(report["sessions"][-1]["confusion"]) == 3

    def test_train_predict_and_fused_dump(self, tmp_path, small_config):
        assert _cli(tmp_path, small_config, "train") == EXIT_OK
        store_path = tmp_path / "out" / "model_store.json"
        assert load_store(store_path).mdfn.n_domains == 3
        assert _cli(tmp_path, small_config, "predict", "--store", str(store_path), "--dump-fused") == EXIT_OK
        predictions = pd.read_csv(tmp_path / "out" / "predictions.csv")
        assert len(predictions) == 3 * 40
        assert {"p0", "p1", "p2"} <= set(predictions.columns)
        fused = pd.read_csv(tmp_path / "out" / "fused.csv")
        assert list(fused.columns) == ["true_domain"] + [f"f{j}" for j in range(8)]

    def test_resample(self, tmp_path, small_config):
        assert _cli(tmp_path, small_config, "train") == EXIT_OK
        store_path = tmp_path / "out" / "model_store.json"
        assert _cli(tmp_path, small_config, "resample", "--store", str(store_path), "--n", "25", "--domain", "1") == EXIT_OK
        feat = read_feat(tmp_path / "out" / "d01_pseudo_last.feat")
        assert feat.features.shape == (25, 8)
        assert set(feat.labels.tolist()) == {1}

    def test_inspect_counts(self, tmp_path, capsys):
        config = tmp_path / "inspect.ini"
        config.write_text(INSPECT_CONFIG, encoding="utf-8")
        assert _cli(tmp_path, config, "train") == EXIT_OK
        capsys.readouterr()
        assert _cli(tmp_path, config, "inspect", "--store", str(tmp_path / "out" / "model_store.json")) == EXIT_OK
        line = next(ln for ln in capsys.readouterr().out.splitlines() if "Compressed store" in ln)
        assert line.split()[2] == "774"
        totals = pd.read_csv(tmp_path / "out" / "inspect.csv")
        assert totals.loc[totals["item"] == "compressed", "params"].item() == 774

    def test_bic_sweep_finds_three_clusters(self, tmp_path, small_config, gen, capsys):
        path = tmp_path / "blobs.feat"
        write_feat(path, blobs(gen, [[0.0, 0.0], [8.0, 0.0], [4.0, 7.0]], 200).data)
        assert _cli(tmp_path, small_config, "bic-sweep", "--features", str(path), "--k-max", "6") == EXIT_OK
        assert "Best K by BIC: 3" in capsys.readouterr().out
        table = pd.read_csv(tmp_path / "out" / "bic_sweep.csv")
        assert table["k"].tolist() == [1, 2, 3, 4, 5, 6]

    def test_fit_gmc(self, tmp_path, small_config, gen):
        path = tmp_path / "x.feat"
        write_feat(path, blobs(gen, [[0.0, 0.0, 0.0]], 50).data)
        assert _cli(tmp_path, small_config, "fit-gmc", "--features", str(path), "--k", "1") == EXIT_OK
        store = load_store(tmp_path / "out" / "fit_gmc.json")
        assert store.domain_store().memory_params() == 6


class TestExitCodes:
    def test_unknown_command(self, tmp_path, small_config):
        assert _cli(tmp_path, small_config, "explode") == EXIT_USAGE

    def test_missing_required_flag(self, tmp_path, small_config):
        assert _cli(tmp_path, small_config, "inspect") == EXIT_USAGE

    def test_quiet_and_verbose_conflict(self):
        assert cli_main(["--quiet", "--verbose", "gen"]) == EXIT_USAGE

    def test_zero_threads(self, tmp_path, small_config):
        assert _cli(tmp_path, small_config, "gen", threads=0) == EXIT_USAGE

    def test_bad_config(self, tmp_path):
        config = tmp_path / "bad.ini"
        config.write_text("[train]\nepoch = 3\n", encoding="utf-8")
        assert _cli(tmp_path, config, "gen") == EXIT_USAGE

    def test_missing_store(self, tmp_path, small_config):
        assert _cli(tmp_path, small_config, "inspect", "--store", str(tmp_path / "absent.json")) == EXIT_DATA

    def test_truncated_stream_file(self, tmp_path, small_config):
        assert _cli(tmp_path, small_config, "gen") == EXIT_OK
        stream_dir = tmp_path / "out" / "stream"
        path = stream_dir / "d00_train_mid.feat"
        path.write_bytes(path.read_bytes()[:100])
        assert _cli(tmp_path, small_config, "run", "--stream", str(stream_dir)) == EXIT_DATA

    def test_fused_dump_needs_network(self, tmp_path, small_config):
        assert _cli(tmp_path, small_config, "train", "--selector", "nmc") == EXIT_OK
        store = str(tmp_path / "out" / "model_store.json")
        assert _cli(tmp_path, small_config, "predict", "--store", store, "--dump-fused") == EXIT_USAGE


class TestDeterminism:
    def _pipeline(self, root, config, threads):
        stream = str(root / "out" / "stream")
        for argv in (("gen",), ("run", "--stream", stream), ("compare", "--stream", stream)):
            assert _cli(root, config, *argv, threads=threads) == EXIT_OK
        return _outputs(root / "out")

    def test_reruns_and_thread_counts_match(self, tmp_path, small_config):
        runs = [self._pipeline(tmp_path / name, small_config, threads) for name, threads in
                (("a", 1), ("b", 1), ("c", 3))]
        assert runs[0] == runs[1]
        assert runs[0] == runs[2]
        assert "compare.csv" in runs[0]

    def test_seed_reaches_outputs(self, tmp_path, small_config):
        assert _cli(tmp_path, small_config, "gen") == EXIT_OK
        first = read_feat(tmp_path / "out" / "stream" / "d00_test_last.feat").features
        assert cli_main(["--seed", "8", "--config", str(small_config), "--out", str(tmp_path / "other"),
                         "--quiet", "gen"]) == EXIT_OK
        second = read_feat(tmp_path / "other" / "stream" / "d00_test_last.feat").features
        assert not np.array_equal(first, second)
