import json

import numpy as np
import pytest

from domain_selectors import KmeansKnnSelector, NmcSelector, SoyoSelector
from gmc import CompressorConfig, CompressorKind, CovKind, EmConfig
from mdfn import TrainConfig
from model_store import (
    ModelStore,
    dumps_store,
    load_store,
    loads_store,
    save_store,
    store_to_dict,
    summary_rows,
)
from soyo_core import LAST, MID, FormatError, RngStream


def _trained_soyo(stream, compressor=CompressorConfig(k=2), n_domains=2):
    selector = SoyoSelector(stream.levels, compressor, TrainConfig(epochs=2), RngStream(3))
    for dom in stream.domains[:n_domains]:
        selector.learn_domain(dom.train.features)
    return selector


@pytest.fixture
def soyo_store(small_stream):
    return ModelStore.from_selector(_trained_soyo(small_stream), seed=3, config_hash="abc123")


class TestRoundTrip:
    def test_soyo_store_is_bit_exact(self, soyo_store):
        loaded = loads_store(dumps_store(soyo_store))
        for before, after in zip(soyo_store.records, loaded.records):
            for lvl in (MID, LAST):
                assert np.array_equal(before.models[lvl].means, after.models[lvl].means)
                assert np.array_equal(before.models[lvl].covariances, after.models[lvl].covariances)
        for (name, a), (_, b) in zip(soyo_store.mdfn.named_arrays(), loaded.mdfn.named_arrays()):
            assert np.array_equal(a, b), name
        assert loaded.levels == (MID, LAST)
        assert (loaded.seed, loaded.config_hash, loaded.compressor) == (3, "abc123", "GMC(K=2)")

    def test_serialization_is_stable(self, soyo_store):
        text = dumps_store(soyo_store)
        assert dumps_store(loads_store(text)) == text
        assert text.endswith("}\n")

    def test_file_round_trip(self, tmp_path, soyo_store):
        path = tmp_path / "out" / "model_store.json"
        save_store(path, soyo_store)
        assert load_store(path).domain_store().memory_params() == soyo_store.domain_store().memory_params()

    @pytest.mark.parametrize("kind", [CompressorKind.MEANSTD, CompressorKind.PCA])
    def test_other_compressors(self, small_stream, kind):
        selector = _trained_soyo(small_stream, CompressorConfig(kind=kind, n_components=3))
        loaded = loads_store(dumps_store(ModelStore.from_selector(selector, 0, "")))
        assert loaded.domain_store().memory_params() == selector.memory_params()

    def test_full_covariance(self, small_stream):
        compressor = CompressorConfig(k=1, em=EmConfig(cov_kind=CovKind.FULL))
        selector = _trained_soyo(small_stream, compressor, n_domains=1)
        loaded = loads_store(dumps_store(ModelStore.from_selector(selector, 0, "")))
        model = loaded.records[0].models[LAST]
        assert model.cov_kind is CovKind.FULL
        assert model.covariances.shape == (1, 8, 8)
        assert loaded.mdfn is None

    def test_baselines(self, small_stream):
        nmc = NmcSelector()
        knn = KmeansKnnSelector(RngStream(1), n_centers=2)
        for dom in small_stream.domains:
            nmc.learn_domain(dom.train.features)
            knn.learn_domain(dom.train.features)
        a = loads_store(dumps_store(ModelStore.from_selector(nmc, 0, "")))
        b = loads_store(dumps_store(ModelStore.from_selector(knn, 0, "")))
        assert (a.selector, b.selector) == ("nmc", "kmeans_knn")
        assert a.levels == (LAST,)
        assert np.array_equal(a.baseline.centroids, nmc.model.centroids)
        assert np.array_equal(b.baseline.centers, knn.model.centers)


class TestRejection:
    def test_nan_is_rejected_with_path(self, soyo_store):
        doc = store_to_dict(soyo_store)
        doc["domains"][0]["levels"]["mid"]["means"][0][0] = "nan"
        with pytest.raises(FormatError) as info:
            loads_store(json.dumps(doc))
        assert info.value.location.startswith("$.domains[0].levels")

    def test_bare_json_numbers_are_rejected(self, soyo_store):
        doc = store_to_dict(soyo_store)
        doc["domains"][1]["levels"]["last"]["weights"] = [0.5, 0.5]
        with pytest.raises(FormatError):
            loads_store(json.dumps(doc))

    def test_wrong_format_tag(self, soyo_store):
        doc = store_to_dict(soyo_store)
        doc["format"] = "something-else"
        with pytest.raises(FormatError) as info:
            loads_store(json.dumps(doc))
        assert info.value.location == "$.format"

    def test_domains_out_of_order(self, soyo_store):
        doc = store_to_dict(soyo_store)
        doc["domains"].reverse()
        with pytest.raises(FormatError) as info:
            loads_store(json.dumps(doc))
        assert info.value.location == "$.domains[0].domain"

    def test_weights_that_do_not_sum_to_one(self, soyo_store):
        doc = store_to_dict(soyo_store)
        doc["domains"][0]["levels"]["last"]["weights"] = ["0.25", "0.25"]
        with pytest.raises(FormatError) as info:
            loads_store(json.dumps(doc))
        assert info.value.location == "$.domains[0].levels"

    def test_not_json(self):
        with pytest.raises(FormatError) as info:
            loads_store("{not json")
        assert info.value.location == 1


def test_summary_rows(soyo_store):
    rows = summary_rows(soyo_store)
    assert [(r["domain"], r["level"]) for r in rows] == [(1, "mid"), (1, "last"), (2, "mid"), (2, "last")]
    assert all(r["kind"] == "GmmModel" and r["params"] == 33 for r in rows)
    assert sum(r["params"] for r in rows) == soyo_store.domain_store().memory_params()


def _stored_floats(node, out):
    if isinstance(node, dict):
        for key, value in node.items():
            if key != "provenance":
                _stored_floats(value, out)
    elif isinstance(node, list):
        for value in node:
            _stored_floats(value, out)
    elif isinstance(node, str):
        try:
            out.add(float(node))
        except ValueError:
            pass
    return out


def test_store_holds_parameters_not_rows(small_stream):
    selector = _trained_soyo(small_stream, n_domains=3)
    for rec in selector.store.records:
        assert set(rec.models) == {MID, LAST}
        assert all(model.means.shape == (2, 8) for model in rec.models.values())
    doc = json.loads(dumps_store(ModelStore.from_selector(selector, 0, "")))
    assert set(doc) == {"format", "version", "provenance", "domains", "mdfn"}
    assert all(set(entry) == {"domain", "n_samples", "levels"} for entry in doc["domains"])
    stored = _stored_floats(doc, set())
    for dom in small_stream.domains:
        for lvl in (MID, LAST):
            for row in dom.train.level(lvl).data:
                assert not set(row.tolist()) <= stored
