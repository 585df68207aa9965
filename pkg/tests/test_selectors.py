import numpy as np
import pytest

from conftest import blobs
from domain_selectors import (
    KmeansKnnModel,
    KmeansKnnSelector,
    NmcSelector,
    SoyoSelector,
    kmeans_fit,
    knn_predict,
    knn_predict_batch,
    nmc_fit,
    nmc_predict,
    nmc_predict_batch,
)
from gmc import CompressorConfig, CompressorKind
from mdfn import TrainConfig
from soyo_core import (
    LAST,
    DimMismatchError,
    EmptyInputError,
    FeatureMatrix,
    InsufficientSamplesError,
    RngStream,
)


class TestNmc:
    def test_centroids_and_prediction(self):
        model = nmc_fit([FeatureMatrix([[0.0, 0.0], [2.0, 2.0]]), FeatureMatrix([[10.0, 10.0]])])
        assert model.centroids.tolist() == [[1.0, 1.0], [10.0, 10.0]]
        assert nmc_predict(model, [2.0, 2.0]) == 0
        assert nmc_predict(model, [9.0, 9.0]) == 1

    def test_tie_goes_to_lower_domain(self):
        model = nmc_fit([FeatureMatrix([[-1.0, 0.0]]), FeatureMatrix([[1.0, 0.0]])])
        assert nmc_predict(model, [0.0, 5.0]) == 0

    def test_batch_matches_single_predictions(self):
        model = nmc_fit([FeatureMatrix([[0.0, 0.0]]), FeatureMatrix([[4.0, 0.0]]), FeatureMatrix([[0.0, 4.0]])])
        rows = FeatureMatrix([[0.5, 0.5], [3.0, 1.0], [1.0, 3.0], [0.0, 5.0]])
        assert nmc_predict_batch(model, rows).tolist() == [0, 1, 2, 2]
        assert [nmc_predict(model, r) for r in rows.data] == [0, 1, 2, 2]

    def test_no_domains(self):
        with pytest.raises(EmptyInputError):
            nmc_fit([])

    def test_empty_domain(self):
        with pytest.raises(EmptyInputError):
            nmc_fit([FeatureMatrix.empty(2)])

    def test_dim_mismatch(self):
        model = nmc_fit([FeatureMatrix([[0.0, 0.0]])])
        with pytest.raises(DimMismatchError):
            nmc_predict(model, [0.0, 0.0, 0.0])


class TestKmeansKnn:
    def test_multimodal_domain(self, gen):
        # domain 0 has two far modes whose centroid lands near domain 1
        domain0 = blobs(gen, [[-10.0, 0.0], [10.0, 0.0]], 20, scale=0.1)
        domain1 = blobs(gen, [[0.0, 3.0]], 40, scale=0.1)
        knn = kmeans_fit([domain0, domain1], 2, RngStream(1))
        nmc = nmc_fit([domain0, domain1])
        assert knn.centers.shape == (2, 2, 2)
        assert knn_predict(knn, [0.0, 1.0]) == 1
        assert nmc_predict(nmc, [0.0, 1.0]) == 0
        assert knn_predict(knn, [9.5, 0.0]) == 0

    def test_recovers_cluster_centers(self, gen):
        X = blobs(gen, [[-5.0, 0.0], [5.0, 0.0]], 50, scale=0.2)
        centers = kmeans_fit([X], 2, RngStream(2)).centers[0]
        assert sorted(np.round(centers[:, 0]).tolist()) == [-5.0, 5.0]

    def test_same_seed_same_centers(self, gen):
        X = blobs(gen, [[0.0, 0.0], [3.0, 3.0], [6.0, 0.0]], 30)
        a = kmeans_fit([X], 3, RngStream(9)).centers
        b = kmeans_fit([X], 3, RngStream(9)).centers
        assert np.array_equal(a, b)

    def test_too_few_rows(self):
        with pytest.raises(InsufficientSamplesError):
            kmeans_fit([FeatureMatrix(np.zeros((3, 2)))], 5, RngStream(0))

    @pytest.mark.parametrize("seed", range(5))
    def test_single_center_matches_nmc(self, seed):
        gen = np.random.default_rng(seed)
        domains = [FeatureMatrix(gen.normal(loc=gen.normal(size=4), size=(30, 4))) for _ in range(4)]
        queries = gen.normal(scale=2.0, size=(200, 4))
        knn = kmeans_fit(domains, 1, RngStream(seed))
        nmc = nmc_fit(domains)
        assert np.array_equal(knn.centers[:, 0, :], nmc.centroids)
        assert np.array_equal(knn_predict_batch(knn, queries), nmc_predict_batch(nmc, queries))

    def test_center_order_within_domain_is_irrelevant(self, gen):
        domains = [blobs(gen, [[0.0, 0.0], [4.0, 1.0]], 25), blobs(gen, [[2.0, 3.0], [-3.0, 2.0]], 25),
                   blobs(gen, [[5.0, -4.0]], 50)]
        model = kmeans_fit(domains, 4, RngStream(6))
        shuffled = np.stack([center_set[gen.permutation(4)] for center_set in model.centers])
        queries = gen.normal(scale=4.0, size=(300, 2))
        expected = knn_predict_batch(model, queries)
        assert np.array_equal(knn_predict_batch(KmeansKnnModel(shuffled), queries), expected)

    def test_batch_prediction_maps_centers_to_domains(self, gen):
        model = kmeans_fit([blobs(gen, [[0.0]], 10), blobs(gen, [[50.0]], 10)], 2, RngStream(3))
        assert knn_predict_batch(model, np.array([[1.0], [49.0], [-3.0]])).tolist() == [0, 1, 0]


class TestIncrementalBaselines:
    def test_nmc_grows_one_centroid_per_domain(self, small_stream):
        selector = NmcSelector()
        for dom in small_stream.domains:
            selector.learn_domain(dom.train.features)
        assert selector.model.n_domains == 3
        assert selector.memory_params() == 3 * small_stream.dim
        assert selector.extra_params() == 0
        pred = selector.predict(small_stream.domains[0].test.features)
        assert pred.shape == (40,)

    def test_kmeans_memory(self, small_stream):
        selector = KmeansKnnSelector(RngStream(4), n_centers=3)
        for dom in small_stream.domains[:2]:
            selector.learn_domain(dom.train.features)
        assert selector.model.centers.shape == (2, 3, small_stream.dim)
        assert selector.memory_params() == 2 * 3 * small_stream.dim

    def test_kmeans_domains_use_separate_streams(self, small_stream):
        a = KmeansKnnSelector(RngStream(4), n_centers=3)
        b = KmeansKnnSelector(RngStream(4), n_centers=3)
        a.learn_domain(small_stream.domains[0].train.features)
        for dom in small_stream.domains[:2]:
            b.learn_domain(dom.train.features)
        assert np.array_equal(a.model.centers[0], b.model.centers[0])


class TestSoyoSelector:
    def _selector(self, stream, **kwargs):
        return SoyoSelector(
            stream.levels,
            CompressorConfig(k=2),
            TrainConfig(epochs=3),
            RngStream(0).child("selector", "soyo"),
            **kwargs,
        )

    def test_first_session_predicts_domain_zero(self, small_stream):
        selector = self._selector(small_stream)
        selector.learn_domain(small_stream.domains[0].train.features)
        assert selector.params is None
        assert selector.extra_params() == 0
        assert selector.predict(small_stream.domains[0].test.features).tolist() == [0] * 40

    def test_sessions_grow_store_and_head(self, small_stream):
        selector = self._selector(small_stream)
        for dom in small_stream.domains:
            selector.learn_domain(dom.train.features)
        assert len(selector.store) == 3
        assert selector.params.n_domains == 3
        assert selector.memory_params() == 3 * 2 * (1 + 2 * 8 + 2 * 8)
        assert selector.extra_params() == selector.params.param_count()
        assert len(selector.loss_curve) == 3
        pred = selector.predict(small_stream.domains[2].test.features)
        assert pred.min() >= 0 and pred.max() <= 2

    def test_names(self, small_stream):
        assert self._selector(small_stream).name == "SOYO+GMC(K=2)"
        assert self._selector(small_stream, balance=False).name == "SOYO+GMC(K=2) (no DFR)"
        meanstd = SoyoSelector(small_stream.levels, CompressorConfig(kind=CompressorKind.MEANSTD),
                               TrainConfig(), RngStream(0))
        assert meanstd.name == "SOYO+Mean&std"

    def test_single_level(self, small_stream):
        selector = SoyoSelector((LAST,), CompressorConfig(k=1), TrainConfig(epochs=2, fusion=False), RngStream(1))
        for dom in small_stream.domains[:2]:
            selector.learn_domain(dom.train.features)
        assert selector.params.levels == (LAST,)
        assert selector.memory_params() == 2 * (0 + 8 + 8)

    def test_reproducible(self, small_stream):
        runs = []
        for _ in range(2):
            selector = self._selector(small_stream)
            for dom in small_stream.domains[:2]:
                selector.learn_domain(dom.train.features)
            runs.append(selector.predict(small_stream.domains[1].test.features))
        assert np.array_equal(runs[0], runs[1])
