import numpy as np
import pytest

from dfr import (
    DomainStore,
    build_balanced_batch,
    build_current_batch,
    resample_domain,
    sample_components,
    sample_gmm,
    sample_meanstd,
    sample_model,
    sample_pca,
)
from gmc import CovKind, GmmModel, MeanStdModel, PcaModel
from soyo_core import (
    LAST,
    MID,
    BadWeightsError,
    ConfigError,
    FeatureMatrix,
    IncompleteStoreError,
    LengthMismatchError,
    RngStream,
)


def _diag_model(mean, var):
    return GmmModel([1.0], [mean], [var])


def _store_entry(offset):
    return {MID: _diag_model([offset, 0.0], [1.0, 1.0]), LAST: _diag_model([0.0, offset], [1.0, 1.0])}


def _current(n, value=7.0):
    data = np.full((n, 2), value) + np.arange(n)[:, None]
    return {MID: FeatureMatrix(data), LAST: FeatureMatrix(-data)}


class TestDomainStore:
    def test_append_numbers_domains(self):
        store = DomainStore(levels=(MID, LAST))
        store.append(_store_entry(0.0), 10)
        record = store.append(_store_entry(1.0), 20)
        assert record.domain == 1
        assert len(store) == 2
        assert store.memory_params() == 4 * 4

    def test_missing_level(self):
        store = DomainStore(levels=(MID, LAST))
        with pytest.raises(IncompleteStoreError):
            store.append({MID: _diag_model([0.0], [1.0])}, 5)


class TestSamplers:
    def test_component_frequencies(self):
        comps = sample_components([0.2, 0.8], 100_000, RngStream(3))
        assert abs((comps == 0).mean() - 0.2) < 0.01

    def test_component_weights_are_checked(self):
        with pytest.raises(BadWeightsError):
            sample_components([0.5, 0.6], 10, RngStream(3))

    def test_negative_draw_count(self):
        with pytest.raises(ConfigError):
            sample_components([1.0], -1, RngStream(3))

    def test_diagonal_moments(self):
        model = GmmModel([0.5, 0.5], [[-2.0, 0.0], [2.0, 1.0]], [[1.0, 0.5], [1.0, 2.0]])
        x = sample_gmm(model, 100_000, RngStream(11)).data
        assert np.allclose(x.mean(axis=0), model.mixture_mean(), atol=0.05)
        # total variance = mean within-component variance + spread of the means
        assert x[:, 0].var() == pytest.approx(1.0 + 4.0, abs=0.1)

    def test_full_covariance_moments(self):
        cov = np.array([[2.0, 0.5], [0.5, 1.0]])
        model = GmmModel([1.0], [[1.0, -1.0]], [cov], CovKind.FULL)
        x = sample_gmm(model, 100_000, RngStream(12)).data
        assert np.allclose(x.mean(axis=0), [1.0, -1.0], atol=0.03)
        assert np.allclose(np.cov(x.T, bias=True), cov, atol=0.05)

    def test_zero_draws(self):
        assert sample_gmm(_diag_model([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]), 0, RngStream(1)).data.shape == (0, 3)

    def test_same_stream_same_draws(self):
        model = _diag_model([0.0, 1.0], [1.0, 4.0])
        a = sample_gmm(model, 50, RngStream(4, 9)).data
        b = sample_gmm(model, 50, RngStream(4, 9)).data
        assert np.array_equal(a, b)

    def test_meanstd_zero_std_repeats_mean(self):
        x = sample_meanstd(MeanStdModel([1.0, 2.0], [0.0, 0.0]), 4, RngStream(0)).data
        assert np.array_equal(x, np.tile([1.0, 2.0], (4, 1)))

    def test_pca_samples_stay_in_subspace(self):
        model = PcaModel([1.0, 1.0, 1.0], [[0.0, 0.0, 1.0]], [4.0])
        x = sample_pca(model, 1000, RngStream(2)).data
        assert np.allclose(x[:, :2], 1.0)
        assert x[:, 2].std() == pytest.approx(2.0, abs=0.2)

    def test_dispatch(self):
        assert sample_model(MeanStdModel([0.0], [1.0]), 3, RngStream(0)).n_rows == 3
        with pytest.raises(TypeError):
            sample_model(object(), 3, RngStream(0))


class TestBatches:
    def test_first_session_is_current_only(self):
        current = _current(6)
        batch = build_balanced_batch([], current, 6, RngStream(1))
        assert batch.labels.tolist() == [0] * 6
        assert np.array_equal(batch.level(MID).data, current[MID].data)
        assert np.array_equal(batch.level(LAST).data, current[LAST].data)

    def test_every_label_balanced(self):
        stores = [_store_entry(0.0), _store_entry(5.0), _store_entry(-5.0)]
        batch = build_balanced_batch(stores, _current(25), 25, RngStream(2))
        assert batch.n_rows == 100
        assert np.bincount(batch.labels).tolist() == [25, 25, 25, 25]

    def test_current_rows_survive_shuffle(self):
        current = _current(10)
        batch = build_balanced_batch([_store_entry(0.0)], current, 10, RngStream(2))
        rows = batch.level(MID).data[batch.labels == 1]
        assert sorted(rows[:, 0].tolist()) == sorted(current[MID].data[:, 0].tolist())

    def test_pseudo_count_override(self):
        batch = build_balanced_batch([_store_entry(0.0)], _current(10), 10, RngStream(2), n_pseudo=3)
        assert np.bincount(batch.labels).tolist() == [3, 10]

    def test_batch_is_deterministic(self):
        stores = [_store_entry(0.0)]
        a = build_balanced_batch(stores, _current(8), 8, RngStream(6))
        b = build_balanced_batch(stores, _current(8), 8, RngStream(6))
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.level(LAST).data, b.level(LAST).data)

    def test_row_count_mismatch(self):
        with pytest.raises(LengthMismatchError):
            build_balanced_batch([], _current(8), 9, RngStream(0))

    def test_store_missing_level(self):
        with pytest.raises(IncompleteStoreError):
            resample_domain({MID: _diag_model([0.0, 0.0], [1.0, 1.0])}, 0, 5, RngStream(0), (MID, LAST))

    def test_current_batch_without_rehearsal(self):
        batch = build_current_batch(_current(5), 3, RngStream(0))
        assert batch.labels.tolist() == [3] * 5
        assert sorted(batch.level(MID).data[:, 0].tolist()) == [7.0, 8.0, 9.0, 10.0, 11.0]
