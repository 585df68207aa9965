import pytest

from gmc import CompressorKind, CovKind
from mdfn import Activation
from soyo_config import SEED_ENV, default_config, load_config, parse_config, resolve_seed
from soyo_core import MID, ConfigError, LevelId


class TestParsing:
    def test_defaults(self):
        cfg = default_config()
        assert cfg.seed == 0
        assert cfg.stream_config().n_domains == 4
        assert cfg.compressor_config().label == "GMC(K=2)"
        assert cfg.harness_config().backbone_params == 86_000_000
        assert cfg.get("selectors", "n_pseudo") is None

    def test_overrides_are_typed(self):
        cfg = parse_config(
            "[em]\ncov_kind = full\n"
            "[compressor]\nkind = pca\nn_components = 4\n"
            "[train]\nactivation = tanh\nfusion = no\n"
            "[selectors]\nn_pseudo = 25\n"
            "[stream]\nlevels = L3, mid, last\n"
        )
        assert cfg.em_config().cov_kind is CovKind.FULL
        assert cfg.compressor_config().kind is CompressorKind.PCA
        assert cfg.train_config().activation is Activation.TANH
        assert cfg.train_config().fusion is False
        assert cfg.harness_config().n_pseudo == 25
        assert cfg.stream_config().levels == (LevelId("L3"), MID, LevelId("last"))

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config("[metrics]\nenabled = true\n")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key 'epoch'"):
            parse_config("[train]\nepoch = 3\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            parse_config("[train]\nlearning_rate = fast\n")

    def test_bad_choice(self):
        with pytest.raises(ConfigError):
            parse_config("[compressor]\nkind = wavelet\n")

    def test_default_section_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("[DEFAULT]\nseed = 1\n")

    def test_range_checks_surface_as_config_errors(self):
        cfg = parse_config("[stream]\nn_domains = 40\ndim = 8\n")
        with pytest.raises(ConfigError, match=r"\[stream\]"):
            cfg.stream_config()
        with pytest.raises(ConfigError, match=r"\[train\]"):
            parse_config("[train]\nepochs = 0\n").train_config()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read config"):
            load_config(tmp_path / "absent.ini")

    def test_file(self, small_config):
        assert load_config(small_config).stream_config().dim == 8


class TestHash:
    def test_hash_is_stable_and_value_sensitive(self):
        a = default_config().config_hash
        assert a == default_config().config_hash
        assert len(a) == 16
        assert parse_config("[train]\nepochs = 100\n").config_hash == a
        assert parse_config("[train]\nepochs = 99\n").config_hash != a

    def test_seed_changes_hash(self):
        cfg = default_config()
        assert cfg.with_seed(5).config_hash != cfg.config_hash
        assert cfg.with_seed(5).seed == 5
        assert cfg.seed == 0


class TestSeedResolution:
    def test_flag_wins(self):
        assert resolve_seed(7, default_config().with_seed(3), {SEED_ENV: "9"}) == 7

    def test_environment_before_config(self):
        assert resolve_seed(None, default_config().with_seed(3), {SEED_ENV: "9"}) == 9

    def test_config_fallback(self):
        assert resolve_seed(None, default_config().with_seed(3), {}) == 3

    def test_bad_environment_value(self):
        with pytest.raises(ConfigError):
            resolve_seed(None, default_config(), {SEED_ENV: "abc"})

    def test_negative_seed(self):
        with pytest.raises(ConfigError):
            resolve_seed(-1, default_config(), {})
