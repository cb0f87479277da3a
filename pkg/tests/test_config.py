import pytest

from swiattn.config import SEED_ENV, RunConfig, load_config, parse_config, resolve_seed
from swiattn.errors import ConfigError

TEXT = """
[model]
n_layers = 3
attention_mode = "static_hybrid"
hybrid_pattern = ["swa", "full", "swa"]

[attention]
d_model = 32
head_dim = 8
window = 8

[regularizer]
alpha = 50.0

[train]
total_steps = 40
warmup_steps = 4
peak_lr = 3e-3   # donor
seed = 11

[cpt]
peak_lr = 3e-4

[data]
recall_fraction = 0.25
pool_size = 3

[niah]
context_lengths = [20, 30]
repeats = 1
"""


class TestParse:
    def test_values(self):
        cfg = parse_config(TEXT)
        assert cfg.model.n_layers == 3 and cfg.model.hybrid_pattern == ("swa", "full", "swa")
        assert cfg.model.attention.window == 8 and cfg.model.regularizer.alpha == 50.0
        assert cfg.train.peak_lr == 3e-3 and cfg.cpt.peak_lr == 3e-4
        assert cfg.cpt.total_steps == 40 and cfg.seed == 11
        assert cfg.data.recall_fraction == 0.25 and cfg.data.params == {"pool_size": 3}
        assert cfg.data.window == 8 and cfg.data.seq_len == cfg.train.seq_len
        assert cfg.niah["context_lengths"] == [20, 30] and cfg.niah["repeats"] == 1

    def test_empty_is_defaults(self):
        assert parse_config("") == RunConfig()

    @pytest.mark.parametrize("text", ["[modle]\nn_layers = 2", "[model]\nn_layerz = 2", "[train]\ntotal_steps = 0",
                                      "not an ini file", "[attention]\nhead_dim = 5"])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.cfg")

    def test_load_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(TEXT)
        assert load_config(path) == parse_config(TEXT)

    def test_with_seed(self):
        cfg = parse_config(TEXT).with_seed(5)
        assert cfg.train.seed == cfg.cpt.seed == 5


class TestSeedPrecedence:
    def test_flag_wins(self):
        assert resolve_seed(1, 3, {SEED_ENV: "2"}) == 1

    def test_env_over_config(self):
        assert resolve_seed(None, 3, {SEED_ENV: "2"}) == 2

    def test_config_fallback(self):
        assert resolve_seed(None, 3, {}) == 3

    def test_bad_env(self):
        with pytest.raises(ConfigError):
            resolve_seed(None, 3, {SEED_ENV: "x"})
