import pytest

from esci_rank import config
from esci_rank.config import ConfigError, RunConfig, resolve
from esci_rank.model import ModelConfig
from esci_rank.tokenizer import TokenizerConfig
from esci_rank.trainer import TrainConfig


class TestDefaults:
    def test_match_module_defaults(self):
        cfg = RunConfig()
        assert cfg.tokenizer_config() == TokenizerConfig()
        m = cfg.model_config()
        assert (m.embed_dim, m.hidden_dims, m.dropout_ratios) == (
            ModelConfig().embed_dim, ModelConfig().hidden_dims, ModelConfig().dropout_ratios)
        assert cfg.train_config() == TrainConfig()

    def test_model_seed_follows_seed(self):
        assert resolve(flags={"seed": 9}).model_config().seed == 9
        assert resolve(flags={"seed": 9, "model_seed": 2}).model_config().seed == 2


class TestPrecedence:
    def test_file_env_flag(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("epochs = 3\nbatch_size = 8\nlearning_rate = 0.01\nadversary = \"fgm\"\n")
        env = {"ESCI_RANK_BATCH_SIZE": "16", "ESCI_RANK_LEARNING_RATE": "0.02", "HOME": "/x"}
        cfg = resolve(path, {"learning_rate": "0.03", "epochs": None}, env)
        assert (cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.adversary) == (3, 16, 0.03, "fgm")

    def test_list_values(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("hidden_dims = [32, 32]\ngains = [1.0, 0.5, 0.2, 0]\n")
        cfg = resolve(path, environ={"ESCI_RANK_NGRAM_ORDERS": "2,3"})
        assert cfg.hidden_dims == (32, 32) and cfg.gains == (1.0, 0.5, 0.2, 0.0) and cfg.ngram_orders == (2, 3)

    def test_dumps_round_trip(self, tmp_path):
        cfg = resolve(flags={"seed": 4, "train_data": ["a.tsv", "b.tsv"], "bag": True})
        path = tmp_path / "c.toml"
        path.write_text(config.dumps(cfg))
        assert resolve(path, environ={}) == cfg


class TestRejection:
    def test_unknown_file_key(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("epoch = 3\n")
        with pytest.raises(ConfigError, match="'epoch'"):
            resolve(path, environ={})

    def test_unknown_env_key(self):
        with pytest.raises(ConfigError, match="ESCI_RANK_EPOCH"):
            resolve(environ={"ESCI_RANK_EPOCH": "3"})

    def test_tables_rejected(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("[train]\nepochs = 3\n")
        with pytest.raises(ConfigError, match="flat"):
            resolve(path, environ={})

    @pytest.mark.parametrize("flags,match", [
        ({"epochs": "three"}, "expected int"),
        ({"bag": "maybe"}, "expected bool"),
        ({"adversary": "pgd"}, "adversary"),
        ({"hidden_dims": [8, 16]}, "hidden"),
        ({"label_smoothing_eps": 1.5}, "label_smoothing_eps"),
    ])
    def test_bad_values(self, flags, match):
        with pytest.raises(ConfigError, match=match):
            resolve(flags=flags, environ={})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            resolve(tmp_path / "nope.toml", environ={})
