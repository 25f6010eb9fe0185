import pytest

from litevae.config import ConfigError, dump_config, help_config, parse_config
from litevae.train import TrainConfig


class TestParse:
    def test_empty_is_default(self):
        assert parse_config("") == TrainConfig()

    def test_values_and_comments(self):
        cfg = parse_config("lr = 2e-4  # faster\n\nbatch_size=2\nadversarial_enabled = yes\nlambda_adv = 0.5\n"
                           "size_preset = S\ndisc_lr = none\n")
        assert cfg.lr == 2e-4 and cfg.batch_size == 2 and cfg.adversarial_enabled
        assert cfg.loss.lambda_adv == 0.5 and cfg.model.size_preset == "S" and cfg.disc_lr is None

    def test_round_trip(self):
        cfg = TrainConfig(lr=3e-4, steps_stage1=10, disc_lr=1e-5, precision="f64")
        assert parse_config(dump_config(cfg)) == cfg

    @pytest.mark.parametrize("text", ["lr 1e-4", "learning_rate = 1", "batch_size = 2.5", "adversarial_enabled = maybe",
                                      "lr = -1", "res_stage2 = 60", "precision = f16"])
    def test_errors(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_help_lists_every_key(self):
        text = help_config()
        for key in TrainConfig().to_flat():
            assert f"\n{key} = " in text
