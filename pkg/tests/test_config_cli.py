"""Config parsing and the ``softql`` command line."""

import csv
import textwrap

import numpy as np
import pytest

from softql import cli
from softql.config import ConfigError, RunConfig, load_config, parse_config
from softql.core import TrainConfig
from softql.tabular import TabularMdp

TINY = """\
version: 1
train:
  min_pool: 20
  epoch_length: 30
  n_epochs: 2
  batch_size: 8
  k: 4
  m: 4
  k_v: 5
  target_update_interval: 25
  proposal_switch_epoch: 1
  hidden_sizes: [8, 8]
  checkpoint_interval: 1
env:
  name: multigoal
run:
  output_dir: {out}
  eval_rollouts: 10
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY.format(out=tmp_path / "run"))
    return path


def read_occupancy(path):
    with open(path) as fh:
        return [float(r["fraction"]) for r in csv.DictReader(fh)]


class TestConfig:
    def test_defaults(self):
        cfg = parse_config("version: 1\n")
        assert cfg.train == TrainConfig() and cfg.eval_rollouts == 100

    def test_round_trip(self, tiny_config):
        cfg = load_config(tiny_config)
        again = parse_config(cfg.dumps())
        assert again == cfg
        assert again.dumps() == cfg.dumps()

    def test_exponent_strings_are_numbers(self):
        assert parse_config("version: 1\ntrain:\n  q_lr: 1e-3\n").train.q_lr == 1e-3

    def test_unknown_key_reports_line(self):
        text = "version: 1\ntrain:\n  q_lr: 0.001\n  learning_rate: 3\n"
        with pytest.raises(ConfigError) as info:
            parse_config(text, "x.yaml")
        assert info.value.line == 4 and "x.yaml:4" in str(info.value)

    def test_bad_type_reports_line(self):
        with pytest.raises(ConfigError) as info:
            parse_config("version: 1\nenv:\n  horizon: twenty\n")
        assert info.value.line == 3

    def test_invalid_value_reports_line(self):
        with pytest.raises(ConfigError) as info:
            parse_config("version: 1\ntrain:\n  batch_size: 4\n  gamma: 1.5\n")
        assert info.value.line == 4

    @pytest.mark.parametrize("text", ["", "- 1\n", "version: 2\n", "train: {}\n", "version: 1\nextra: 1\n",
                                      "version: 1\nenv:\n  name: maze\n", "version: 1\ntrain: [1\n"])
    def test_rejected_documents(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.yaml")

    def test_env_section(self):
        cfg = parse_config("version: 1\nenv:\n  goal_weight: 3\n  goals: [[1, 0], [-1, 0]]\n")
        env = cfg.env.make()
        assert env.goal_weight == 3.0 and env.goals.shape == (2, 2)

    def test_shipped_configs_parse(self):
        from pathlib import Path
        root = Path(__file__).resolve().parents[1] / "configs"
        for path in root.glob("*.yaml"):
            cfg = load_config(path)
            assert cfg.train.alpha == 10.0 and cfg.train.k == cfg.train.m == 100


class TestTrainCommand:
    def test_writes_outputs(self, tiny_config, tmp_path):
        assert cli.main(["train", "--config", str(tiny_config), "--quiet"]) == 0
        run = tmp_path / "run"
        for name in ("config.resolved.yaml", "metrics.csv", "timing.csv", "trajectories.csv", "occupancy.csv",
                     "checkpoint_0000.npz", "checkpoint_0002.npz"):
            assert (run / name).exists(), name
        assert load_config(run / "config.resolved.yaml").train.n_epochs == 2
        assert sum(read_occupancy(run / "occupancy.csv")) == pytest.approx(1.0)

    def test_byte_identical_metrics(self, tiny_config, tmp_path):
        for out in ("a", "b"):
            assert cli.main(["train", "--config", str(tiny_config), "--seed", "7", "--quiet",
                             "--output-dir", str(tmp_path / out)]) == 0
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_env_overrides_and_flag_precedence(self, tiny_config, tmp_path, monkeypatch):
        monkeypatch.setenv("SOFTQL_OUTPUT_DIR", str(tmp_path / "from_env"))
        monkeypatch.setenv("SOFTQL_SEED", "3")
        assert cli.main(["train", "--config", str(tiny_config), "--quiet", "--n-epochs", "1"]) == 0
        resolved = load_config(tmp_path / "from_env" / "config.resolved.yaml")
        assert resolved.train.seed == 3
        assert cli.main(["train", "--config", str(tiny_config), "--quiet", "--n-epochs", "1", "--seed", "5",
                         "--output-dir", str(tmp_path / "flag")]) == 0
        assert load_config(tmp_path / "flag" / "config.resolved.yaml").train.seed == 5

    def test_bad_seed_env(self, tiny_config, monkeypatch, capsys):
        monkeypatch.setenv("SOFTQL_SEED", "abc")
        assert cli.main(["train", "--config", str(tiny_config)]) == 2

    def test_missing_config(self, tmp_path, capsys):
        assert cli.main(["train", "--config", str(tmp_path / "missing.yaml")]) == 2
        assert "not found" in capsys.readouterr().err

    def test_invalid_config_is_line_anchored(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text(textwrap.dedent("""\
            version: 1
            train:
              alpha: -1
            """))
        assert cli.main(["train", "--config", str(path)]) == 2
        assert f"{path}:3:" in capsys.readouterr().err

    def test_numeric_abort(self, tiny_config, tmp_path, capsys):
        text = tiny_config.read_text().replace("train:\n", "train:\n  q_lr: 1.0e+300\n")
        tiny_config.write_text(text)
        with np.errstate(all="ignore"):
            assert cli.main(["train", "--config", str(tiny_config), "--quiet"]) == 3
        assert "nan_dump.npz" in capsys.readouterr().err

    def test_one_epoch_smoke_run(self, tmp_path):
        import time
        from pathlib import Path
        config = Path(__file__).resolve().parents[1] / "configs" / "multigoal-full.yaml"
        t0 = time.perf_counter()
        assert cli.main(["train", "--config", str(config), "--n-epochs", "1", "--quiet",
                         "--output-dir", str(tmp_path / "smoke")]) == 0
        assert time.perf_counter() - t0 < 60.0

    def test_usage_error(self):
        assert cli.main(["train"]) == 2
        assert cli.main(["frobnicate"]) == 2


class TestEvalAndExport:
    @pytest.mark.xfail(strict=True, reason="a randomly initialized tanh sampler has a nonzero mean action, "
                                           "so 20 steps of drift carry almost every rollout to one goal")
    def test_untrained_checkpoint_spreads(self, tmp_path):
        cfg = RunConfig(output_dir=str(tmp_path / "run"))
        cfg.train.n_epochs = 0
        config = cfg.save(tmp_path / "untrained.yaml")
        assert cli.main(["train", "--config", str(config), "--quiet"]) == 0
        out = tmp_path / "eval"
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint_0000.npz"),
                         "--output-dir", str(out)]) == 0
        assert max(read_occupancy(out / "occupancy.csv")) <= 0.9

    def test_zero_rollouts(self, tiny_config, tmp_path, capsys):
        cli.main(["train", "--config", str(tiny_config), "--quiet", "--n-epochs", "0"])
        ck = tmp_path / "run" / "checkpoint_0000.npz"
        assert cli.main(["eval", "--checkpoint", str(ck), "--n-rollouts", "0",
                         "--output-dir", str(tmp_path / "e")]) == 0
        assert read_occupancy(tmp_path / "e" / "occupancy.csv") == [0.0] * 4

    def test_bad_checkpoint(self, tmp_path):
        bad = tmp_path / "x.npz"
        bad.write_bytes(b"not a checkpoint")
        assert cli.main(["eval", "--checkpoint", str(bad)]) == 2
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "missing.npz")]) == 2

    def test_mismatched_checkpoint(self, tmp_path):
        from softql.nn import init_mlp, save_checkpoint
        path = save_checkpoint(tmp_path / "c.npz", {"sampler": init_mlp(5, 3, np.random.default_rng(0),
                                                                        hidden=(4,), output="tanh")},
                               {"state_dim": 2, "action_dim": 3})
        assert cli.main(["eval", "--checkpoint", str(path)]) == 2

    def test_export(self, tiny_config, tmp_path, capsys):
        cli.main(["train", "--config", str(tiny_config), "--quiet"])
        out = tmp_path / "exp"
        assert cli.main(["export", "--run-dir", str(tmp_path / "run"), "--output-dir", str(out),
                         "--n-rollouts", "3"]) == 0
        assert (out / "metrics.csv").exists()
        assert sorted(p.name for p in out.glob("trajectories_*.csv")) == [
            "trajectories_0000.csv", "trajectories_0001.csv", "trajectories_0002.csv"]

    def test_export_missing_run(self, tmp_path):
        assert cli.main(["export", "--run-dir", str(tmp_path)]) == 2


class TestOracleCheck:
    def test_default_battery_passes(self, capsys):
        assert cli.main(["oracle-check", "--n-mdps", "10"]) == 0
        out = capsys.readouterr().out
        assert out.count("[PASS]") == 8

    def test_degenerate_size(self, capsys):
        assert cli.main(["oracle-check", "--sizes", "1x1", "--n-mdps", "3"]) == 0

    def test_corrupted_backup_fails_contraction(self, capsys):
        def bad_backup(mdp, q, alpha):
            from softql.tabular import soft_values
            return mdp.reward + 1.01 * (mdp.transition @ soft_values(q, alpha))

        args = cli.build_parser().parse_args(["oracle-check", "--n-mdps", "5"])
        assert cli.cmd_oracle_check(args, backup=bad_backup) == 1
        out = capsys.readouterr().out
        assert "[FAIL] contraction" in out and "seed" in out

    def test_bad_sizes(self):
        assert cli.main(["oracle-check", "--sizes", "3by2"]) == 2


def test_resolved_config_is_reloadable(tmp_path):
    cfg = RunConfig()
    cfg.train.seed = 11
    assert load_config(cfg.save(tmp_path / "c.yaml")) == cfg


def test_one_state_mdp_type():
    # guard that TabularMdp accepts the degenerate 1x1 case the oracle uses
    assert TabularMdp(np.ones((1, 1, 1)), np.zeros((1, 1)), 0.5).n_states == 1
