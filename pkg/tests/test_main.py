#!/usr/bin/env python3
"""
Tests for run configuration and the distillforge command line
"""

import csv
import logging
import statistics
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from core.config import (
    CONFIG_ENV,
    ConfigManager,
    RunConfig,
    parse_config,
    parse_range,
    preset_values,
    stage_definitions,
)
from core.distill import prepare_synthetic, run_distillation
from core.errors import ConfigError
from core.evalharness import baseline_random_subset, evaluate
from core.trainer import spawn_seeds
from core.trajstore.pool import ExpertPool
from distillforge_main import ABLATION_COLUMNS, real_data, run_command

TINY_CONFIG = """
# tiny end-to-end run
classes = 3
per_class = 10
test_per_class = 10
channels = 1
height = 2
width = 2
hidden = 6
activation = tanh

experts = 2
expert_epochs = 8
expert_lr = 0.05
expert_batch = 10

N = 2
M = 1
T_minus = 0
T_init = 1
T_plus = 2
interval = 2
ipc = 2
iterations = 3
lr_img = 0.1
precision = double
checkpoint_every = 2
log_every = 1

eval_epochs = 5
eval_batch = 8
eval_seeds = 2
baseline_seeds = 2
ablate_seeds = 1
"""


def write_config(directory, text=TINY_CONFIG, name="run.cfg"):
    path = Path(directory) / name
    path.write_text(text)
    return path


class TestConfigManager:
    """Test parsing, validation and serialization of run configs"""

    def test_empty_file_gives_defaults(self):
        """Test no keys means every default"""
        config = ConfigManager.parse_text("\n# only a comment\n")
        assert config == RunConfig()
        assert (config.N, config.M, config.T_init, config.T_plus) == (40, 2, 15, 20)

    def test_values_and_comments(self):
        """Test typed values and trailing comments"""
        config = ConfigManager.parse_text("N = 25  # inner steps\nlabel_mode = soft\nper_step_alpha = true\nlr_img = 100\n")
        assert config.N == 25
        assert config.label_mode == "soft"
        assert config.per_step_alpha is True
        assert config.lr_img == 100.0

    def test_serialize_is_a_fixed_point(self):
        """Test parse(serialize(config)) reproduces the config"""
        config = ConfigManager.parse_text(TINY_CONFIG)
        text = ConfigManager.serialize(config)
        assert ConfigManager.parse_text(text) == config
        assert ConfigManager.serialize(ConfigManager.parse_text(text)) == text

    def test_unknown_key_line(self):
        """Test unknown keys name their line"""
        with pytest.raises(ConfigError, match="line 2: unknown key 'bogus'"):
            ConfigManager.parse_text("N = 3\nbogus = 1\n")

    def test_duplicate_key(self):
        """Test a key set twice"""
        with pytest.raises(ConfigError, match="line 3: duplicate key 'M'"):
            ConfigManager.parse_text("M = 1\nN = 2\nM = 2\n")

    def test_type_and_range_errors(self):
        """Test wrong types, negative values and unknown choices"""
        with pytest.raises(ConfigError, match="line 1"):
            ConfigManager.parse_text("N = many\n")
        with pytest.raises(ConfigError):
            ConfigManager.parse_text("lr_img = -1\n")
        with pytest.raises(ConfigError):
            ConfigManager.parse_text("label_mode = fuzzy\n")
        with pytest.raises(ConfigError):
            ConfigManager.parse_text("hidden = 4,x\n")

    def test_range_order_error_names_t_init_line(self):
        """Test T_init > T_plus is reported on the T_init line"""
        with pytest.raises(ConfigError, match="line 2: "):
            ConfigManager.parse_text("T_minus = 0\nT_init = 30\nT_plus = 20\n")

    def test_builders(self):
        """Test network, toy data, schedule and evaluation settings follow the keys"""
        config = ConfigManager.parse_text(TINY_CONFIG)
        spec = config.network_spec()
        assert spec.input_dim == 4 and spec.num_classes == 3 and spec.hidden == (6,)
        assert config.schedule().describe() == "0:1:2"
        assert config.toy_spec().per_class == 10
        assert config.distill_config(expert_dir="x").expert_dir == "x"
        assert config.eval_config(seeds=1).seeds == 1

    def test_overrides(self):
        """Test CLI values replace file values and None is ignored"""
        config = ConfigManager.apply_overrides(RunConfig(), seed=9, label_mode=None, **parse_range("1:2:3"))
        assert config.seed == 9
        assert config.label_mode == "hard"
        assert config.schedule().describe() == "1:2:3"
        with pytest.raises(ConfigError):
            ConfigManager.apply_overrides(RunConfig(), **parse_range("5:2:3"))

    def test_parse_range(self):
        """Test malformed range strings"""
        with pytest.raises(ConfigError):
            parse_range("1:2")
        with pytest.raises(ConfigError):
            parse_range("a:b:c")

    def test_echo_and_env(self, monkeypatch):
        """Test the effective config echo and the environment fallback"""
        with tempfile.TemporaryDirectory() as temp_dir:
            path = write_config(temp_dir)
            echo = Path(temp_dir) / "out" / "effective_config.cfg"
            config = parse_config(path, echo_path=echo)
            assert ConfigManager.load_from_file(echo) == config
            monkeypatch.setenv(CONFIG_ENV, str(path))
            assert ConfigManager.load_from_env() == config
        monkeypatch.delenv(CONFIG_ENV)
        assert ConfigManager.load_from_env() == RunConfig()


class TestPresets:
    """Test the YAML hyper-parameter presets"""

    def test_cifar100_row(self):
        """Test the applied keys of the first preset"""
        values = preset_values("cifar100")
        assert values == {"N": 40, "M": 2, "T_minus": 0, "T_init": 15, "T_plus": 20,
                          "interval": 100, "syn_batch": 1000}

    def test_tiny_imagenet_row(self):
        """Test the second preset's inner steps and interval"""
        values = preset_values("tiny_imagenet")
        assert values["N"] == 25
        assert values["interval"] == 250

    def test_preset_beneath_file_values(self):
        """Test explicit keys win over the preset"""
        config = ConfigManager.parse_text("preset = tiny_imagenet\nN = 7\n")
        assert config.N == 7
        assert config.interval == 250
        assert config.ipc == RunConfig().ipc

    def test_unknown_preset(self):
        """Test a preset name that does not exist"""
        with pytest.raises(ConfigError):
            preset_values("imagenet-1k")

    def test_stages(self):
        """Test the ordered early, medium and late stages"""
        stages, reference = stage_definitions()
        assert reference == 80
        assert list(stages) == ["early", "medium", "late"]
        assert stages["early"] == [0, 15, 20]


class TestCommandLine:
    """Test exit codes and the end-to-end subcommands"""

    def test_unknown_subcommand(self):
        """Test usage errors exit with 2"""
        assert run_command(["bogus"]) == 2

    def test_bad_config_exits_2(self):
        """Test config errors exit with 2"""
        with tempfile.TemporaryDirectory() as temp_dir:
            path = write_config(temp_dir, "T_init = 30\nT_plus = 20\n")
            assert run_command(["distill", "--config", str(path), "--out", str(Path(temp_dir) / "out")]) == 2

    def test_missing_distilled_exits_1(self):
        """Test evaluating a directory without a distilled dataset"""
        with tempfile.TemporaryDirectory() as temp_dir:
            path = write_config(temp_dir)
            out = Path(temp_dir) / "out"
            assert run_command(["eval", "--config", str(path), "--out", str(out)]) == 1

    def test_missing_experts_exits_1(self):
        """Test distilling before any experts exist"""
        with tempfile.TemporaryDirectory() as temp_dir:
            path = write_config(temp_dir)
            assert run_command(["distill", "--config", str(path), "--out", str(Path(temp_dir) / "out")]) == 1

    def test_expert_count_selects_buffers(self, caplog):
        """Test --experts loads exactly that many buffers and too few on disk exits 1"""
        with tempfile.TemporaryDirectory() as temp_dir:
            path = write_config(temp_dir)
            out = Path(temp_dir) / "out"
            common = ["--config", str(path), "--out", str(out)]
            assert run_command(["gen-experts", *common, "--experts", "3", "--quiet"]) == 0
            assert len(list((out / "experts").iterdir())) == 3

            with caplog.at_level(logging.INFO):
                assert run_command(["distill", *common, "--experts", "1"]) == 0
            assert any("Loaded 1 experts" in message for message in caplog.messages)

            assert run_command(["distill", *common, "--experts", "4", "--quiet"]) == 1
            assert run_command(["ablate", *common, "--experts", "4", "--quiet"]) == 1

    def test_largest_seed(self):
        """Test the top of the seed range trains experts and distills"""
        with tempfile.TemporaryDirectory() as temp_dir:
            path = write_config(temp_dir)
            common = ["--config", str(path), "--out", str(Path(temp_dir) / "out"),
                      "--seed", str(2 ** 64 - 1), "--quiet"]
            assert run_command(["gen-experts", *common]) == 0
            assert run_command(["distill", *common]) == 0

    def test_pipeline(self, capsys):
        """Test gen-experts, distill, eval, render, inspect-buffer and ablate on a tiny config"""
        with tempfile.TemporaryDirectory() as temp_dir:
            path = write_config(temp_dir)
            out = Path(temp_dir) / "out"
            common = ["--config", str(path), "--out", str(out), "--quiet"]

            assert run_command(["gen-experts", *common]) == 0
            assert sorted(p.name for p in (out / "experts").iterdir()) == ["expert_0.trjb", "expert_1.trjb"]

            assert run_command(["distill", *common]) == 0
            for name in ("metrics.csv", "grid.png", "grid_initial_vs_final.png",
                         "oscillation_report.json", "effective_config.cfg"):
                assert (out / name).exists(), name
            assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["ckpt_2", "ckpt_3"]
            assert (out / "distilled" / "labels.txt").exists()
            with open(out / "metrics.csv", newline='') as f:
                assert len(list(csv.DictReader(f))) == 3

            assert run_command(["eval", *common]) == 0
            assert (out / "label_audit.txt").read_text().startswith("label audit: OK")
            with open(out / "eval_report.csv", newline='') as f:
                rows = [row for row in csv.reader(f) if row and not row[0].startswith("#")]
            assert rows[0] == ["seed", "accuracy"] and len(rows) == 3
            assert (out / "baseline_report.csv").exists()

            assert run_command(["render", *common]) == 0

            capsys.readouterr()
            assert run_command(["inspect-buffer", str(out / "experts" / "expert_0.trjb"), *common]) == 0
            printed = capsys.readouterr().out
            assert "n: 8" in printed
            assert "distance profile (M=1):" in printed

            assert run_command(["ablate", *common]) == 0
            with open(out / "ablation.csv", newline='') as f:
                reader = csv.DictReader(f)
                assert reader.fieldnames == ABLATION_COLUMNS
                rows = list(reader)
            assert [row["range"] for row in rows] == ["early", "medium", "late"]
            assert [(row["T_minus"], row["T_init"], row["T_plus"]) for row in rows] == \
                [("0", "1", "2"), ("3", "4", "6"), ("7", "7", "7")]
            assert all(0.0 <= float(row["mean"]) <= 1.0 for row in rows)

    def test_range_flag_overrides_file(self):
        """Test --range lands in the effective config"""
        with tempfile.TemporaryDirectory() as temp_dir:
            path = write_config(temp_dir)
            out = Path(temp_dir) / "out"
            run_command(["distill", "--config", str(path), "--out", str(out), "--range", "0:0:1", "--quiet"])
            echoed = ConfigManager.load_from_file(out / "effective_config.cfg")
            assert echoed.schedule().describe() == "0:0:1"


TOY_CFG = Path(__file__).parent.parent / "config" / "toy.cfg"


@pytest.fixture(scope="module")
def toy_out():
    """Expert trajectories for config/toy.cfg in a scratch output directory"""
    with tempfile.TemporaryDirectory() as temp_dir:
        out = Path(temp_dir) / "toy"
        assert run_command(["gen-experts", "--config", str(TOY_CFG), "--out", str(out), "--quiet"]) == 0
        yield out


@pytest.fixture(scope="module")
def toy_distillations(toy_out):
    """Five seeded distillations with the toy run's own matching range"""
    config = ConfigManager.load_from_file(TOY_CFG)
    train, test = real_data(config)
    spec = config.network_spec()
    base = config.distill_config(expert_dir=str(toy_out / "experts"))
    pool = ExpertPool.from_directory(base.expert_dir, base.dtype, count=config.experts)
    runs = []
    for seed in spawn_seeds(config.seed, 5):
        dconf = replace(base, seed=seed)
        initial = prepare_synthetic(dconf, train, spec, pool)
        runs.append(run_distillation(dconf, train, spec, pool, syn=initial.clone()))
    return config, train, test, runs


@pytest.mark.slow
class TestToyBenchmark:
    """Test the shipped toy config end to end at full length"""

    def test_loss_descends_for_most_seeds(self, toy_distillations):
        """Test the last tenth of the matching loss sits below the first tenth in at least 4 of 5 runs"""
        _, _, _, runs = toy_distillations
        descending = 0
        for _, log in runs:
            first, last = log.window_means()
            descending += last < first
        assert descending >= 4

    def test_beats_random_subset(self, toy_distillations):
        """Test distilled images beat an equally sized random real subset by 5 points"""
        config, train, test, runs = toy_distillations
        distilled = statistics.fmean(evaluate(syn, test, config.eval_config()).mean for syn, _ in runs)
        baseline = baseline_random_subset(train, test, config.ipc, config.eval_config(seeds=25))
        assert distilled >= baseline.mean + 0.05

    def test_ablation_orders_stages(self, toy_out):
        """Test early >= medium >= late accuracy and that late images barely move"""
        assert run_command(["ablate", "--config", str(TOY_CFG), "--out", str(toy_out), "--quiet"]) == 0
        with open(toy_out / "ablation.csv", newline='') as f:
            rows = {row["range"]: row for row in csv.DictReader(f)}
        early, medium, late = (float(rows[name]["mean"]) for name in ("early", "medium", "late"))
        assert early >= medium >= late
        assert early - late >= 0.03
        assert float(rows["late"]["image_delta"]) < 0.1 * float(rows["early"]["image_delta"])
        for name in ("early", "medium", "late"):
            assert (toy_out / "ablation" / f"{name}_grid.png").exists()
