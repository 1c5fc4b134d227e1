import json
import logging
from pathlib import Path

import pytest

from src.cli import GRADCHECK_TOLERANCE, main, run_gradcheck
from src.config import RunConfig, apply_override, config_tree, configure_logging, load_config
from src.errors import ConfigError

DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "default.json"

TINY_RUN = {
    "seed": 2,
    "data": {
        "n_classes": 4, "n_train": 24, "n_val": 8, "n_test": 16, "latent_dim": 4, "raw_dims": [8, 8],
        "patch_sizes": [4, 4], "noise_sigma": [0.3, 0.3], "exclusive_m1": [0], "exclusive_m2": [1], "seed": 3,
    },
    "model": {"d_model": 8, "n_layers": 1, "n_heads": 2, "ff_dim": 16, "lora_dropout": 0.0},
    "pretrain": {"epochs": 1, "batch_size": 8},
    "train": {"epochs": 2, "warmup_epochs": 1, "batch_size": 8, "lr": 0.01},
    "protocols": {"train": "ratio:100:50", "test": ["complete", "inference_only:m2"]},
    "eval": {"sweep_values": [100, 50, 0]},
    "ablation": {"axis": "mode", "values": ["baseline", "cmpt"], "seeds": [1]},
}


@pytest.fixture
def tiny_run(tmp_path):
    path = tmp_path / "tiny.json"
    tree = json.loads(json.dumps(TINY_RUN))
    tree["output"] = {"out_dir": str(tmp_path / "run")}
    path.write_text(json.dumps(tree))
    return path


def run(*argv):
    return main([str(a) for a in argv])


class TestConfig:
    def test_default_file_matches_built_in_defaults(self):
        assert load_config(DEFAULT_CONFIG).to_dict() == RunConfig().to_dict()

    def test_train_section_uses_lambda_key(self):
        tree = config_tree(RunConfig())
        assert tree["train"]["lambda"] == 0.2
        assert "seed" not in tree["train"]

    def test_run_seed_reaches_training(self):
        assert load_config(seed=9).train_config.seed == 9

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"model": {"depth": 3}}))
        with pytest.raises(ConfigError, match="model.depth"):
            load_config(path)

    def test_overrides(self):
        config = load_config(overrides=["train.lambda=0.0", "model.cls_attends_cmpt=false", "protocols.train=eta:50"])
        assert config.train.lam == 0.0
        assert config.model.cls_attends_cmpt is False
        assert config.protocols.train == "eta:50"

    @pytest.mark.parametrize("assignment", ["train.gamma=1", "model=3", "nonsense"])
    def test_bad_override(self, assignment):
        with pytest.raises(ConfigError):
            apply_override(config_tree(RunConfig()), assignment)

    @pytest.mark.parametrize(
        "assignment",
        ["model.n_heads=3", "train.dropout_probs=[0.5, 0.5, 0.5]", "protocols.train=half", "eval.sweep_axis=m3"],
    )
    def test_invalid_values(self, assignment):
        with pytest.raises(ConfigError):
            load_config(overrides=[assignment])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")

    def test_log_level_from_environment(self, monkeypatch):
        monkeypatch.setenv("CMPT_LOG", "debug")
        assert configure_logging() == logging.DEBUG
        monkeypatch.setenv("CMPT_LOG", "loud")
        with pytest.raises(ConfigError):
            configure_logging()


class TestGradcheck:
    def test_tiny_model(self, tiny_run):
        error, n_params = run_gradcheck(load_config(tiny_run), seed=0)
        assert error < GRADCHECK_TOLERANCE
        assert n_params == 180

    @pytest.mark.slow
    def test_default_model(self):
        error, _ = run_gradcheck(load_config(DEFAULT_CONFIG), seed=0)
        assert error < GRADCHECK_TOLERANCE

    def test_command(self, tiny_run, capsys):
        assert run("gradcheck", "--config", tiny_run) == 0
        assert json.loads(capsys.readouterr().out)["max_rel_error"] < GRADCHECK_TOLERANCE


class TestCommandLine:
    def test_train_without_pretrain_fails_with_data_error(self, tiny_run, capsys):
        assert run("gen-data", "--config", tiny_run) == 0
        assert run("train", "--config", tiny_run) == 3
        assert capsys.readouterr().err.splitlines()[-1].startswith("ERR 3: missing checkpoint")

    def test_config_error_exit_code(self, tiny_run, capsys):
        assert run("gen-data", "--config", tiny_run, "--set", "model.d_model=seven") == 2
        assert "ERR 2:" in capsys.readouterr().err

    def test_ablation_values_need_an_axis(self, tiny_run, capsys):
        assert run("ablate", "--config", tiny_run, "--values", "0.0", "0.5") == 2
        assert capsys.readouterr().err.splitlines()[-1] == "ERR 2: --values needs --axis"

    def test_full_pipeline(self, tiny_run, tmp_path, capsys):
        out = tmp_path / "run"
        assert run("gen-data", "--config", tiny_run) == 0
        stats = json.loads(capsys.readouterr().out)
        assert stats["train"]["n_complete"] == 24

        assert run("pretrain", "--config", tiny_run) == 0
        assert set(json.loads(capsys.readouterr().out)) == {"m1", "m2"}
        assert (out / "pretrained_m1.cmpt").exists()

        assert run("train", "--config", tiny_run) == 0
        epochs = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
        assert [entry["epoch"] for entry in epochs] == [0, 1]
        assert len((out / "train_log.jsonl").read_text().splitlines()) == 2

        attention = tmp_path / "attention.json"
        assert run("eval", "--config", tiny_run, "--format", "json", "--format", "csv",
                   "--dump-attention", attention) == 0
        document = json.loads(capsys.readouterr().out)
        assert document["kind"] == "transfer"
        assert document["result"]["train_protocol"] == "ratio:100:50"
        assert list(document["result"]["scenarios"]) == ["complete", "inference_only:m2"]
        assert len((out / "reports" / "eval.csv").read_text().splitlines()) == 1 + 2 * 3
        assert attention.exists()

        assert run("sweep", "--config", tiny_run, "--format", "plotdata", "--format", "json") == 0
        sweep = json.loads(capsys.readouterr().out)
        assert [row["x"] for row in sweep["result"]["rows"]] == [100.0, 50.0, 0.0]

        plot = tmp_path / "sweep.png"
        assert run("report", "--input", out / "reports" / "sweep_m2.json", "--format", "csv", "--plot", plot) == 0
        assert len(capsys.readouterr().out.splitlines()) == 1 + 3 * 3
        assert plot.exists()

        delta_plot = tmp_path / "delta.png"
        assert run("analyze", "--config", tiny_run, "--reference", out / "model.cmpt", "--plot", delta_plot) == 0
        analysis = json.loads(capsys.readouterr().out)
        assert analysis["kind"] == "dependence"
        assert "alignment" in analysis["meta"]
        assert all(row["delta"] == 0.0 for row in analysis["meta"]["per_class_delta"]["inference_only:m1"])
        rows = analysis["meta"]["per_class_delta"]["inference_only:m2"]
        tagged = {row["class_index"]: row["exclusive_to"] for row in rows}
        assert tagged[0] == "m1" and tagged[1] == "m2"
        assert delta_plot.exists()

        assert run("ablate", "--config", tiny_run, "--axis", "lambda", "--values", "0.0", "0.5") == 0
        grid = json.loads(capsys.readouterr().out)
        assert grid["result"]["values"] == [0.0, 0.5]
        assert len(grid["result"]["cells"]) == 2

    def test_report_rejects_foreign_json(self, tmp_path, capsys):
        path = tmp_path / "x.json"
        path.write_text("{}")
        assert run("report", "--input", path) == 3
        assert "ERR 3:" in capsys.readouterr().err

    def test_repeated_runs_write_identical_reports(self, tiny_run, tmp_path, capsys):
        reports = []
        for _ in range(2):
            for command in ("gen-data", "pretrain", "train", "eval"):
                assert run(command, "--config", tiny_run) == 0
            reports.append((tmp_path / "run" / "reports" / "eval.json").read_bytes())
        capsys.readouterr()
        assert reports[0] == reports[1]
