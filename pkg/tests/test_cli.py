import io
import json
import re

import numpy as np
import pytest

from cardproj import cli
from cardproj import diffgraph as dg
from cardproj import model as md
from cardproj import training as tr

TINY_CONFIG = {
    "seed": 0,
    "data": {
        "synthetic_examples": 24,
        "label_count": 6,
        "input_dim": 12,
        "modulus": 4,
        "min_words": 2,
        "max_words": 10,
        "fractions": [0.75, 0.25, 0.0],
    },
    "model": {
        "max_cardinality": 4,
        "feature_hidden": 4,
        "feature_dim": 3,
        "global_hidden": 4,
        "cardinality_hidden": 4,
    },
    "inference": {"steps": 2},
    "optimizer": {"epochs": 2, "batch_size": 8},
}

METRIC_LINE = re.compile(
    r"^epoch=(\d+) split=(train|dev) loss=(-?\d+\.\d{6}) f1=(\d\.\d{6}) "
    r"f1_label=\d\.\d{6} card_mse=\d+\.\d{6}$"
)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Train once on the tiny config; several tests read the artifacts."""
    root = tmp_path_factory.mktemp("cli-train")
    config = root / "config.json"
    config.write_text(json.dumps(TINY_CONFIG))
    checkpoint = root / "model.npz"
    metrics = root / "metrics.log"
    buffer = io.StringIO()
    import contextlib

    with contextlib.redirect_stdout(buffer):
        code = cli.main([
            "train", "--config", str(config),
            "--checkpoint", str(checkpoint), "--metrics", str(metrics),
        ])
    assert code == 0
    return {
        "config": config,
        "checkpoint": checkpoint,
        "metrics": metrics.read_text(),
        "stdout": buffer.getvalue(),
    }


class TestRunConfig:
    def test_defaults(self):
        cfg = cli.load_run_config()
        assert cfg.seed == 0
        assert cfg.inference.variant == "pc"
        assert cfg.optimizer.epochs == 20
        assert cfg.data.fractions == (0.8, 0.1, 0.1)

    def test_file_values_and_overrides(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": 3, "inference": {"steps": 5}}))
        cfg = cli.load_run_config(path)
        assert cfg.seed == 3
        assert cfg.inference.steps == 5
        cfg = cli.load_run_config(path, ["inference.steps=7", "seed=9"])
        assert cfg.seed == 9
        assert cfg.inference.steps == 7

    def test_string_override_needs_no_quotes(self):
        cfg = cli.load_run_config(overrides=["inference.variant=sc"])
        assert cfg.inference.variant == "sc"

    def test_canonical_round_trip(self, tmp_path):
        first = cli.load_run_config(overrides=["inference.steps=4", "data.modulus=6"])
        path = tmp_path / "canon.json"
        path.write_text(cli.serialize_run_config(first))
        second = cli.load_run_config(path)
        assert first == second
        assert cli.serialize_run_config(second) == path.read_text()

    def test_canonical_dict_materializes_defaults(self):
        doc = cli.canonical_dict(cli.load_run_config())
        assert doc["optimizer"]["learning_rate"] == 0.1
        assert doc["inference"]["momentum"] == 0.9
        assert doc["model"]["feature_hidden"] == 150
        assert doc["data"]["fractions"] == [0.8, 0.1, 0.1]

    @pytest.mark.parametrize(
        "raw, pattern",
        [
            ({"frobnicate": 1}, "unknown config key frobnicate"),
            ({"inference": {"frobnicate": 1}}, "unknown config key inference.frobnicate"),
            ({"seed": "zero"}, "seed must be an integer"),
            ({"inference": {"steps": -1}}, "inference:"),
            ({"inference": 7}, "must be an object"),
        ],
    )
    def test_bad_configs_name_the_problem(self, tmp_path, raw, pattern):
        path = tmp_path / "c.json"
        path.write_text(json.dumps(raw))
        with pytest.raises(cli.ConfigError, match=re.escape(pattern)):
            cli.load_run_config(path)

    def test_invalid_json_and_missing_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{nope")
        with pytest.raises(cli.ConfigError, match="invalid JSON"):
            cli.load_run_config(path)
        with pytest.raises(cli.ConfigError, match="not found"):
            cli.load_run_config(tmp_path / "absent.json")

    @pytest.mark.parametrize("spec", ["inference.steps", "a.b.c=1"])
    def test_bad_override_specs(self, spec):
        with pytest.raises(cli.ConfigError):
            cli.load_run_config(overrides=[spec])


class TestUsageErrors:
    def test_unknown_command_exits_one(self, capsys):
        assert cli.main(["frobnicate"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_unknown_flag_exits_one(self, capsys):
        assert cli.main(["train", "--frobnicate"]) == 1

    def test_missing_required_flag_exits_one(self, capsys):
        assert cli.main(["eval"]) == 1


class TestProject:
    def run(self, argv, stdin=None, monkeypatch=None):
        if stdin is not None:
            monkeypatch.setattr("sys.stdin", io.StringIO(stdin))
        return cli.main(["project", *argv])

    def test_capped_worked_example(self, capsys, monkeypatch):
        code = self.run(["capped", "--z", "2"], "1.5 0.8 -0.2\n", monkeypatch)
        assert code == 0
        assert capsys.readouterr().out.strip() == "1 1 0"

    def test_simplex_symmetry(self, capsys, monkeypatch):
        code = self.run(["simplex", "--z", "1"], "0.5 0.5 0.5\n", monkeypatch)
        assert code == 0
        out = capsys.readouterr().out.split()
        np.testing.assert_allclose([float(x) for x in out], 1.0 / 3.0, rtol=1e-9)

    def test_input_file_multiple_lines(self, capsys, tmp_path):
        path = tmp_path / "v.txt"
        path.write_text("1.5 0.8 -0.2\n0.1 0.2 0.3\n")
        assert cli.main(["project", "capped", "--z", "1", "--input", str(path)]) == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert len(lines) == 2
        for line in lines:
            values = np.array([float(x) for x in line.split()])
            assert abs(values.sum() - 1.0) < 1e-9
            assert np.all(values >= -1e-12) and np.all(values <= 1 + 1e-12)

    def test_soft_operators_near_feasible(self, capsys, monkeypatch):
        for op in ("dykstra", "fast"):
            monkeypatch.setattr("sys.stdin", io.StringIO("0.9 0.1 0.5 0.7\n"))
            assert cli.main(["project", op, "--z", "2", "--sharpness", "50"]) == 0
            values = np.array([float(x) for x in capsys.readouterr().out.split()])
            assert abs(values.sum() - 2.0) < 0.05

    def test_infeasible_mass_exits_nonzero_with_line(self, capsys, monkeypatch):
        code = self.run(["capped", "--z", "5"], "1 0 0\n", monkeypatch)
        assert code == 1
        assert "line 1" in capsys.readouterr().err

    def test_diagnostics_go_to_stderr(self, capsys, monkeypatch):
        code = self.run(
            ["capped", "--z", "2", "--diagnostics"], "1.5 0.8 -0.2\n", monkeypatch
        )
        assert code == 0
        captured = capsys.readouterr()
        assert "residual_sum" in captured.err
        assert "residual_sum" not in captured.out

    def test_malformed_vector_names_line(self, capsys, monkeypatch):
        code = self.run(["capped", "--z", "1"], "0.5 0.5\nzap 0.5\n", monkeypatch)
        assert code == 1
        assert "line 2" in capsys.readouterr().err

    def test_missing_z_is_usage_error(self, capsys, monkeypatch):
        assert self.run(["capped"], "0.5 0.5\n", monkeypatch) == 1

    def test_empty_input_is_usage_error(self, capsys, monkeypatch):
        assert self.run(["capped", "--z", "1"], "", monkeypatch) == 1

    def test_matrix_operator(self, capsys, monkeypatch):
        stdin = "0.8 0.4\n0.3 0.9\n0.5 0.2\n"
        monkeypatch.setattr("sys.stdin", io.StringIO(stdin))
        code = cli.main(["project", "matrix", "--col-sums", "2,1", "--diagnostics"])
        assert code == 0
        captured = capsys.readouterr()
        rows = np.array(
            [[float(x) for x in line.split()] for line in captured.out.strip().split("\n")]
        )
        assert rows.shape == (3, 2)
        np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-4)
        np.testing.assert_allclose(rows.sum(axis=0), [2.0, 1.0], atol=1e-4)
        assert "residual_rows" in captured.err

    def test_matrix_requires_col_sums(self, capsys, monkeypatch):
        monkeypatch.setattr("sys.stdin", io.StringIO("0.5 0.5\n"))
        assert cli.main(["project", "matrix"]) == 1

    def test_matrix_ragged_rows_rejected(self, capsys, monkeypatch):
        monkeypatch.setattr("sys.stdin", io.StringIO("0.5 0.5\n0.2\n"))
        code = cli.main(["project", "matrix", "--col-sums", "1,1"])
        assert code == 1
        assert "line 2" in capsys.readouterr().err


class TestTrainCommand:
    def test_writes_checkpoint_and_metrics(self, trained):
        assert trained["checkpoint"].exists()
        lines = trained["metrics"].strip().split("\n")
        assert len(lines) == 6  # epochs 0..2, train and dev
        for line in lines:
            assert METRIC_LINE.match(line), line
        assert "best_epoch=" in trained["stdout"]
        assert "checkpoint=" in trained["stdout"]

    def test_same_seed_reproduces_metrics(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps(TINY_CONFIG))
        logs = []
        for tag in ("a", "b"):
            metrics = tmp_path / f"m-{tag}.log"
            code = cli.main([
                "train", "--config", str(config),
                "--checkpoint", str(tmp_path / f"ck-{tag}.npz"),
                "--metrics", str(metrics),
                "--set", "optimizer.epochs=1",
            ])
            assert code == 0
            logs.append(metrics.read_text())
        assert logs[0] == logs[1]

    def test_zero_epochs_checkpoint_equals_initialization(self, tmp_path, capsys):
        config = tmp_path / "config.json"
        config.write_text(json.dumps(TINY_CONFIG))
        checkpoint = tmp_path / "ck.npz"
        code = cli.main([
            "train", "--config", str(config), "--checkpoint", str(checkpoint),
            "--metrics", str(tmp_path / "m.log"), "--set", "optimizer.epochs=0",
        ])
        assert code == 0
        saved = md.load_model(checkpoint)
        fresh = md.ScoreModel(saved.config)
        for name, buf in fresh.params.items():
            np.testing.assert_array_equal(saved.params[name], buf)

    def test_missing_dataset_path_names_field(self, tmp_path, capsys):
        config = tmp_path / "config.json"
        doc = dict(TINY_CONFIG)
        doc["data"] = {"path": str(tmp_path / "absent.txt")}
        config.write_text(json.dumps(doc))
        code = cli.main(["train", "--config", str(config),
                         "--checkpoint", str(tmp_path / "ck.npz")])
        assert code == 1
        assert "data.path" in capsys.readouterr().err

    def test_diverged_training_exits_two(self, tmp_path, capsys, monkeypatch):
        def boom(*args, **kwargs):
            raise tr.TrainingDivergedError("non-finite loss nan at example 3 in epoch 1")

        monkeypatch.setattr(tr, "train", boom)
        config = tmp_path / "config.json"
        config.write_text(json.dumps(TINY_CONFIG))
        code = cli.main(["train", "--config", str(config),
                         "--checkpoint", str(tmp_path / "ck.npz"),
                         "--metrics", str(tmp_path / "m.log")])
        assert code == 2
        assert "example 3" in capsys.readouterr().err


class TestEvalCommand:
    def eval_f1(self, trained, capsys, *extra):
        code = cli.main([
            "eval", "--config", str(trained["config"]),
            "--checkpoint", str(trained["checkpoint"]), *extra,
        ])
        out = capsys.readouterr().out
        assert code == 0, out
        match = re.search(r"(?<!_)f1=(\d\.\d{6})", out)
        return float(match.group(1)), out

    def test_reproduces_logged_train_f1(self, trained, capsys):
        best_epoch = int(re.search(r"best_epoch=(\d+)", trained["stdout"]).group(1))
        logged = None
        for line in trained["metrics"].strip().split("\n"):
            m = METRIC_LINE.match(line)
            if int(m.group(1)) == best_epoch and m.group(2) == "train":
                logged = float(m.group(4))
        assert logged is not None
        got, _ = self.eval_f1(trained, capsys, "--split", "train")
        assert abs(got - logged) <= 1e-6

    def test_variant_topz_flag(self, trained, capsys):
        _, out = self.eval_f1(trained, capsys, "--split", "train",
                              "--variant", "topz")
        assert "variant=topz" in out

    def test_fixed_budget_flag(self, trained, capsys):
        _, out = self.eval_f1(trained, capsys, "--split", "train", "--z", "fixed:3")
        assert "card_mse_h=" in out

    def test_bad_budget_flag(self, trained, capsys):
        code = cli.main([
            "eval", "--config", str(trained["config"]),
            "--checkpoint", str(trained["checkpoint"]), "--z", "sometimes",
        ])
        assert code == 1
        assert "--z expects" in capsys.readouterr().err

    def test_dimension_mismatch_names_expected_and_found(self, trained, tmp_path, capsys):
        doc = json.loads(json.dumps(TINY_CONFIG))
        doc["data"]["input_dim"] = 9
        doc["data"]["max_words"] = 8
        config = tmp_path / "other.json"
        config.write_text(json.dumps(doc))
        code = cli.main([
            "eval", "--config", str(config),
            "--checkpoint", str(trained["checkpoint"]),
        ])
        assert code == 1
        err = capsys.readouterr().err
        assert "input_dim=12" in err and "input_dim=9" in err

    def test_missing_checkpoint(self, trained, tmp_path, capsys):
        code = cli.main([
            "eval", "--config", str(trained["config"]),
            "--checkpoint", str(tmp_path / "absent.npz"),
        ])
        assert code == 1
        assert "checkpoint" in capsys.readouterr().err


class TestGradcheckCommand:
    def test_default_toy_config_passes(self, capsys):
        assert cli.main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "max_rel_error=" in out
        assert "unary.w" in out

    def test_impossible_tolerance_fails(self, capsys):
        assert cli.main(["gradcheck", "--tolerance", "1e-15"]) == 1
        assert "gradient mismatch" in capsys.readouterr().err

    def test_corrupted_backward_exits_nonzero(self, capsys, monkeypatch):
        original = md.grad_global_score

        def corrupted(tm, y):
            node = original(tm, y)
            frozen = tm.tape.constant(0.5 * node.value)
            return dg.add(dg.scale(node, 0.5), frozen)

        monkeypatch.setattr(md, "grad_global_score", corrupted)
        assert cli.main(["gradcheck"]) == 1
        assert "gradient mismatch" in capsys.readouterr().err
