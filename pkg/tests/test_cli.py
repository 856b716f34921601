import pytest
import json
import os
import sys

import yaml
from click.testing import CliRunner

# Add parent directory to path to allow imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from qdistill.cli.commands import cli


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny four-class configuration with one-epoch schedules."""
    root = tmp_path_factory.mktemp("cli")
    config = {
        "seed": 0,
        "data": {"num_classes": 4, "samples_per_class": [12, 12, 10, 10]},
        "train": {"epochs": 1, "milestones": [1], "freeze_epoch": 1, "batch_size": 16},
        "paths": {name: str(root / f"{name}.qdk")
                  for name in ("teacher", "student", "kd_student", "quantized", "qd_student")},
        "bench": {"iterations": 5, "warmup": 1},
    }
    (root / "config.yaml").write_text(yaml.dump(config))
    return root


def parse_report(output):
    """First JSON object in the command output; log lines may surround it."""
    return json.JSONDecoder().raw_decode(output[output.index("{"):])[0]


def invoke(workspace, *args):
    return CliRunner().invoke(cli, [args[0], "--config", str(workspace / "config.yaml"), *args[1:]])


@pytest.fixture(scope="module")
def trained(workspace):
    result = invoke(workspace, "train-teacher")
    assert result.exit_code == 0, result.output
    result = invoke(workspace, "train-student")
    assert result.exit_code == 0, result.output
    return workspace


def test_train_teacher_writes_model_and_history(trained):
    assert (trained / "teacher.qdk").exists()
    history = json.loads((trained / "teacher.history.json").read_text())
    assert len(history) == 1
    assert history[0]["phase"] == "teacher"
    assert set(history[0]) == {"phase", "epoch", "lr", "loss", "val_mpca"}


def test_override_flags_reach_the_run(trained):
    out = trained / "teacher-2.qdk"
    result = invoke(trained, "train-teacher", "--out", str(out), "--teacher.epochs", "2")
    assert result.exit_code == 0, result.output
    assert len(json.loads((trained / "teacher-2.history.json").read_text())) == 2


def test_eval_prints_json_report(trained):
    result = invoke(trained, "eval", str(trained / "teacher.qdk"), "--split", "val")
    assert result.exit_code == 0, result.output
    report = parse_report(result.output)
    assert report["split"] == "val" and report["quantized"] is False
    assert 0.0 <= report["mean_per_class_accuracy"] <= 1.0
    assert len(report["per_class_accuracy"]) == 4


def test_quantize_then_eval_and_bench(trained):
    result = invoke(trained, "quantize")
    assert result.exit_code == 0, result.output
    assert (trained / "quantized.qdk").exists()

    report_path = trained / "quantized-eval.json"
    result = invoke(trained, "eval", str(trained / "quantized.qdk"), "--out", str(report_path))
    assert result.exit_code == 0, result.output
    assert json.loads(report_path.read_text())["quantized"] is True

    bench_path = trained / "bench.json"
    result = invoke(trained, "bench", str(trained / "quantized.qdk"), "-n", "3", "--out", str(bench_path))
    assert result.exit_code == 0, result.output
    bench = json.loads(bench_path.read_text())
    assert bench["iterations"] == 3 and bench["quantized"] is True
    assert bench["size_bytes"] == (trained / "quantized.qdk").stat().st_size


def test_compare_two_models(trained):
    result = invoke(trained, "compare", str(trained / "teacher.qdk"), str(trained / "student.qdk"))
    assert result.exit_code == 0, result.output
    report = parse_report(result.output)
    assert len(report["per_class_delta"]) == 4
    assert report["a"]["model"].endswith("teacher.qdk")


def test_qat_distill_writes_quantized_student(trained):
    result = invoke(trained, "qat-distill", "--kd.beta", "0.5")
    assert result.exit_code == 0, result.output
    assert (trained / "qd_student.qdk").exists()
    assert json.loads((trained / "qd_student.history.json").read_text())[0]["phase"] == "qat-distill"


def test_errors_print_one_line_and_exit_1(trained):
    result = invoke(trained, "eval", str(trained / "missing.qdk"))
    assert result.exit_code == 1
    assert "error=ConfigurationError message=" in result.output

    result = invoke(trained, "train-teacher", "--epochs", "3")
    assert result.exit_code == 1
    assert "ambiguous" in result.output
