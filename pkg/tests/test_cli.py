import json

import pandas as pd
import pytest

from main import cli
from src.utils.serialization import read_csv

CONFIG = """
[run]
model = ctc

[dataset]
kind = sbm
sbm_blocks = 40, 40
sbm_p_in = 0.3
sbm_p_out = 0.02

[scenario]
subgraph_size = 80
query_count = 10
n_train = 4
n_valid = 2
n_test = 2
feature_mode = structural-only

[cgnp]
hidden_dim = 8
num_layers = 2
dropout = 0.0
mlp_hidden = 16
epochs = 2
lr = 0.005
valid_every = 1
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(CONFIG, encoding="utf-8")
    return str(path)


def test_no_arguments_prints_usage(capsys):
    assert cli([]) == 2
    assert "Usage" in capsys.readouterr().err


def test_usage_errors(config):
    assert cli(["no-such-command"]) == 2
    assert cli(["baseline", "--config", config, "--bogus"]) == 2
    assert cli(["run", "--config", config, "--shots", "3"]) == 2


def test_prepare_tasks(config, tmp_path):
    out = tmp_path / "prepared"
    assert cli(["prepare-tasks", "--config", config, "--out", str(out)]) == 0
    assert (out / "tasks" / "manifest.json").exists()
    assert len(list((out / "tasks" / "train").glob("*.npz"))) == 4


def test_baseline_command(config, tmp_path):
    out = tmp_path / "ctc"
    assert cli(["baseline", "--config", config, "--out", str(out)]) == 0
    results = read_csv(out / "ctc_sgsc_1shot.csv")
    assert len(results) == 20
    assert (out / "run.log").exists()


def test_train_then_evaluate(config, tmp_path):
    out = tmp_path / "cgnp"
    args = ["--config", config, "--out", str(out), "--model", "cgnp-ip"]
    assert cli(["train", *args]) == 0
    assert (out / "cgnp-ip_model.pt").exists()
    assert cli(["evaluate", *args]) == 0
    assert len(read_csv(out / "cgnp-ip_sgsc_1shot.csv")) == 20


def test_bad_config_exits_with_one(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[scenario]\nshots = 3\n", encoding="utf-8")
    assert cli(["baseline", "--config", str(path)]) == 1


def test_evaluate_without_checkpoint_fails(config, tmp_path):
    assert cli(["evaluate", "--config", config, "--out", str(tmp_path / "empty"), "--model", "maml"]) == 1


def test_same_seed_same_results(config, tmp_path):
    for name in ("a", "b"):
        assert cli(["baseline", "--config", config, "--out", str(tmp_path / name), "--seed", "3"]) == 0
    a = read_csv(tmp_path / "a" / "ctc_sgsc_1shot.csv")
    b = read_csv(tmp_path / "b" / "ctc_sgsc_1shot.csv")
    pd.testing.assert_frame_equal(a, b)


def test_experiment_flags_before_the_subcommand(config, tmp_path):
    out = tmp_path / "global"
    assert cli(["--config", config, "--seed", "3", "baseline", "--out", str(out)]) == 0
    with open(out / "ctc_sgsc_1shot.csv", encoding="utf-8") as f:
        assert f.readline().strip().endswith("seed=3")


def test_seed_changes_the_sampled_tasks(config, tmp_path):
    digests = []
    for seed in ("1", "2"):
        out = tmp_path / f"seed{seed}"
        assert cli(["prepare-tasks", "--config", config, "--out", str(out), "--seed", seed]) == 0
        manifest = json.loads((out / "tasks" / "manifest.json").read_text(encoding="utf-8"))
        digests.append([e["digest"] for e in manifest["splits"]["train"]])
    assert digests[0] != digests[1]
