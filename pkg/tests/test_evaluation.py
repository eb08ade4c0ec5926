import json

import numpy as np
import pytest

from src.config import DatasetConfig, ExperimentConfig, config_hash, load_experiment_config, settings
from src.exceptions import ConfigurationError, InputError
from src.modules.search import CtcSearcher
from src.services.evaluation import ExperimentRunner, compute_metrics, mean_f1, run_experiment
from src.utils.serialization import read_csv


def membership(n, members):
    row = np.zeros(n, dtype=bool)
    row[list(members)] = True
    return row


def test_metrics_golden_values():
    m = compute_metrics({0, 1, 2}, membership(10, {1, 2, 3, 4}))
    assert m.pre == pytest.approx(2 / 3)
    assert m.rec == pytest.approx(1 / 2)
    assert m.f1 == pytest.approx(4 / 7)
    assert m.acc == pytest.approx(0.7)

    half = compute_metrics({0, 1}, {1, 2}, n=4)
    assert half.as_dict() == {"acc": 0.5, "pre": 0.5, "rec": 0.5, "f1": 0.5}


def test_metrics_edge_cases():
    everything = compute_metrics(set(range(6)), membership(6, {0, 3}))
    assert everything.rec == 1.0 and everything.pre == pytest.approx(1 / 3)

    nothing = compute_metrics(set(), membership(6, {0, 3}))
    assert nothing.pre == 0.0 and nothing.f1 == 0.0 and nothing.acc == pytest.approx(4 / 6)

    exact = compute_metrics({5, 7}, {5, 7}, n=9)
    assert exact.as_dict() == {"acc": 1.0, "pre": 1.0, "rec": 1.0, "f1": 1.0}

    with pytest.raises(InputError):
        compute_metrics({1}, membership(4, set()))
    with pytest.raises(InputError):
        compute_metrics({1}, {1})


def test_f1_stays_in_unit_interval():
    rng = np.random.default_rng(0)
    for _ in range(200):
        truth = rng.random(20) < 0.3
        truth[0] = True
        pred = set(np.flatnonzero(rng.random(20) < 0.4).tolist())
        m = compute_metrics(pred, truth)
        assert 0.0 <= m.f1 <= 1.0 and 0.0 <= m.acc <= 1.0


def test_mean_f1_of_oracle_is_one(sbm_taskset):
    def oracle(task):
        return task.queryset_membership.astype(float)
    assert mean_f1(oracle, sbm_taskset.test, 0.5) == 1.0


@pytest.fixture
def experiment(tmp_path, small_scenario, small_cgnp):
    def factory(model="ctc", out="run", **updates):
        return ExperimentConfig(
            model=model, output_dir=tmp_path / out,
            dataset=DatasetConfig(kind="sbm", sbm_blocks=[40, 40], sbm_p_in=0.3, sbm_p_out=0.02),
            scenario=small_scenario, cgnp=small_cgnp, **updates,
        )
    return factory


def test_ctc_run_writes_results(experiment):
    cfg = experiment()
    table = ExperimentRunner(cfg).run()

    assert table.train_seconds == 0.0
    assert len(table.rows) == 2 * 10
    results = read_csv(table.paths["results"])
    assert list(results.columns) == ["task_id", "query_id", "acc", "pre", "rec", "f1"]
    with open(table.paths["results"], encoding="utf-8") as f:
        assert f.readline().strip() == f"# config_hash={config_hash(cfg)} seed=0"

    summary = json.loads(open(table.paths["summary"], encoding="utf-8").read())
    assert summary["model"] == "ctc" and summary["n_queries"] == 20
    assert summary["gpn_queryset_labels"] is False
    assert len(summary["task_digests"]["test"]) == 2
    assert "predict_ms" in read_csv(table.paths["timing"]).columns


def test_rerun_is_byte_identical(experiment):
    cfg = experiment()
    first = ExperimentRunner(cfg).run()
    content = open(first.paths["results"], "rb").read()
    second = run_experiment(cfg)
    assert open(second.paths["results"], "rb").read() == content


def test_failed_evaluation_flushes_partial_rows(experiment, tmp_path):
    class Flaky(CtcSearcher):
        calls = 0

        def predict(self, task):
            Flaky.calls += 1
            if Flaky.calls > 1:
                raise RuntimeError("boom")
            return super().predict(task)

    cfg = experiment()
    with pytest.raises(RuntimeError):
        ExperimentRunner(cfg).run(searcher=Flaky())
    partial = read_csv(tmp_path / "run" / "ctc_sgsc_1shot.partial.csv")
    assert len(partial) == 10


def test_trained_checkpoint_restores_predictions(experiment):
    cfg = experiment(model="cgnp-ip")
    runner = ExperimentRunner(cfg)
    taskset = runner.build_tasks()
    searcher, _ = runner.train(taskset)
    assert runner.checkpoint_path.exists()

    restored = ExperimentRunner(cfg).restore()
    task = taskset.test[0]
    np.testing.assert_allclose(restored.predict(task), searcher.predict(task), rtol=1e-6)


def test_tasks_dir_is_reused(experiment, tmp_path):
    cfg = experiment(tasks_dir=tmp_path / "tasks")
    built = ExperimentRunner(cfg).build_tasks()
    assert (tmp_path / "tasks" / "manifest.json").exists()
    reloaded = ExperimentRunner(cfg).build_tasks()
    assert ExperimentRunner(cfg).digests(built) == ExperimentRunner(cfg).digests(reloaded)


def write_config(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_config_file_and_overrides(tmp_path):
    path = write_config(tmp_path / "c.ini", """
[run]
model = maml
seed = 4

[dataset]
kind = sbm
sbm_blocks = 30, 30

[scenario]
shots = 1
query_count = 12

[baseline]
inner_steps_train = 3
""")
    cfg = load_experiment_config(path, {"scenario.shots": "5", "seed": None})
    assert cfg.model == "maml" and cfg.seed == 4
    assert cfg.scenario.rng_seed == 4
    assert cfg.dataset.sbm_blocks == [30, 30]
    assert cfg.scenario.shots == 5 and cfg.scenario.query_count == 12
    assert cfg.baseline.inner_steps_train == 3


@pytest.mark.parametrize("text", [
    "[nonsense]\nx = 1\n",
    "[scenario]\nshots = 3\n",
    "[scenario]\nunknown_key = 1\n",
    "[run]\nmodel = transformer\n",
    "[dataset]\nkind = edgelist\n",
])
def test_invalid_configs(tmp_path, text):
    with pytest.raises(ConfigurationError):
        load_experiment_config(write_config(tmp_path / "bad.ini", text))


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_experiment_config(tmp_path / "absent.ini")


def test_seed_from_environment(monkeypatch):
    monkeypatch.setattr(settings, "META_CS_SEED", "42")
    cfg = load_experiment_config(None, {"seed": 1})
    assert cfg.seed == 42 and cfg.scenario.rng_seed == 42


def test_pinned_sampling_seed_yields_to_an_explicit_seed(tmp_path):
    path = write_config(tmp_path / "pinned.ini", "[run]\nseed = 2\n\n[scenario]\nrng_seed = 9\n")
    assert load_experiment_config(path).scenario.rng_seed == 9
    overridden = load_experiment_config(path, {"seed": 5})
    assert overridden.seed == 5 and overridden.scenario.rng_seed == 5
