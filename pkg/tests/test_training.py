import json
import time
from dataclasses import replace

import numpy as np
import pytest

from structdm.expert import ExpertConfig
from structdm.harness.demos import collect_demos, make_dataset
from structdm.harness.sweep import RESULT_COLUMNS, SweepGrid, load_grid, read_results, sweep
from structdm.harness.training import TrainConfig, evaluator, load_run_config, save_run_config, train
from structdm.ontology import default_ontology
from structdm.policies import StructuredPolicy
from structdm.replication import get_experiment


@pytest.fixture(scope="module")
def dataset(ont, small_db):
    return make_dataset(collect_demos(small_db, ExpertConfig(), 10, 0), "uhgnn", ont, small_db)


@pytest.fixture(scope="module")
def run(ont, dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt")
    pol = StructuredPolicy(ontology=ont, max_steps=1000, random_state=0)
    return train(pol, dataset, 100, checkpoint_dir=out), out


def test_checkpoints_every_interval(run):
    result, out = run
    assert [s for s, _ in result.checkpoints] == list(range(100, 1001, 100))
    assert sorted(p.name for p in out.iterdir()) == [f"step-{s:06d}.ckpt" for s in range(100, 1001, 100)]
    assert len(result.loss_curve) == 1000


def test_loss_decreases(run):
    curve = np.array(run[0].loss_curve)
    assert curve[-100:].mean() < 0.5 * curve[:100].mean()


def test_training_is_deterministic(ont, dataset, run):
    again = train(StructuredPolicy(ontology=ont, max_steps=1000, random_state=0), dataset, 100)
    assert again.loss_curve == run[0].loss_curve
    other = train(StructuredPolicy(ontology=ont, max_steps=50, random_state=1), dataset, 50)
    assert other.loss_curve != run[0].loss_curve[:50]


def test_checkpoint_resumes_model(ont, dataset, run):
    _, out = run
    pol = StructuredPolicy.load(out / "step-001000.ckpt", ont)
    assert pol.step_ == 1000 and pol.predict(dataset[:5]).shape == (5,)


def test_odd_step_count_still_snapshots_last(ont, dataset, small_db):
    pol = StructuredPolicy(ontology=ont, max_steps=25, random_state=0)
    res = train(pol, dataset, 10, on_checkpoint=evaluator(small_db, 3, 0))
    assert [s for s, _ in res.checkpoints] == [10, 20, 25]
    assert sorted(res.evaluations) == [10, 20, 25]


def test_config_validation_and_roundtrip(tmp_path):
    cfg = TrainConfig(kind="hgnn", source="noisy-expert", n_dialogues=100, seeds=(3, 4), restarts=2)
    assert cfg.expert.noise_rate == 0.3 and cfg.seed_list == (3, 4)
    save_run_config(cfg, tmp_path / "c.json")
    assert load_run_config(tmp_path / "c.json") == cfg
    assert cfg.digest() == load_run_config(tmp_path / "c.json").digest()
    assert cfg.digest() != replace(cfg, max_steps=7).digest()
    # explicit default seeds hash like implicit ones
    assert TrainConfig(restarts=2).digest() == TrainConfig(restarts=2, seeds=(0, 1)).digest()
    for bad in ({"kind": "rnn"}, {"source": "wizard"}, {"restarts": 0}, {"seeds": (1,), "restarts": 2}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"stepz": 3})


def canon(rows):
    return sorted(json.dumps(r, sort_keys=True) for r in rows)


TINY = TrainConfig(max_steps=20, eval_every=10, restarts=2, eval_dialogues=5, n_dialogues=2)


@pytest.fixture(scope="module")
def tiny_grid():
    return SweepGrid(TINY, ("uhgnn", "hfnn"), (2,), ("simulated-expert",))


def test_sweep_rows_and_resume(tmp_path, ont, tiny_grid):
    first = sweep(tiny_grid, tmp_path, ont)
    assert first.complete and first.trained == 4
    assert len(first.rows) == tiny_grid.n_rows() == 8
    table = first.results_path.read_text()
    assert table.splitlines()[0] == ",".join(RESULT_COLUMNS)
    assert len(read_results(first.results_path)) == 8

    again = sweep(tiny_grid, tmp_path, ont)
    assert again.trained == 0 and canon(again.rows) == canon(first.rows)
    assert first.results_path.read_text() == table

    # lose one restart marker: only that restart reruns, table untouched
    marker = next((tmp_path / "cells").glob("*/seed-1.json"))
    marker.unlink()
    resumed = sweep(tiny_grid, tmp_path, ont)
    assert resumed.trained == 1 and first.results_path.read_text() == table
    assert canon(resumed.rows) == canon(first.rows)

    # lose table rows: they are re-appended from the markers
    lines = table.splitlines()
    first.results_path.write_text("\n".join(lines[:3]) + "\n")
    sweep(tiny_grid, tmp_path, ont)
    assert sorted(first.results_path.read_text().splitlines()) == sorted(lines)


def test_sweep_deadline(tmp_path, ont, tiny_grid):
    res = sweep(tiny_grid, tmp_path, ont, deadline=time.monotonic() - 1)
    assert not res.complete and res.trained == 0 and res.rows == []


def test_cell_directory_holds_config(tmp_path, ont):
    grid = SweepGrid(replace(TINY, restarts=1), ("uhgnn",), (2,), ("simulated-expert",))
    sweep(grid, tmp_path, ont)
    cell = grid.cells()[0]
    d = tmp_path / "cells" / cell.digest(ont)
    assert load_run_config(d / "config.json") == cell
    record = json.loads((d / "seed-0.json").read_text())
    assert [r["step"] for r in record["rows"]] == [10, 20]
    assert load_grid(tmp_path / "grid.json") == grid


def test_full_grid_arithmetic():
    grid = get_experiment("fewshot-grid").grid
    assert len(grid.cells()) == 24
    assert grid.n_runs() == 240
    assert grid.n_rows() == 2400
    assert len({c.digest() for c in grid.cells()}) == 24
