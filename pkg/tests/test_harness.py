"""Tests for sweep handling, cell execution and the experiment runner."""

import json

import pytest

from massive_access.env import EVAL_SLOT_OFFSET
from massive_access.harness import (
    CellKey,
    ExperimentRunner,
    apply_sweep,
    build_envs,
    run_cell,
    run_experiment,
    seeded,
)
from massive_access.metrics import read_csv
from massive_access.models import (
    Approach,
    ExperimentSpec,
    ScenarioConfig,
    SimulationConfig,
    SweepVariable,
    TrainConfig,
    TransferConfig,
)


@pytest.fixture
def settings():
    return SimulationConfig(
        scenario=ScenarioConfig(
            num_cdevices=2, num_d2d_pairs=2, num_subchannels=2, rng_seed=1
        ),
        train=TrainConfig(
            episodes=2,
            steps_per_episode=5,
            batch_size=4,
            replay_capacity=32,
            hidden_layers=[8],
            target_sync_period=2,
        ),
        transfer=TransferConfig(group_size=2),
    )


@pytest.fixture
def spec():
    return ExperimentSpec(
        approaches=["proposed", "random"], seeds=[0, 1], slots=20, window=10
    )


def test_cell_key_stem():
    key = CellKey(approach="proposed", sweep="reliability", value=0.999, seed=2)
    assert key.stem == "proposed__reliability-0.999__seed2"
    assert CellKey(approach="random").stem == "random__none-na__seed0"


def test_apply_sweep(settings):
    assert apply_sweep(settings, SweepVariable.NONE, None) is settings

    reliable = apply_sweep(settings, SweepVariable.RELIABILITY, 0.999)
    assert reliable.scenario.qos.p_latency_max == pytest.approx(1e-3)
    assert reliable.scenario.qos.p_outage_max == pytest.approx(1e-3)

    latency = apply_sweep(settings, SweepVariable.LATENCY, 2.0)
    assert latency.scenario.qos.latency_max == pytest.approx(2e-3)

    busy = apply_sweep(settings, SweepVariable.ARRIVAL_RATE, 0.5)
    assert busy.scenario.arrival_rate == 0.5
    assert settings.scenario.arrival_rate != 0.5


def test_seeded_offsets_scenario_seed(settings):
    assert seeded(settings, 3).scenario.rng_seed == 4
    assert seeded(settings, 3).train == settings.train


def test_build_envs_share_topology(settings):
    env, eval_env, groups = build_envs(settings)
    assert eval_env.slot == EVAL_SLOT_OFFSET
    assert eval_env.topology is env.topology
    assert eval_env.profiles == env.profiles
    assert all(len(g) <= 2 for g in groups.groups)


@pytest.mark.parametrize(
    "approach,episodes,learns",
    [
        (Approach.PROPOSED, 2, True),
        (Approach.FULLY_DISTRIBUTED, 2, True),
        (Approach.RANDOM, 2, False),
        (Approach.CENTRALIZED_G_MA, 0, False),
    ],
)
def test_run_cell(settings, approach, episodes, learns):
    spec = ExperimentSpec(approaches=[approach], slots=20, window=10)
    outcome = run_cell(settings, CellKey(approach=approach), spec)
    assert len(outcome.train) == episodes
    assert [m.index for m in outcome.evaluation] == [0, 1]
    assert bool(outcome.models) == learns


def test_run_cell_is_deterministic(settings):
    spec = ExperimentSpec(approaches=["proposed"], slots=20, window=10)
    key = CellKey(approach="proposed", seed=1)
    first = run_cell(settings, key, spec)
    second = run_cell(settings, key, spec)
    assert [m.model_dump() for m in first.evaluation] == [
        m.model_dump() for m in second.evaluation
    ]
    assert [m.model_dump() for m in first.train] == [
        m.model_dump() for m in second.train
    ]


def test_spec_episodes_override(settings):
    spec = ExperimentSpec(approaches=["random"], episodes=1, slots=10, window=10)
    outcome = run_cell(settings, CellKey(approach="random"), spec)
    assert len(outcome.train) == 1


async def test_runner_writes_cells_and_aggregate(settings, spec, tmp_path):
    done = []
    runner = ExperimentRunner(spec, settings, tmp_path, save_models=True)
    aggregate = await runner.run(on_cell_done=done.append)

    assert aggregate == tmp_path / "aggregate.csv"
    assert len(done) == 4
    assert (tmp_path / "resolved_config.conf").exists()
    for key in runner.cells():
        assert runner.cell_path(key).exists()
        assert (tmp_path / "events" / f"{key.stem}.csv").exists()
    assert (tmp_path / "checkpoints" / "proposed__none-na__seed0.npz").exists()
    assert not (tmp_path / "checkpoints" / "random__none-na__seed0.npz").exists()

    state = json.loads((tmp_path / "runner_state.json").read_text())
    assert len(state["completed_cells"]) == 4

    rows = read_csv(aggregate)
    assert {r["approach"] for r in rows} == {"proposed", "random"}
    assert all(r["n_seeds"] == "2" for r in rows)
    phases = {(r["approach"], r["phase"]) for r in rows}
    assert ("proposed", "train") in phases
    assert ("random", "eval") in phases


async def test_runner_is_reproducible(settings, spec, tmp_path):
    outputs = []
    for name in ("a", "b"):
        runner = ExperimentRunner(spec, settings, tmp_path / name)
        outputs.append((await runner.run()).read_bytes())
    assert outputs[0] == outputs[1]


async def test_runner_resume_skips_finished_cells(settings, spec, tmp_path, mocker):
    await ExperimentRunner(spec, settings, tmp_path).run()

    cell = mocker.patch(
        "massive_access.harness.run_cell", side_effect=AssertionError("rerun")
    )
    resumed = ExperimentRunner(spec, settings, tmp_path, resume=True)
    assert len(resumed.completed) == 4
    await resumed.run()
    cell.assert_not_called()


def test_runner_without_resume_discards_state(settings, spec, tmp_path):
    (tmp_path / "runner_state.json").write_text('{"completed_cells": ["x"]}')
    runner = ExperimentRunner(spec, settings, tmp_path)
    assert runner.completed == set()
    assert not runner.state_file.exists()


def test_runner_ignores_corrupt_state(settings, spec, tmp_path):
    (tmp_path / "runner_state.json").write_text("{not json")
    runner = ExperimentRunner(spec, settings, tmp_path, resume=True)
    assert runner.completed == set()


async def test_runner_reports_failures(settings, spec, tmp_path, mocker):
    mocker.patch(
        "massive_access.harness.run_cell", side_effect=RuntimeError("boom")
    )
    runner = ExperimentRunner(spec, settings, tmp_path)
    with pytest.raises(RuntimeError, match="boom"):
        await runner.run()
    assert runner.state_file.exists()
    assert not (tmp_path / "aggregate.csv").exists()


def test_run_experiment_blocking_wrapper(settings, tmp_path):
    spec = ExperimentSpec(approaches=["random"], slots=10, window=10)
    aggregate = run_experiment(spec, settings, tmp_path)
    assert aggregate == tmp_path / "aggregate.csv"
    assert {r["approach"] for r in read_csv(aggregate)} == {"random"}
