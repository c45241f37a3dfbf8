"""Experiment orchestration over (approach, sweep value, seed) cells."""

import asyncio
import json
import logging
from pathlib import Path
from typing import Any, Callable, List, Optional, Set, Tuple

from pydantic import BaseModel, ConfigDict, Field

from .baselines import CentralizedPolicy, RandomPolicy, random_episodes
from .config import dump_settings
from .coop import (
    CooperativePolicy,
    GroupAssignment,
    TransferEvent,
    partition_groups,
    run_implementation,
)
from .dqn import (
    IndependentPolicy,
    QNetwork,
    make_agents,
    run_windows,
    save_checkpoint,
    train,
)
from .env import EVAL_SLOT_OFFSET, MassiveAccessEnv
from .metrics import (
    AGGREGATE_COLUMNS,
    CELL_COLUMNS,
    EVENT_COLUMNS,
    MetricsWriter,
    aggregate_rows,
    cell_rows,
)
from .models import (
    Approach,
    EpisodeMetrics,
    ExperimentSpec,
    SimulationConfig,
    SweepVariable,
)
from .scenario import POLICY_STREAM, stream_rng

logger = logging.getLogger(__name__)

LEARNING_APPROACHES = (Approach.PROPOSED, Approach.FULLY_DISTRIBUTED)


class CellKey(BaseModel):
    """One (approach, sweep value, seed) combination."""

    model_config = ConfigDict(frozen=True)

    approach: Approach
    sweep: SweepVariable = SweepVariable.NONE
    value: Optional[float] = None
    seed: int = 0

    @property
    def stem(self) -> str:
        point = "na" if self.value is None else repr(float(self.value))
        return f"{self.approach.value}__{self.sweep.value}-{point}__seed{self.seed}"


class CellOutcome(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    key: CellKey
    train: List[EpisodeMetrics] = Field(default_factory=list)
    evaluation: List[EpisodeMetrics] = Field(default_factory=list)
    events: List[TransferEvent] = Field(default_factory=list)
    models: List[QNetwork] = Field(default_factory=list)


def _override(
    settings: SimulationConfig, section: str, **values: Any
) -> SimulationConfig:
    data = settings.model_dump()
    data[section].update(values)
    return SimulationConfig.model_validate(data)


def apply_sweep(
    settings: SimulationConfig, sweep: SweepVariable, value: Optional[float]
) -> SimulationConfig:
    """Settings for one sweep point.

    Reliability ``r`` sets both outage targets to ``1 - r``; latency is given in
    milliseconds; arrival rate in packets per slot.
    """
    if sweep is SweepVariable.NONE or value is None:
        return settings
    data = settings.model_dump()
    if sweep is SweepVariable.RELIABILITY:
        data["scenario"]["qos"]["p_latency_max"] = 1.0 - value
        data["scenario"]["qos"]["p_outage_max"] = 1.0 - value
    elif sweep is SweepVariable.LATENCY:
        data["scenario"]["qos"]["latency_max"] = value / 1000.0
    elif sweep is SweepVariable.ARRIVAL_RATE:
        data["scenario"]["arrival_rate"] = value
    return SimulationConfig.model_validate(data)


def seeded(settings: SimulationConfig, seed: int) -> SimulationConfig:
    """Offset the scenario seed by the run seed."""
    return _override(settings, "scenario", rng_seed=settings.scenario.rng_seed + seed)


def build_envs(
    settings: SimulationConfig,
) -> Tuple[MassiveAccessEnv, MassiveAccessEnv, GroupAssignment]:
    """Training env, evaluation env on the same topology, and the groups."""
    env = MassiveAccessEnv(settings.scenario, settings.reward)
    eval_env = MassiveAccessEnv(
        settings.scenario,
        settings.reward,
        topology=env.topology,
        profiles=env.profiles,
        slot_offset=EVAL_SLOT_OFFSET,
    )
    groups = partition_groups(env.topology, settings.transfer.group_size)
    return env, eval_env, groups


def train_approach(
    settings: SimulationConfig,
    approach: Approach,
    env: MassiveAccessEnv,
    groups: GroupAssignment,
) -> Tuple[List[QNetwork], List[EpisodeMetrics]]:
    """Training stage; non-learning approaches yield no models."""
    seed = settings.scenario.rng_seed
    if approach is Approach.CENTRALIZED_G_MA:
        return [], []
    if approach is Approach.RANDOM:
        rng = stream_rng(seed, POLICY_STREAM)
        return [], random_episodes(env, settings.train, rng)

    agents = make_agents(env, settings.train, seed)
    selector = None
    if approach is Approach.PROPOSED:
        selector = CooperativePolicy(
            env,
            [a.net for a in agents],
            groups,
            settings.transfer,
            rngs=[a.rng for a in agents],
        )
    result = train(agents, env, settings.train, selector)
    return result.models, result.metrics


def evaluate_approach(
    settings: SimulationConfig,
    approach: Approach,
    models: List[QNetwork],
    eval_env: MassiveAccessEnv,
    groups: GroupAssignment,
    num_slots: int,
    window: int,
) -> Tuple[List[EpisodeMetrics], List[TransferEvent]]:
    """Implementation stage on unseen channel slots."""
    seed = settings.scenario.rng_seed
    if approach is Approach.PROPOSED:
        result = run_implementation(
            models, eval_env, settings, num_slots, groups, window, seed=seed
        )
        return result.metrics, result.events
    if approach is Approach.FULLY_DISTRIBUTED:
        policy = IndependentPolicy(models, eval_env.masks)
    elif approach is Approach.RANDOM:
        policy = RandomPolicy(eval_env, stream_rng(seed, POLICY_STREAM, 1))
    else:
        policy = CentralizedPolicy(groups)
    return run_windows(eval_env, policy, num_slots, window), []


def run_cell(
    settings: SimulationConfig, key: CellKey, spec: ExperimentSpec
) -> CellOutcome:
    """Train (if the approach learns) then evaluate one cell."""
    cell_settings = seeded(apply_sweep(settings, key.sweep, key.value), key.seed)
    if spec.episodes is not None:
        cell_settings = _override(cell_settings, "train", episodes=spec.episodes)

    env, eval_env, groups = build_envs(cell_settings)
    models, train_rows = train_approach(cell_settings, key.approach, env, groups)
    evaluation, events = evaluate_approach(
        cell_settings, key.approach, models, eval_env, groups, spec.slots, spec.window
    )
    return CellOutcome(
        key=key, train=train_rows, evaluation=evaluation, events=events, models=models
    )


class ExperimentRunner:
    """Runs every cell of an experiment, writing metrics as cells finish."""

    def __init__(
        self,
        spec: ExperimentSpec,
        settings: SimulationConfig,
        output_dir: Path,
        max_concurrent: int = 2,
        resume: bool = False,
        save_models: bool = False,
    ):
        self.spec = spec
        self.settings = settings
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.max_concurrent = max_concurrent
        self.save_models = save_models
        self.writer = MetricsWriter(self.output_dir)

        # State management
        self.state_file = self.output_dir / "runner_state.json"
        self.completed: Set[str] = set()
        if resume:
            self.load_state()
        elif self.state_file.exists():
            self.state_file.unlink()

    def load_state(self) -> None:
        """Load completed cells from disk."""
        if self.state_file.exists():
            try:
                with open(self.state_file) as f:
                    state = json.load(f)
                    self.completed = set(state.get("completed_cells", []))
            except (OSError, ValueError) as e:
                logger.warning("Ignoring unreadable %s: %s", self.state_file, e)

    def save_state(self) -> None:
        """Save completed cells to disk."""
        state = {"completed_cells": sorted(self.completed)}
        with open(self.state_file, "w") as f:
            json.dump(state, f)

    def cells(self) -> List[CellKey]:
        return [
            CellKey(approach=approach, sweep=self.spec.sweep, value=value, seed=seed)
            for approach in self.spec.approaches
            for value in self.spec.points()
            for seed in self.spec.seeds
        ]

    def cell_path(self, key: CellKey) -> Path:
        return self.output_dir / "cells" / f"{key.stem}.csv"

    async def run_one(self, key: CellKey) -> Optional[CellOutcome]:
        if key.stem in self.completed and self.cell_path(key).exists():
            logger.info("Skipping finished cell %s", key.stem)
            return None

        outcome = await asyncio.to_thread(run_cell, self.settings, key, self.spec)
        rows = cell_rows("train", outcome.train) + cell_rows("eval", outcome.evaluation)
        await self.writer.write_rows(f"cells/{key.stem}.csv", CELL_COLUMNS, rows)
        await self.writer.write_rows(
            f"events/{key.stem}.csv",
            EVENT_COLUMNS,
            [event.model_dump() for event in outcome.events],
        )
        if self.save_models and outcome.models:
            path = self.output_dir / "checkpoints" / f"{key.stem}.npz"
            path.parent.mkdir(parents=True, exist_ok=True)
            await asyncio.to_thread(save_checkpoint, path, outcome.models)

        self.completed.add(key.stem)
        self.save_state()
        logger.info("Finished cell %s", key.stem)
        return outcome

    async def run(
        self, on_cell_done: Optional[Callable[[CellKey], None]] = None
    ) -> Path:
        """Run all cells, then write ``aggregate.csv``; returns its path."""
        await self.writer.write_text(
            "resolved_config.conf", dump_settings(self.settings)
        )
        semaphore = asyncio.Semaphore(self.max_concurrent)

        async def guarded(key: CellKey) -> Optional[CellOutcome]:
            async with semaphore:
                outcome = await self.run_one(key)
            if on_cell_done is not None:
                on_cell_done(key)
            return outcome

        keys = self.cells()
        results = await asyncio.gather(
            *(guarded(k) for k in keys), return_exceptions=True
        )
        failures = [r for r in results if isinstance(r, BaseException)]
        for failure in failures:
            logger.error("Cell failed: %s", failure)
        self.save_state()
        if failures:
            raise failures[0]

        rows = aggregate_rows(
            [(k.approach, k.sweep, k.value, self.cell_path(k)) for k in keys]
        )
        return await self.writer.write_rows("aggregate.csv", AGGREGATE_COLUMNS, rows)


def run_experiment(
    spec: ExperimentSpec,
    settings: SimulationConfig,
    output_dir: Path,
    max_concurrent: int = 2,
    resume: bool = False,
) -> Path:
    """Blocking wrapper around ``ExperimentRunner.run``."""
    runner = ExperimentRunner(spec, settings, output_dir, max_concurrent, resume)
    return asyncio.run(runner.run())
