"""Comparison schemes: random access, fully distributed DRL, centralized G-MA."""

import logging
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .coop import GroupAssignment
from .dqn import ActionSelector, IndependentPolicy, QNetwork
from .env import MassiveAccessEnv
from .metrics import EpisodeAccumulator
from .models import EpisodeMetrics, LinkKind, TrainConfig
from .phy import MW_TO_W, AssignmentMatrix, network_ee_batch

logger = logging.getLogger(__name__)

DEFAULT_MAX_SWEEPS = 10
_IMPROVEMENT_TOLERANCE = 1e-12


class BaselineKind(str, Enum):
    RANDOM_MA = "random_ma"
    FULLY_DISTRIBUTED_DRL = "fully_distributed_drl"
    CENTRALIZED_G_MA = "centralized_g_ma"


class BaselinePolicy(BaseModel):
    """Which baseline runs, with its per-kind settings."""

    model_config = ConfigDict(frozen=True)

    kind: BaselineKind
    parameters: Dict[str, float] = Field(default_factory=dict)

    def build(
        self,
        env: MassiveAccessEnv,
        models: Optional[Sequence[QNetwork]] = None,
        groups: Optional[GroupAssignment] = None,
        rng: Optional[np.random.Generator] = None,
    ) -> ActionSelector:
        if self.kind is BaselineKind.RANDOM_MA:
            if rng is None:
                raise ValueError("Random access needs a generator")
            return RandomPolicy(env, rng)
        if self.kind is BaselineKind.FULLY_DISTRIBUTED_DRL:
            if models is None:
                raise ValueError("Fully distributed DRL needs trained models")
            return IndependentPolicy(models, env.masks)
        sweeps = int(self.parameters.get("max_sweeps", DEFAULT_MAX_SWEEPS))
        return CentralizedPolicy(
            groups or GroupAssignment.singletons(env.num_links), sweeps
        )


def _random_actions(env: MassiveAccessEnv, rng: np.random.Generator) -> List[int]:
    return [int(rng.choice(np.flatnonzero(mask))) for mask in env.masks]


def random_ma_step(env: MassiveAccessEnv, rng: np.random.Generator) -> AssignmentMatrix:
    """Every link draws a uniform feasible action, idle included."""
    return env.assign(_random_actions(env, rng))


def fully_distributed_step(
    env: MassiveAccessEnv, models: Sequence[QNetwork]
) -> AssignmentMatrix:
    """Each agent takes the argmax of its own Q-values on its own observation."""
    return IndependentPolicy(models, env.masks).assignment(env, env.observe())


class CentralizedResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    assignment: AssignmentMatrix
    actions: List[int]
    ee_trace: List[float]
    sweeps: int


def centralized_search(
    env: MassiveAccessEnv,
    groups: GroupAssignment,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
) -> CentralizedResult:
    """Greedy coordinate ascent on network EE with full channel knowledge.

    Starting from all links idle, groups are visited round-robin and each link
    moves to the single action that raises EE the most while keeping every
    subchannel to at most one C-device. Stops when a sweep changes nothing or
    after ``max_sweeps`` sweeps.
    """
    channel = env.peek_channel()
    config = env.config
    space = env.space
    k = config.num_cdevices
    z, n, levels = env.num_links, config.num_subchannels, space.num_levels
    level_w = np.asarray(space.power_levels) * MW_TO_W

    actions = [space.idle_index] * z
    power = np.zeros((z, n))

    def evaluate(candidates: np.ndarray) -> np.ndarray:
        return network_ee_batch(candidates[:, :k], candidates[:, k:], channel, config)

    current = float(evaluate(power[None])[0])
    trace = [current]
    sweeps = 0
    for _ in range(max_sweeps):
        sweeps += 1
        changed = False
        for group in groups.groups:
            for i in group:
                cellular_taken = {
                    space.subchannel(actions[j])
                    for j in range(k)
                    if j != i and actions[j] != space.idle_index
                }
                options = [
                    a
                    for a in np.flatnonzero(env.masks[i]).tolist()
                    if a != actions[i]
                    and not (
                        env.kinds[i] is LinkKind.CELLULAR
                        and space.subchannel(a) in cellular_taken
                    )
                ]
                if not options:
                    continue
                candidates = np.repeat(power[None], len(options), axis=0)
                candidates[:, i, :] = 0.0
                for c, a in enumerate(options):
                    if a != space.idle_index:
                        candidates[c, i, a // levels] = level_w[a % levels]
                values = evaluate(candidates)
                best = int(np.argmax(values))
                if values[best] > current + _IMPROVEMENT_TOLERANCE:
                    actions[i] = options[best]
                    power = candidates[best]
                    current = float(values[best])
                    changed = True
        trace.append(current)
        if not changed:
            break

    logger.debug("Centralized search: EE %.4f after %d sweeps", current, sweeps)
    return CentralizedResult(
        assignment=env.assign(actions), actions=actions, ee_trace=trace, sweeps=sweeps
    )


def centralized_g_ma_step(
    env: MassiveAccessEnv,
    groups: GroupAssignment,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
) -> AssignmentMatrix:
    return centralized_search(env, groups, max_sweeps).assignment


class RandomPolicy(ActionSelector):
    def __init__(self, env: MassiveAccessEnv, rng: np.random.Generator):
        super().__init__()
        self.env = env
        self.rng = rng

    def select(self, states: np.ndarray, epsilon: float) -> List[int]:
        return _random_actions(self.env, self.rng)


class CentralizedPolicy(ActionSelector):
    """Ignores observations; re-runs the central search every slot."""

    def __init__(self, groups: GroupAssignment, max_sweeps: int = DEFAULT_MAX_SWEEPS):
        super().__init__()
        self.groups = groups
        self.max_sweeps = max_sweeps

    def select(self, states: np.ndarray, epsilon: float) -> List[int]:
        raise NotImplementedError("Centralized G-MA assigns from the channel")

    def assignment(
        self, env: MassiveAccessEnv, states: np.ndarray, epsilon: float = 0.0
    ) -> AssignmentMatrix:
        result = centralized_search(env, self.groups, self.max_sweeps)
        self.last_actions = result.actions
        return result.assignment


def random_episodes(
    env: MassiveAccessEnv, config: TrainConfig, rng: np.random.Generator
) -> List[EpisodeMetrics]:
    """Random access over the training schedule, for convergence plots."""
    policy = RandomPolicy(env, rng)
    rows = []
    for episode in range(config.episodes):
        states = env.reset(slot_offset=episode * config.steps_per_episode)
        accumulator = EpisodeAccumulator.for_links(env.profiles)
        for _ in range(config.steps_per_episode):
            result = env.step(policy.assignment(env, states))
            accumulator.add(result)
            states = result.states
        rows.append(accumulator.finish(episode, epsilon=1.0))
    return rows
