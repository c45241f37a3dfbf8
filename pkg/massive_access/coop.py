"""Transfer and cooperative learning for the implementation stage."""

import itertools
import logging
import math
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .dqn import (
    ActionSelector,
    QEvaluator,
    QNetwork,
    distill_loss,
    greedy_action,
    make_agents,
    run_windows,
    sgd_step,
)
from .env import MassiveAccessEnv, StepResult
from .errors import CombinatorialError, DimensionError
from .mdp import ActionSpace, mark_busy
from .models import (
    EpisodeMetrics,
    JointMode,
    LinkKind,
    LinkProfile,
    Service,
    SimulationConfig,
    TransferConfig,
)
from .scenario import POLICY_STREAM, Topology, stream_rng

logger = logging.getLogger(__name__)

PROFILE_LENGTH = 9
MAX_EXHAUSTIVE_MEMBERS = 3


def _unit(value: float) -> float:
    return float(min(max(value, 0.0), 1.0))


class AgentProfile(BaseModel):
    """Similarity features of one agent.

    Layout: kind one-hot (2), service one-hot (2), SINR threshold, deadline,
    latency outage target (0 for normal links), minimum rate (0 for URLLC
    links), arrival rate.
    """

    model_config = ConfigDict(frozen=True)

    link_id: int
    features: List[float]

    @field_validator("features")
    @classmethod
    def validate_features(cls, v: List[float]) -> List[float]:
        if len(v) != PROFILE_LENGTH:
            raise ValueError(f"Profile needs {PROFILE_LENGTH} features, got {len(v)}")
        if any(not 0.0 <= f <= 1.0 for f in v):
            raise ValueError("Profile features must lie in [0, 1]")
        return v

    @classmethod
    def from_link(cls, link: LinkProfile) -> "AgentProfile":
        qos = link.qos
        urllc = link.service is Service.URLLC
        return cls(
            link_id=link.link_id,
            features=[
                float(link.kind is LinkKind.CELLULAR),
                float(link.kind is LinkKind.D2D),
                float(urllc),
                float(not urllc),
                _unit(qos.sinr_min_db / 30.0),
                _unit(qos.latency_max / 0.01),
                _unit(-math.log10(qos.p_latency_max) / 10.0) if urllc else 0.0,
                0.0 if urllc else _unit(qos.rate_min_normal / 10.0),
                _unit(link.arrival_rate),
            ],
        )

    def vector(self) -> np.ndarray:
        return np.asarray(self.features, dtype=float)


ProfileLike = Union[AgentProfile, Sequence[float], np.ndarray]


def _features(profile: ProfileLike) -> np.ndarray:
    if isinstance(profile, AgentProfile):
        return profile.vector()
    return np.asarray(profile, dtype=float)


def bregman_distance(a: ProfileLike, b: ProfileLike) -> float:
    """Bregman divergence of the squared norm, i.e. squared Euclidean distance."""
    x, y = _features(a), _features(b)
    if x.shape != y.shape:
        raise DimensionError(f"Profiles of length {x.size} and {y.size}")
    return float(np.sum((x - y) ** 2))


Neighbor = Tuple[AgentProfile, QNetwork]


def select_expert(
    learner: AgentProfile, neighbors: Sequence[Neighbor], radius: float
) -> Optional[Neighbor]:
    """Closest neighbour inside the ball; ties go to the lowest link id."""
    best: Optional[Neighbor] = None
    best_key: Optional[Tuple[float, int]] = None
    for profile, model in neighbors:
        if profile.link_id == learner.link_id:
            continue
        distance = bregman_distance(learner, profile)
        if distance > radius:
            continue
        key = (distance, profile.link_id)
        if best_key is None or key < best_key:
            best, best_key = (profile, model), key
    return best


class BlendedQ:
    """``mu * Q_transfer + (1 - mu) * Q_current`` evaluated on outputs."""

    def __init__(self, transfer: QNetwork, current: QNetwork, mu: float):
        self.transfer = transfer
        self.current = current
        self.mu = mu

    @property
    def input_size(self) -> int:
        return self.current.input_size

    @property
    def output_size(self) -> int:
        return self.current.output_size

    def forward(self, states: np.ndarray) -> np.ndarray:
        return self.mu * self.transfer.forward(states) + (1.0 - self.mu) * (
            self.current.forward(states)
        )


def blend_models(transfer: QNetwork, current: QNetwork, mu: float) -> BlendedQ:
    if transfer.layer_sizes != current.layer_sizes:
        raise DimensionError(
            f"Cannot blend {transfer.layer_sizes} with {current.layer_sizes}"
        )
    if not 0.0 <= mu <= 1.0:
        raise ValueError("Transfer rate must lie in [0, 1]")
    return BlendedQ(transfer, current, mu)


def decay_transfer_rate(mu: float, kappa: float) -> float:
    return kappa * mu


class GroupAssignment(BaseModel):
    """Partition of the links into cooperating groups."""

    num_links: int
    groups: List[List[int]]

    @model_validator(mode="after")
    def validate_partition(self) -> "GroupAssignment":
        members = sorted(i for group in self.groups for i in group)
        if members != list(range(self.num_links)):
            raise ValueError("Groups must partition the links exactly")
        if any(not group for group in self.groups):
            raise ValueError("Groups cannot be empty")
        return self

    @classmethod
    def singletons(cls, num_links: int) -> "GroupAssignment":
        return cls(num_links=num_links, groups=[[i] for i in range(num_links)])

    @property
    def membership(self) -> List[int]:
        index = [0] * self.num_links
        for g, group in enumerate(self.groups):
            for i in group:
                index[i] = g
        return index

    def group_of(self, link_id: int) -> List[int]:
        return self.groups[self.membership[link_id]]


def partition_groups(topology: Topology, group_size: int) -> GroupAssignment:
    """Greedy geographic clustering.

    Each group is seeded by the unassigned link nearest the base station and
    filled with the seed's ``group_size - 1`` nearest unassigned links.
    """
    if group_size < 1:
        raise ValueError("Group size must be at least 1")
    positions = topology.link_positions()
    to_bs = np.linalg.norm(positions - topology.base_station, axis=1)
    unassigned = list(range(len(positions)))
    groups: List[List[int]] = []
    while unassigned:
        seed = min(unassigned, key=lambda i: (to_bs[i], i))
        others = [i for i in unassigned if i != seed]
        others.sort(key=lambda i: (np.linalg.norm(positions[i] - positions[seed]), i))
        group = sorted([seed, *others[: group_size - 1]])
        groups.append(group)
        unassigned = [i for i in unassigned if i not in group]
    return GroupAssignment(num_links=len(positions), groups=groups)


def group_q(values: Sequence[float]) -> float:
    return float(sum(values))


def _mask_subchannels(
    mask: np.ndarray, space: ActionSpace, subchannels: Set[int]
) -> np.ndarray:
    out = mask.copy()
    for sub in subchannels:
        start = sub * space.num_levels
        out[start : start + space.num_levels] = False
    return out


def joint_q(
    members: Sequence[int],
    states: np.ndarray,
    evaluators: Mapping[int, QEvaluator],
    actions: Mapping[int, int],
    space: ActionSpace,
    kinds: Sequence[LinkKind],
) -> float:
    """Group utility of a joint action.

    Members are visited in link-id order; each sees the subchannels announced
    by earlier members as busy. Two C-devices on one subchannel give -inf.
    """
    announced: List[int] = []
    cellular: Set[int] = set()
    values = []
    for i in sorted(members):
        sub = space.subchannel(actions[i])
        if kinds[i] is LinkKind.CELLULAR and sub >= 0:
            if sub in cellular:
                return -math.inf
            cellular.add(sub)
        q = evaluators[i].forward(mark_busy(states[i], announced))
        values.append(float(q[actions[i]]))
        if sub >= 0:
            announced.append(sub)
    return group_q(values)


def joint_action(
    members: Sequence[int],
    states: np.ndarray,
    evaluators: Mapping[int, QEvaluator],
    space: ActionSpace,
    kinds: Sequence[LinkKind],
    masks: np.ndarray,
    mode: JointMode = JointMode.SEQUENTIAL_GREEDY,
) -> Dict[int, int]:
    """Cooperative action choice for one group.

    Sequential greedy lets members move in link-id order. Each one sees the
    subchannels announced so far as busy, cannot take a subchannel held by an
    earlier C-device and keeps its own argmax.
    """
    order = sorted(members)
    if mode is JointMode.EXHAUSTIVE:
        return _exhaustive(order, states, evaluators, space, kinds, masks)

    announced: List[int] = []
    taken: Set[int] = set()
    chosen: Dict[int, int] = {}
    for i in order:
        q = evaluators[i].forward(mark_busy(states[i], announced))
        action = greedy_action(q, _mask_subchannels(masks[i], space, taken))
        chosen[i] = action
        sub = space.subchannel(action)
        if sub >= 0:
            announced.append(sub)
            if kinds[i] is LinkKind.CELLULAR:
                taken.add(sub)
    return chosen


def _exhaustive(
    order: List[int],
    states: np.ndarray,
    evaluators: Mapping[int, QEvaluator],
    space: ActionSpace,
    kinds: Sequence[LinkKind],
    masks: np.ndarray,
) -> Dict[int, int]:
    if len(order) > MAX_EXHAUSTIVE_MEMBERS:
        raise CombinatorialError(
            f"Exhaustive joint action limited to {MAX_EXHAUSTIVE_MEMBERS} members, "
            f"group has {len(order)}"
        )
    cache: Dict[Tuple[int, Tuple[int, ...]], np.ndarray] = {}

    def q_values(i: int, marks: Tuple[int, ...]) -> np.ndarray:
        key = (i, tuple(sorted(set(marks))))
        if key not in cache:
            cache[key] = evaluators[i].forward(mark_busy(states[i], key[1]))
        return cache[key]

    best: Optional[Dict[int, int]] = None
    best_value = -math.inf
    options = [np.flatnonzero(masks[i]).tolist() for i in order]
    for combo in itertools.product(*options):
        announced: List[int] = []
        cellular: Set[int] = set()
        total = 0.0
        for i, action in zip(order, combo):
            sub = space.subchannel(action)
            if kinds[i] is LinkKind.CELLULAR and sub >= 0:
                if sub in cellular:
                    total = -math.inf
                    break
                cellular.add(sub)
            total += float(q_values(i, tuple(announced))[action])
            if sub >= 0:
                announced.append(sub)
        if best is None or total > best_value:
            best, best_value = dict(zip(order, combo)), total
    assert best is not None
    return best


class TransferEvent(BaseModel):
    slot: int
    agent: int
    event_type: str
    expert_id: Optional[int] = None
    mu: Optional[float] = None


class _Transfer(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    expert_id: int
    expert: QNetwork
    mu: float


class CooperativePolicy(ActionSelector):
    """Group-coordinated action selection with a transfer branch.

    Agents being helped by an expert act alone on the blended Q-values; the
    others coordinate inside their group.
    """

    def __init__(
        self,
        env: MassiveAccessEnv,
        models: Sequence[QNetwork],
        groups: GroupAssignment,
        config: TransferConfig,
        rngs: Optional[Sequence[np.random.Generator]] = None,
        new_agents: Sequence[int] = (),
    ):
        super().__init__()
        self.env = env
        self.models = list(models)
        self.groups = groups
        self.config = config
        self.rngs = list(rngs) if rngs is not None else None
        self.profiles = [AgentProfile.from_link(p) for p in env.profiles]
        self.transfers: Dict[int, _Transfer] = {}
        self.pending: Set[int] = set(new_agents) if config.transfer_enabled else set()
        self.novices: Set[int] = set(new_agents)
        self.poor_streak = np.zeros(env.num_links, dtype=int)
        self.events: List[TransferEvent] = []
        self._transfer_count = 0
        self._coop_count = 0
        self._observed: Optional[np.ndarray] = None
        for group in groups.groups:
            if len(group) > 1:
                for i in group:
                    self._record(i, "group", expert_id=None, mu=None)
        logger.debug(
            "Formed %d groups over %d links", len(groups.groups), env.num_links
        )

    def _record(
        self, agent: int, event_type: str, expert_id: Optional[int], mu: Optional[float]
    ) -> None:
        self.events.append(
            TransferEvent(
                slot=self.env.slot,
                agent=agent,
                event_type=event_type,
                expert_id=expert_id,
                mu=mu,
            )
        )

    def evaluator(self, link_id: int) -> QEvaluator:
        state = self.transfers.get(link_id)
        if state is None:
            return self.models[link_id]
        return blend_models(state.expert, self.models[link_id], state.mu)

    def _distill(self, link_id: int, transfer: _Transfer) -> float:
        """Pull the learner's own network toward its blended Q-values.

        Runs on the state the link acted on, in place, so the expert's
        knowledge stays once the transfer ends.
        """
        assert self._observed is not None
        own = self.models[link_id]
        state = self._observed[link_id]
        target = blend_models(transfer.expert, own, transfer.mu).forward(state)
        loss, grads = distill_loss(own, state, target)
        sgd_step(own, grads, self.config.distill_step)
        return loss

    def change_service(self, link_id: int, service: Service) -> None:
        """Switch a link's service; it then looks for an expert."""
        self.env.change_service(link_id, service)
        self.profiles[link_id] = AgentProfile.from_link(self.env.profiles[link_id])
        if self.config.transfer_enabled:
            self.pending.add(link_id)

    def _start_transfers(self) -> None:
        for i in sorted(self.pending):
            if i in self.transfers:
                continue
            neighbors = [
                (self.profiles[j], self.models[j])
                for j in self.groups.group_of(i)
                if j != i and j not in self.transfers and j not in self.novices
            ]
            found = select_expert(self.profiles[i], neighbors, self.config.radius)
            if found is None:
                self._record(i, "no_expert", expert_id=None, mu=None)
                logger.debug("Link %d found no expert", i)
                continue
            profile, model = found
            self.transfers[i] = _Transfer(
                expert_id=profile.link_id,
                expert=model.copy(),
                mu=self.config.initial_rate,
            )
            self._transfer_count += 1
            self._record(i, "transfer", profile.link_id, self.config.initial_rate)
            logger.debug("Link %d learns from link %d", i, profile.link_id)
        self.pending.clear()

    def select(self, states: np.ndarray, epsilon: float) -> List[int]:
        self._observed = np.array(states, dtype=float)
        if self.pending:
            self._start_transfers()
        space = self.env.space
        kinds = self.env.kinds
        masks = self.env.masks
        actions = [space.idle_index] * self.env.num_links

        for group in self.groups.groups:
            members = [i for i in group if i not in self.transfers]
            for i in group:
                if i in self.transfers:
                    actions[i] = greedy_action(
                        self.evaluator(i).forward(states[i]), masks[i]
                    )
            if self.config.cooperative and len(members) > 1:
                evaluators = {i: self.models[i] for i in members}
                chosen = joint_action(
                    members,
                    states,
                    evaluators,
                    space,
                    kinds,
                    masks,
                    self.config.joint_mode,
                )
                for i, action in chosen.items():
                    actions[i] = action
                self._coop_count += 1
            else:
                for i in members:
                    q = self.models[i].forward(states[i])
                    actions[i] = greedy_action(q, masks[i])

        if epsilon > 0 and self.rngs is not None:
            for i in range(self.env.num_links):
                rng = self.rngs[i]
                if rng.random() < epsilon:
                    actions[i] = int(rng.choice(np.flatnonzero(masks[i])))
        return actions

    def after_step(self, result: StepResult) -> None:
        for i in sorted(self.transfers):
            state = self.transfers[i]
            if self.config.distill_step > 0 and self._observed is not None:
                self._distill(i, state)
            state.mu = decay_transfer_rate(state.mu, self.config.decay)
            if state.mu < self.config.min_transfer_rate:
                del self.transfers[i]
                self.novices.discard(i)
                self._record(i, "transfer_end", state.expert_id, state.mu)

        if not self.config.transfer_enabled:
            return
        satisfaction = result.states[:, -1]
        poor = satisfaction < self.config.poor_threshold
        self.poor_streak = np.where(poor, self.poor_streak + 1, 0)
        for i in np.flatnonzero(self.poor_streak >= self.config.poor_patience):
            self.poor_streak[i] = 0
            if int(i) not in self.transfers:
                self.pending.add(int(i))

    def event_counts(self) -> Tuple[int, int]:
        counts = (self._transfer_count, self._coop_count)
        self._transfer_count = 0
        self._coop_count = 0
        return counts


class ImplementationResult(BaseModel):
    metrics: List[EpisodeMetrics]
    events: List[TransferEvent]
    ee_trace: List[float] = Field(default_factory=list)
    reward_trace: List[float] = Field(default_factory=list)


def run_implementation(
    models: Sequence[QNetwork],
    env: MassiveAccessEnv,
    settings: SimulationConfig,
    num_slots: int,
    groups: Optional[GroupAssignment] = None,
    window: int = 100,
    new_agents: Sequence[int] = (),
    seed: int = 0,
) -> ImplementationResult:
    """Execute trained agents with transfer and group cooperation.

    Agents listed in ``new_agents`` start from fresh networks and look for an
    expert straight away.
    """
    if groups is None:
        groups = partition_groups(env.topology, settings.transfer.group_size)
    sizes = [env.state_size, *settings.train.hidden_layers, env.space.size]
    current = [m.copy() for m in models]
    for i in new_agents:
        current[i] = QNetwork.initialize(sizes, stream_rng(seed, POLICY_STREAM, i))

    policy = CooperativePolicy(
        env, current, groups, settings.transfer, new_agents=new_agents
    )
    ee_trace: List[float] = []
    reward_trace: List[float] = []

    agents = None
    if settings.transfer.online_learning:
        agents = make_agents(env, settings.train, seed, models=current)

    def on_step(states: np.ndarray, result: StepResult) -> None:
        ee_trace.append(result.network_ee)
        reward_trace.append(float(result.rewards.mean()))
        if agents is None:
            return
        for agent in agents:
            i = agent.link_id
            agent.buffer.add(
                states[i], policy.last_actions[i], result.rewards[i], result.states[i]
            )
        if len(ee_trace) % settings.transfer.online_update_period == 0:
            for agent in agents:
                agent.learn(settings.train)

    metrics = run_windows(env, policy, num_slots, window, on_step)
    return ImplementationResult(
        metrics=metrics,
        events=policy.events,
        ee_trace=ee_trace,
        reward_trace=reward_trace,
    )
