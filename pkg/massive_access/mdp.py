"""Observation encoding, discrete action space and the QoS-aware reward."""

from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .models import EEMode, LinkKind, LinkProfile, RewardConfig, ScenarioConfig, Service
from .phy import MW_TO_W, AssignmentMatrix, Choice, LinkRates, network_ee
from .urllc import UrllcBound

SINR_FLOOR_DB = -20.0
SINR_CEIL_DB = 40.0
TRAFFIC_SCALE_PACKETS = 10.0


class AgentAction(BaseModel):
    """Decoded action; ``subchannel`` and ``power_level`` are None when idle."""

    model_config = ConfigDict(frozen=True)

    index: int
    subchannel: Optional[int] = None
    power_level: Optional[int] = None

    @property
    def is_idle(self) -> bool:
        return self.subchannel is None


class ActionSpace(BaseModel):
    """``N * L`` (subchannel, power level) actions followed by one idle action.

    Index ``a < N * L`` means subchannel ``a // L`` at level ``a % L``.
    """

    model_config = ConfigDict(frozen=True)

    num_subchannels: int
    power_levels: List[float]
    max_power_c: float
    max_power_d: float

    @classmethod
    def from_config(cls, config: ScenarioConfig) -> "ActionSpace":
        return cls(
            num_subchannels=config.num_subchannels,
            power_levels=list(config.power_levels),
            max_power_c=config.max_power_c,
            max_power_d=config.max_power_d,
        )

    @property
    def num_levels(self) -> int:
        return len(self.power_levels)

    @property
    def size(self) -> int:
        return self.num_subchannels * self.num_levels + 1

    @property
    def idle_index(self) -> int:
        return self.size - 1

    def _check(self, index: int) -> None:
        if not 0 <= index < self.size:
            raise IndexError(f"Action {index} out of range [0, {self.size})")

    def encode(self, subchannel: int, power_level: int) -> int:
        if not 0 <= subchannel < self.num_subchannels:
            raise IndexError(f"Subchannel {subchannel} out of range")
        if not 0 <= power_level < self.num_levels:
            raise IndexError(f"Power level {power_level} out of range")
        return subchannel * self.num_levels + power_level

    def action(self, index: int) -> AgentAction:
        self._check(index)
        if index == self.idle_index:
            return AgentAction(index=index)
        return AgentAction(
            index=index,
            subchannel=index // self.num_levels,
            power_level=index % self.num_levels,
        )

    def subchannel(self, index: int) -> int:
        """Requested subchannel, or -1 for the idle action."""
        self._check(index)
        return -1 if index == self.idle_index else index // self.num_levels

    def decode(self, index: int) -> Choice:
        action = self.action(index)
        if action.is_idle:
            return None
        return action.subchannel, self.power_levels[action.power_level]

    def feasible_mask(self, kind: LinkKind) -> np.ndarray:
        """Actions whose power respects the device class maximum."""
        limit = self.max_power_c if kind is LinkKind.CELLULAR else self.max_power_d
        level_ok = np.asarray(self.power_levels) <= limit
        mask = np.ones(self.size, dtype=bool)
        mask[: self.idle_index] = np.tile(level_ok, self.num_subchannels)
        return mask


class AgentState(BaseModel):
    """Observation of one link, every component in [0, 1]."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    channel_busy: np.ndarray
    channel_quality: np.ndarray
    traffic_load: float
    qos_satisfaction: float

    @model_validator(mode="after")
    def validate_ranges(self) -> "AgentState":
        if self.channel_busy.shape != self.channel_quality.shape:
            raise ValueError("Busy flags and quality must cover the same subchannels")
        parts = np.concatenate(
            [
                self.channel_busy,
                self.channel_quality,
                [self.traffic_load, self.qos_satisfaction],
            ]
        )
        if np.any(parts < 0) or np.any(parts > 1):
            raise ValueError("State components must lie in [0, 1]")
        return self

    def vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.channel_busy,
                self.channel_quality,
                [self.traffic_load, self.qos_satisfaction],
            ]
        )


class EnvSnapshot(BaseModel):
    """What every link could observe at the end of the previous slot."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    requested: np.ndarray
    sensed_sinr_db: np.ndarray
    queue_bits: np.ndarray
    qos_satisfaction: np.ndarray
    mean_packet_bits: np.ndarray

    @classmethod
    def initial(
        cls, config: ScenarioConfig, profiles: Sequence[LinkProfile]
    ) -> "EnvSnapshot":
        z, n = len(profiles), config.num_subchannels
        return cls(
            requested=np.full(z, -1, dtype=int),
            sensed_sinr_db=np.full((z, n), -np.inf),
            queue_bits=np.zeros(z),
            qos_satisfaction=np.ones(z),
            mean_packet_bits=np.array([p.mean_packet_bits for p in profiles]),
        )

    @property
    def num_subchannels(self) -> int:
        return int(self.sensed_sinr_db.shape[1])

    def busy_counts(self) -> np.ndarray:
        active = self.requested[self.requested >= 0]
        return np.bincount(active, minlength=self.num_subchannels)


def quality_from_db(sinr_db: np.ndarray) -> np.ndarray:
    span = SINR_CEIL_DB - SINR_FLOOR_DB
    return np.clip((np.asarray(sinr_db) - SINR_FLOOR_DB) / span, 0.0, 1.0)


def encode_states(snapshot: EnvSnapshot) -> np.ndarray:
    """State vectors of all links, shape ``(Z, 2N + 2)``."""
    z = snapshot.requested.shape[0]
    n = snapshot.num_subchannels
    counts = snapshot.busy_counts()
    own = np.zeros((z, n), dtype=int)
    talking = np.flatnonzero(snapshot.requested >= 0)
    own[talking, snapshot.requested[talking]] = 1
    busy = ((counts[None, :] - own) > 0).astype(float)

    quality = quality_from_db(snapshot.sensed_sinr_db)
    load = np.minimum(
        snapshot.queue_bits / (TRAFFIC_SCALE_PACKETS * snapshot.mean_packet_bits), 1.0
    )
    return np.column_stack([busy, quality, load, snapshot.qos_satisfaction])


def encode_state(
    link_id: int, snapshot: EnvSnapshot, config: ScenarioConfig
) -> AgentState:
    n = config.num_subchannels
    vector = encode_states(snapshot)[link_id]
    return AgentState(
        channel_busy=vector[:n],
        channel_quality=vector[n : 2 * n],
        traffic_load=float(vector[2 * n]),
        qos_satisfaction=float(vector[2 * n + 1]),
    )


def mark_busy(state: np.ndarray, subchannels: Sequence[int]) -> np.ndarray:
    """Copy of a state vector with the given subchannels flagged busy."""
    marked = np.array(state, dtype=float, copy=True)
    for sub in subchannels:
        if sub >= 0:
            marked[sub] = 1.0
    return marked


def qos_indicators(
    link: LinkProfile,
    rate: float,
    sinrs: Sequence[float],
    bound: Optional[UrllcBound],
) -> Tuple[int, int]:
    """Failure flags (urllc, normal); ``sinrs`` are those of the used subchannels."""
    if link.service is Service.URLLC:
        rate_short = bound is not None and rate < bound.rate_min_urllc
        threshold = link.qos.sinr_min_linear
        outage = len(sinrs) == 0 or any(s < threshold for s in sinrs)
        return int(rate_short or outage), 0
    return 0, int(rate < link.qos.rate_min_normal)


def reward(
    ee_value: float, indicators: Tuple[int, int], reward_config: RewardConfig
) -> float:
    chi_urllc, chi_normal = indicators
    return ee_value - reward_config.c1 * chi_urllc - reward_config.c2 * chi_normal


def per_link_ee_all(
    rates: LinkRates,
    assignment: AssignmentMatrix,
    config: ScenarioConfig,
    mode: EEMode = EEMode.PER_LINK,
) -> np.ndarray:
    """Energy-efficiency term of every link's reward."""
    if mode is EEMode.NETWORK:
        return np.full(assignment.num_links, network_ee(assignment, rates, config))
    transmit = assignment.effective_power_w().sum(axis=1)
    return rates.rates / (transmit + config.circuit_power * MW_TO_W)


def per_link_ee(
    link_id: int,
    rates: LinkRates,
    assignment: AssignmentMatrix,
    config: ScenarioConfig,
    mode: EEMode = EEMode.PER_LINK,
) -> float:
    return float(per_link_ee_all(rates, assignment, config, mode)[link_id])
