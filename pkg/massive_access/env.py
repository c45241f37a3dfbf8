"""Slot-level environment: every link acts, the network responds."""

import logging
from collections import deque
from typing import Deque, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from .mdp import (
    ActionSpace,
    EnvSnapshot,
    encode_states,
    per_link_ee_all,
    qos_indicators,
    reward,
)
from .models import LinkKind, LinkProfile, RewardConfig, ScenarioConfig, Service
from .phy import MW_TO_W, AssignmentMatrix, LinkRates, link_rates, network_ee
from .scenario import (
    TRAFFIC_STREAM,
    ChannelState,
    Topology,
    build_link_profiles,
    generate_topology,
    sample_channel,
    stream_rng,
)
from .urllc import UrllcBound, min_rate_urllc

logger = logging.getLogger(__name__)

# Evaluation slots draw channels far away from any training slot index.
EVAL_SLOT_OFFSET = 1_000_000_000


class StepResult(BaseModel):
    """Outcome of one slot."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    slot: int
    states: np.ndarray
    rewards: np.ndarray
    indicators: np.ndarray
    link_ee: np.ndarray
    network_ee: float
    rates: LinkRates
    assignment: AssignmentMatrix

    @property
    def success(self) -> np.ndarray:
        return self.indicators.sum(axis=1) == 0


class MassiveAccessEnv:
    """Static topology, link traffic queues and QoS windows for one run."""

    def __init__(
        self,
        config: ScenarioConfig,
        reward_config: Optional[RewardConfig] = None,
        topology: Optional[Topology] = None,
        profiles: Optional[Sequence[LinkProfile]] = None,
        slot_offset: int = 0,
    ):
        self.config = config
        self.reward_config = reward_config or RewardConfig()
        self.topology = topology if topology is not None else generate_topology(config)
        self.profiles: List[LinkProfile] = list(
            profiles if profiles is not None else build_link_profiles(config)
        )
        if len(self.profiles) != config.num_links:
            raise ValueError(
                f"Expected {config.num_links} link profiles, got {len(self.profiles)}"
            )
        self.space = ActionSpace.from_config(config)
        self.bounds: List[Optional[UrllcBound]] = []
        self.masks = np.zeros((config.num_links, self.space.size), dtype=bool)
        self._refresh_links()
        self.reset(slot_offset)

    @property
    def num_links(self) -> int:
        return self.config.num_links

    @property
    def state_size(self) -> int:
        return self.config.state_size

    @property
    def kinds(self) -> List[LinkKind]:
        return [p.kind for p in self.profiles]

    @property
    def services(self) -> List[Service]:
        return [p.service for p in self.profiles]

    def _refresh_links(self) -> None:
        self.bounds = []
        for profile in self.profiles:
            urllc = profile.service is Service.URLLC and profile.arrival_rate > 0
            self.bounds.append(min_rate_urllc(profile, self.config) if urllc else None)
            self.masks[profile.link_id] = self.space.feasible_mask(profile.kind)

    def change_service(self, link_id: int, service: Service) -> None:
        """Switch one link to another service class, keeping its kind."""
        profile = self.profiles[link_id]
        bits = (
            self.config.normal_packet_bits
            if service is Service.NORMAL
            else self.config.urllc_packet_bits
        )
        self.profiles[link_id] = profile.model_copy(
            update={"service": service, "mean_packet_bits": bits}
        )
        self._refresh_links()
        self.snapshot.mean_packet_bits[link_id] = bits
        logger.debug("Link %d now carries %s traffic", link_id, service.value)

    def reset(self, slot_offset: int = 0) -> np.ndarray:
        """Empty queues, full QoS windows; returns the initial states."""
        self.slot = slot_offset
        self._rng = stream_rng(self.config.rng_seed, TRAFFIC_STREAM, slot_offset)
        self._queues: List[Deque[float]] = [deque() for _ in self.profiles]
        window = self.reward_config.qos_window
        self._history = np.ones((self.num_links, window))
        self._cursor = 0
        self._channel: Optional[ChannelState] = None
        self.snapshot = EnvSnapshot.initial(self.config, self.profiles)
        return self.observe()

    def observe(self) -> np.ndarray:
        return encode_states(self.snapshot)

    def assign(self, actions: Sequence[int]) -> AssignmentMatrix:
        """Turn per-link action indices into this slot's assignment."""
        if len(actions) != self.num_links:
            raise ValueError(f"Expected {self.num_links} actions, got {len(actions)}")
        choices = [self.space.decode(int(a)) for a in actions]
        return AssignmentMatrix.from_choices(choices, self.config)

    def peek_channel(self) -> ChannelState:
        """Channel of the upcoming slot (what a central controller would see)."""
        if self._channel is None:
            self._channel = sample_channel(self.topology, self.config, self.slot)
        return self._channel

    def step(self, assignment: AssignmentMatrix) -> StepResult:
        channel = self.peek_channel()
        rates = link_rates(assignment, channel, self.config)
        sinr = rates.sinr
        rho = assignment.rho
        link_rate = rates.rates

        indicators = np.zeros((self.num_links, 2), dtype=int)
        for i, profile in enumerate(self.profiles):
            used = sinr[i, rho[i] > 0]
            indicators[i] = qos_indicators(
                profile, float(link_rate[i]), used.tolist(), self.bounds[i]
            )

        link_ee = per_link_ee_all(
            rates, assignment, self.config, self.reward_config.ee_mode
        )
        rewards = np.array(
            [
                reward(
                    float(link_ee[i]),
                    (int(indicators[i, 0]), int(indicators[i, 1])),
                    self.reward_config,
                )
                for i in range(self.num_links)
            ]
        )
        success = indicators.sum(axis=1) == 0

        self._serve(link_rate, indicators)
        self._history[:, self._cursor] = success
        self._cursor = (self._cursor + 1) % self._history.shape[1]
        self._update_snapshot(assignment, channel)

        result = StepResult(
            slot=self.slot,
            states=self.observe(),
            rewards=rewards,
            indicators=indicators,
            link_ee=link_ee,
            network_ee=network_ee(assignment, rates, self.config),
            rates=rates,
            assignment=assignment,
        )
        self.slot += 1
        self._channel = None
        return result

    def _serve(self, link_rate: np.ndarray, indicators: np.ndarray) -> None:
        config = self.config
        capacity = link_rate * config.subchannel_bandwidth * config.slot_duration
        for i, profile in enumerate(self.profiles):
            queue = self._queues[i]
            if profile.service is Service.URLLC and indicators[i, 0] and queue:
                queue.popleft()
                continue
            budget = float(capacity[i])
            while queue and budget > 0:
                if queue[0] <= budget:
                    budget -= queue.popleft()
                else:
                    queue[0] -= budget
                    budget = 0.0

        rates = np.array([p.arrival_rate for p in self.profiles])
        counts = self._rng.poisson(rates)
        for i, profile in enumerate(self.profiles):
            if counts[i] == 0:
                continue
            sizes = self._rng.exponential(profile.mean_packet_bits, counts[i])
            room = self.config.max_queue_packets - len(self._queues[i])
            self._queues[i].extend(sizes[: max(room, 0)].tolist())

    def _update_snapshot(
        self, assignment: AssignmentMatrix, channel: ChannelState
    ) -> None:
        k = self.config.num_cdevices
        noise = self.config.noise_power_w
        power = assignment.effective_power_w()
        p_c, p_d = power[:k], power[k:]

        # SINR each link would see on every subchannel at its class maximum,
        # against everyone else's transmissions this slot.
        bs_total = channel.h_c @ p_c + channel.g_db @ p_d
        bs_others = np.maximum(bs_total[None, :] - channel.h_c[:, None] * p_c, 0.0)
        sensed_c = (
            self.config.max_power_c
            * MW_TO_W
            * channel.h_c[:, None]
            / (bs_others + noise)
        )
        cross = channel.g_dd.copy()
        np.fill_diagonal(cross, 0.0)
        rx_others = channel.g_cd.T @ p_c + cross.T @ p_d
        sensed_d = (
            self.config.max_power_d
            * MW_TO_W
            * channel.h_d[:, None]
            / (rx_others + noise)
        )
        sensed = np.vstack([sensed_c, sensed_d])

        requested = (
            assignment.requested.copy()
            if assignment.requested is not None
            else np.where(
                assignment.rho.sum(axis=1) > 0, assignment.rho.argmax(axis=1), -1
            )
        )
        self.snapshot = EnvSnapshot(
            requested=requested,
            sensed_sinr_db=10.0 * np.log10(sensed),
            queue_bits=np.array([sum(q) for q in self._queues]),
            qos_satisfaction=self._history.mean(axis=1),
            mean_packet_bits=self.snapshot.mean_packet_bits,
        )
