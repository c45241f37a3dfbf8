"""Configuration and record models with validation."""

import math
from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class LinkKind(str, Enum):
    CELLULAR = "cellular"
    D2D = "d2d"


class Service(str, Enum):
    URLLC = "urllc"
    NORMAL = "normal"


class EEMode(str, Enum):
    PER_LINK = "per_link"
    NETWORK = "network"


class JointMode(str, Enum):
    SEQUENTIAL_GREEDY = "sequential_greedy"
    EXHAUSTIVE = "exhaustive"


class Approach(str, Enum):
    PROPOSED = "proposed"
    FULLY_DISTRIBUTED = "fully_distributed"
    CENTRALIZED_G_MA = "centralized_g_ma"
    RANDOM = "random"


class SweepVariable(str, Enum):
    NONE = "none"
    RELIABILITY = "reliability"
    LATENCY = "latency"
    ARRIVAL_RATE = "arrival_rate"


class QosThresholds(BaseModel):
    """Per-link QoS targets. Times in seconds, rates in bps/Hz."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    sinr_min_db: float = 5.0
    latency_max: float = 5e-3
    p_latency_max: float = 1e-5
    p_outage_max: float = 1e-5
    rate_min_normal: float = 3.5
    t_pc: float = 3e-4

    @field_validator("p_latency_max", "p_outage_max")
    @classmethod
    def validate_probability(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError("Probability must lie in (0, 1)")
        return v

    @field_validator("rate_min_normal")
    @classmethod
    def validate_rate(cls, v: float) -> float:
        if v < 0:
            raise ValueError("Minimum rate cannot be negative")
        return v

    @model_validator(mode="after")
    def validate_deadline(self) -> "QosThresholds":
        if not self.latency_max > self.t_pc >= 0:
            raise ValueError("Require latency_max > t_pc >= 0")
        return self

    @property
    def sinr_min_linear(self) -> float:
        return 10.0 ** (self.sinr_min_db / 10.0)


class ScenarioConfig(BaseModel):
    """Cell, devices, subchannels and radio constants.

    Powers are in mW, bandwidth and frequencies in Hz, lengths in m, times in s,
    arrival rates in packets/slot.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    cell_radius: float = 500.0
    num_cdevices: int = 20
    num_d2d_pairs: int = 10
    num_subchannels: int = 16
    subchannel_bandwidth: float = 1e6
    max_d2d_distance: float = 75.0
    noise_power_dbm: float = -114.0
    max_power_c: float = 500.0
    max_power_d: float = 500.0
    circuit_power: float = 50.0
    power_levels: List[float] = Field(
        default_factory=lambda: [50.0, 150.0, 300.0, 500.0]
    )
    carrier_frequency: float = 2e9
    slot_duration: float = 1e-3
    rng_seed: int = 42
    fading: bool = True
    pathloss_exponent_cellular: float = 3.76
    pathloss_exponent_d2d: float = 4.0
    # None derives the intercept from free-space loss at the carrier frequency
    pathloss_intercept_cellular_db: Optional[float] = 15.3
    pathloss_intercept_d2d_db: Optional[float] = 28.0
    reference_distance: float = 1.0
    normal_fraction: float = 0.2
    arrival_rate: float = 0.03
    urllc_packet_bits: float = 256.0
    normal_packet_bits: float = 8192.0
    max_queue_packets: int = 64
    qos: QosThresholds = Field(default_factory=QosThresholds)

    @field_validator("num_cdevices", "num_d2d_pairs")
    @classmethod
    def validate_count(cls, v: int) -> int:
        if v < 0:
            raise ValueError("Device counts cannot be negative")
        return v

    @field_validator("num_subchannels", "max_queue_packets")
    @classmethod
    def validate_positive_count(cls, v: int) -> int:
        if v < 1:
            raise ValueError("Must be at least 1")
        return v

    @field_validator(
        "cell_radius",
        "subchannel_bandwidth",
        "circuit_power",
        "slot_duration",
        "reference_distance",
        "urllc_packet_bits",
        "normal_packet_bits",
        "max_power_c",
        "max_power_d",
        "carrier_frequency",
    )
    @classmethod
    def validate_positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("Must be positive")
        return v

    @field_validator("rng_seed")
    @classmethod
    def validate_seed(cls, v: int) -> int:
        if v < 0:
            raise ValueError("Seed cannot be negative")
        return v

    @field_validator("normal_fraction")
    @classmethod
    def validate_fraction(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("Fraction must lie in [0, 1]")
        return v

    @field_validator("arrival_rate")
    @classmethod
    def validate_arrival_rate(cls, v: float) -> float:
        if v < 0:
            raise ValueError("Arrival rate cannot be negative")
        return v

    @field_validator("power_levels")
    @classmethod
    def validate_power_levels(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("At least one power level is required")
        if any(p <= 0 for p in v) or list(v) != sorted(v):
            raise ValueError("Power levels must be positive and ascending")
        return v

    @model_validator(mode="after")
    def validate_scenario(self) -> "ScenarioConfig":
        if self.num_links < 1:
            raise ValueError("Scenario needs at least one link (K + M >= 1)")
        if self.max_d2d_distance >= self.cell_radius:
            raise ValueError("max_d2d_distance must be below cell_radius")
        if max(self.power_levels) > max(self.max_power_c, self.max_power_d):
            raise ValueError("Power level exceeds every device class maximum")
        return self

    @property
    def num_links(self) -> int:
        return self.num_cdevices + self.num_d2d_pairs

    @property
    def noise_power_w(self) -> float:
        return 10.0 ** ((self.noise_power_dbm - 30.0) / 10.0)

    @property
    def action_count(self) -> int:
        return self.num_subchannels * len(self.power_levels) + 1

    @property
    def state_size(self) -> int:
        return 2 * self.num_subchannels + 2


class RewardConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    c1: float = 2.0
    c2: float = 2.0
    ee_mode: EEMode = EEMode.PER_LINK
    qos_window: int = 50

    @field_validator("c1", "c2")
    @classmethod
    def validate_weight(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("Penalty weights must be positive")
        return v

    @field_validator("qos_window")
    @classmethod
    def validate_window(cls, v: int) -> int:
        if v < 1:
            raise ValueError("QoS window must hold at least one slot")
        return v


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    learning_rate_q: float = 0.02
    weight_step: float = 1e-3
    discount: float = 0.95
    epsilon_start: float = 1.0
    epsilon_min: float = 0.05
    epsilon_decay: float = 0.995
    batch_size: int = 64
    episodes: int = 2000
    steps_per_episode: int = 200
    target_sync_period: int = 100
    replay_capacity: int = 50_000
    updates_per_episode: int = 1
    hidden_layers: List[int] = Field(default_factory=lambda: [250, 250, 100])

    @field_validator("discount")
    @classmethod
    def validate_discount(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError("Discount must lie in (0, 1)")
        return v

    @field_validator("epsilon_decay")
    @classmethod
    def validate_decay(cls, v: float) -> float:
        if not 0.0 < v <= 1.0:
            raise ValueError("Epsilon decay must lie in (0, 1]")
        return v

    @field_validator("learning_rate_q", "weight_step")
    @classmethod
    def validate_step(cls, v: float) -> float:
        if v < 0:
            raise ValueError("Step sizes cannot be negative")
        return v

    @field_validator("batch_size", "steps_per_episode", "replay_capacity")
    @classmethod
    def validate_positive_count(cls, v: int) -> int:
        if v < 1:
            raise ValueError("Must be at least 1")
        return v

    @field_validator("episodes", "target_sync_period", "updates_per_episode")
    @classmethod
    def validate_count(cls, v: int) -> int:
        if v < 0:
            raise ValueError("Cannot be negative")
        return v

    @field_validator("hidden_layers")
    @classmethod
    def validate_hidden(cls, v: List[int]) -> List[int]:
        if any(n < 1 for n in v):
            raise ValueError("Hidden layers need at least one neuron")
        return v

    @model_validator(mode="after")
    def validate_schedule(self) -> "TrainConfig":
        if not 0.0 <= self.epsilon_min <= self.epsilon_start <= 1.0:
            raise ValueError("Require 0 <= epsilon_min <= epsilon_start <= 1")
        if self.replay_capacity < self.batch_size:
            raise ValueError("Replay capacity must hold at least one batch")
        return self

    def epsilon_at(self, episode: int) -> float:
        return max(self.epsilon_min, self.epsilon_start * self.epsilon_decay**episode)


class TransferConfig(BaseModel):
    """Transfer-learning and group cooperation settings."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    radius: float = 0.5
    initial_rate: float = 0.8
    decay: float = 0.95
    min_transfer_rate: float = 1e-3
    group_size: int = 5
    poor_threshold: float = 0.5
    poor_patience: int = 100
    cooperative: bool = True
    transfer_enabled: bool = True
    joint_mode: JointMode = JointMode.SEQUENTIAL_GREEDY
    distill_step: float = 0.01
    online_learning: bool = False
    online_update_period: int = 10

    @field_validator("radius")
    @classmethod
    def validate_radius(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("Bregman ball radius must be positive")
        return v

    @field_validator("initial_rate", "poor_threshold")
    @classmethod
    def validate_unit(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("Must lie in [0, 1]")
        return v

    @field_validator("decay")
    @classmethod
    def validate_decay(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError("Transfer-rate decay must lie in (0, 1)")
        return v

    @field_validator("distill_step")
    @classmethod
    def validate_distill_step(cls, v: float) -> float:
        if v < 0:
            raise ValueError("Distillation step cannot be negative")
        return v

    @field_validator("group_size", "poor_patience", "online_update_period")
    @classmethod
    def validate_positive_count(cls, v: int) -> int:
        if v < 1:
            raise ValueError("Must be at least 1")
        return v


class SimulationConfig(BaseModel):
    """Everything one experiment cell needs."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    reward: RewardConfig = Field(default_factory=RewardConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    transfer: TransferConfig = Field(default_factory=TransferConfig)


class LinkProfile(BaseModel):
    """One communication link (agent) and its service requirements."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    link_id: int
    kind: LinkKind
    service: Service
    arrival_rate: float
    mean_packet_bits: float
    qos: QosThresholds

    @field_validator("link_id")
    @classmethod
    def validate_link_id(cls, v: int) -> int:
        if v < 0:
            raise ValueError("Link id cannot be negative")
        return v

    @field_validator("arrival_rate")
    @classmethod
    def validate_arrival_rate(cls, v: float) -> float:
        if v < 0:
            raise ValueError("Arrival rate cannot be negative")
        return v

    @field_validator("mean_packet_bits")
    @classmethod
    def validate_packet_bits(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("Mean packet size must be positive")
        return v


class EpisodeMetrics(BaseModel):
    """One training episode or one evaluation window."""

    index: int
    mean_ee: float
    success: float
    success_urllc: Optional[float] = None
    success_normal: Optional[float] = None
    mean_reward: float
    epsilon: float = 0.0
    transfer_events: int = 0
    coop_events: int = 0
    sinr_outage: Optional[float] = None
    outage_met: Optional[bool] = None

    @field_validator("success", "success_urllc", "success_normal", "sinr_outage")
    @classmethod
    def validate_probability(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and not 0.0 <= v <= 1.0:
            raise ValueError("Probability must lie in [0, 1]")
        return v


class ExperimentSpec(BaseModel):
    """What to run: approaches, an optional sweep, and seeds."""

    model_config = ConfigDict(extra="forbid")

    config_path: Optional[str] = None
    approaches: List[Approach] = Field(default_factory=lambda: list(Approach))
    sweep: SweepVariable = SweepVariable.NONE
    sweep_values: List[float] = Field(default_factory=list)
    seeds: List[int] = Field(default_factory=lambda: [0])
    episodes: Optional[int] = None
    slots: int = 1000
    window: int = 100

    @field_validator("approaches", "seeds")
    @classmethod
    def validate_not_empty(cls, v: list) -> list:
        if not v:
            raise ValueError("At least one entry is required")
        return v

    @field_validator("slots", "window")
    @classmethod
    def validate_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("Must be at least 1")
        return v

    @model_validator(mode="after")
    def validate_sweep(self) -> "ExperimentSpec":
        if self.episodes is not None and self.episodes < 0:
            raise ValueError("Episodes cannot be negative")
        if self.sweep is SweepVariable.NONE:
            if self.sweep_values:
                raise ValueError("Sweep values given without a sweep variable")
            return self
        if not self.sweep_values:
            raise ValueError(f"Sweep '{self.sweep.value}' needs values")
        for value in self.sweep_values:
            if not math.isfinite(value):
                raise ValueError("Sweep values must be finite")
            if self.sweep is SweepVariable.RELIABILITY and not 0.0 < value < 1.0:
                raise ValueError(f"Reliability {value} outside (0, 1)")
            if self.sweep is SweepVariable.LATENCY and not value > 0:
                raise ValueError(f"Latency {value} ms must be positive")
            if self.sweep is SweepVariable.ARRIVAL_RATE and not value > 0:
                raise ValueError(f"Arrival rate {value} must be positive")
        return self

    def points(self) -> List[Optional[float]]:
        if self.sweep is SweepVariable.NONE:
            return [None]
        return list(self.sweep_values)
