"""Latency and reliability mathematics for URLLC links."""

import math

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .errors import InfeasibleQosError, QosDomainError
from .models import LinkProfile, QosThresholds, ScenarioConfig, Service
from .scenario import ORACLE_STREAM, stream_rng

BRANCH_POINT = -math.exp(-1.0)
_MAX_HALLEY_STEPS = 64


class UrllcBound(BaseModel):
    """Minimum spectral rate keeping the latency outage below target."""

    model_config = ConfigDict(frozen=True)

    f_i: float
    w_argument: float
    rate_min_urllc: float

    @model_validator(mode="after")
    def validate_bound(self) -> "UrllcBound":
        if not BRANCH_POINT <= self.w_argument < 0:
            raise ValueError("Lambert argument outside [-1/e, 0)")
        if not self.rate_min_urllc > 0:
            raise ValueError("Minimum URLLC rate must be positive")
        return self


def lambert_w_minus1(x: float) -> float:
    """Lower real branch of the Lambert W function, defined on ``[-1/e, 0)``.

    Starts from a branch-point series near ``-1/e`` or the asymptotic log
    expansion elsewhere, then applies Halley steps.
    """
    if not (BRANCH_POINT <= x < 0.0) or math.isnan(x):
        raise QosDomainError(f"W_-1 undefined at {x!r}; need -1/e <= x < 0")

    excess = 1.0 + math.e * x
    if excess <= 4.0 * np.finfo(float).eps:
        return -1.0

    if x < -0.25:
        p = -math.sqrt(2.0 * excess)
        w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p**3
    else:
        l1 = math.log(-x)
        l2 = math.log(-l1)
        w = l1 - l2 + l2 / l1

    for _ in range(_MAX_HALLEY_STEPS):
        ew = math.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        if wp1 == 0.0:
            break
        step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        if w - step > -1.0:
            # Stay on the lower branch: bisect towards the branch point instead.
            step = (w + 1.0) / 2.0
        w -= step
        if abs(step) <= 4.0 * np.finfo(float).eps * abs(w):
            break
    return w


def min_rate_urllc(profile: LinkProfile, config: ScenarioConfig) -> UrllcBound:
    """Rate (bps/Hz) keeping a URLLC link's latency outage under ``p_latency_max``."""
    if profile.service is not Service.URLLC:
        raise ValueError(f"Link {profile.link_id} is not a URLLC link")
    rate_per_second = profile.arrival_rate / config.slot_duration
    if not rate_per_second > 0:
        raise QosDomainError(f"Link {profile.link_id} needs a positive arrival rate")

    deadline = profile.qos.latency_max
    load = rate_per_second * deadline
    # expm1 overflows past ~709; the factor is already zero in double precision.
    f_i = -load / math.expm1(load) if load < 700.0 else 0.0
    argument = profile.qos.p_latency_max * f_i * math.exp(f_i)
    if not BRANCH_POINT <= argument < 0:
        raise InfeasibleQosError(
            f"Link {profile.link_id}: no rate meets the latency target "
            f"(Lambert argument {argument!r})"
        )

    scale = profile.mean_packet_bits / (config.subchannel_bandwidth * deadline)
    rate = scale * (f_i - lambert_w_minus1(argument))
    return UrllcBound(f_i=f_i, w_argument=argument, rate_min_urllc=rate)


def total_latency(
    bits: float, rate: float, queue_wait: float, config: ScenarioConfig
) -> float:
    """Transmission plus queueing plus processing delay, in seconds."""
    if rate <= 0:
        return math.inf
    return bits / (config.subchannel_bandwidth * rate) + queue_wait + config.qos.t_pc


def reliability_ok(sinr: float, qos: QosThresholds) -> bool:
    return sinr >= qos.sinr_min_linear


def queue_latency_oracle(
    profile: LinkProfile,
    rate: float,
    config: ScenarioConfig,
    num_slots: int,
    seed: int = 0,
) -> float:
    """Fraction of packets whose total latency exceeds ``latency_max``.

    FIFO queue fed by Poisson(lambda) packets per slot, arriving uniformly
    inside their slot, with exponential sizes of mean ``mean_packet_bits``,
    served at ``W * rate`` bit/s.
    """
    if profile.arrival_rate == 0 or num_slots <= 0:
        return 0.0

    rng = stream_rng(seed, ORACLE_STREAM)
    counts = rng.poisson(profile.arrival_rate, num_slots)
    total = int(counts.sum())
    if total == 0:
        return 0.0

    slots = np.repeat(np.arange(num_slots), counts)
    arrivals = np.sort((slots + rng.random(total)) * config.slot_duration)
    sizes = rng.exponential(profile.mean_packet_bits, total)

    if rate <= 0:
        return 1.0
    if math.isinf(rate):
        service = np.zeros(total)
    else:
        service = sizes / (config.subchannel_bandwidth * rate)

    # Lindley recursion in closed form: D_i = C_i + max_{j<=i}(A_j - C_{j-1}).
    completed = np.cumsum(service)
    departures = completed + np.maximum.accumulate(arrivals - (completed - service))
    latency = departures - arrivals + profile.qos.t_pc
    return float(np.mean(latency > profile.qos.latency_max))
