"""SINR, spectral rates, network energy efficiency and feasibility checks.

Powers cross the module boundary in mW and are converted to W before any SINR
or energy-efficiency arithmetic.
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .models import ScenarioConfig
from .scenario import ChannelState

MW_TO_W = 1e-3
POWER_TOLERANCE = 1e-9

# (subchannel, power in mW) or None for an idle link.
Choice = Optional[Tuple[int, float]]


class AssignmentMatrix(BaseModel):
    """Subchannel indicators and transmit powers (mW) for one slot.

    ``requested`` holds the subchannel each link asked for (-1 when idle), and
    ``collided`` marks C-devices that lost their request to a collision.
    Neither feeds the physics; they exist for observation and reporting.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    rho_c: np.ndarray
    rho_d: np.ndarray
    power_c: np.ndarray
    power_d: np.ndarray
    requested: Optional[np.ndarray] = None
    collided: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def validate_shapes(self) -> "AssignmentMatrix":
        if self.rho_c.ndim != 2 or self.rho_d.ndim != 2:
            raise ValueError("Indicator matrices must be two-dimensional")
        if self.rho_c.shape[1] != self.rho_d.shape[1]:
            raise ValueError("Cellular and D2D matrices disagree on subchannels")
        if self.power_c.shape != self.rho_c.shape:
            raise ValueError("power_c must match rho_c")
        if self.power_d.shape != self.rho_d.shape:
            raise ValueError("power_d must match rho_d")
        if np.any(self.power_c < 0) or np.any(self.power_d < 0):
            raise ValueError("Transmit powers cannot be negative")
        z = self.rho_c.shape[0] + self.rho_d.shape[0]
        for name in ("requested", "collided"):
            value = getattr(self, name)
            if value is not None and value.shape != (z,):
                raise ValueError(f"{name} must have one entry per link")
        return self

    @classmethod
    def empty(
        cls, num_cdevices: int, num_d2d_pairs: int, num_subchannels: int
    ) -> "AssignmentMatrix":
        zeros_c = np.zeros((num_cdevices, num_subchannels))
        zeros_d = np.zeros((num_d2d_pairs, num_subchannels))
        return cls(
            rho_c=zeros_c,
            rho_d=zeros_d,
            power_c=zeros_c.copy(),
            power_d=zeros_d.copy(),
            requested=np.full(num_cdevices + num_d2d_pairs, -1, dtype=int),
            collided=np.zeros(num_cdevices + num_d2d_pairs, dtype=bool),
        )

    @classmethod
    def from_choices(
        cls, choices: Sequence[Choice], config: ScenarioConfig
    ) -> "AssignmentMatrix":
        """Build the slot's matrices from per-link choices, C-devices first.

        C-devices sharing a requested subchannel all lose it for the slot.
        """
        k, m, n = config.num_cdevices, config.num_d2d_pairs, config.num_subchannels
        if len(choices) != k + m:
            raise ValueError(f"Expected {k + m} choices, got {len(choices)}")

        requested = np.full(k + m, -1, dtype=int)
        for link, choice in enumerate(choices):
            if choice is not None:
                sub = int(choice[0])
                if not 0 <= sub < n:
                    raise IndexError(f"Subchannel {sub} out of range for link {link}")
                requested[link] = sub

        cell_requests = requested[:k]
        counts = np.bincount(cell_requests[cell_requests >= 0], minlength=n)
        collided = np.zeros(k + m, dtype=bool)
        collided[:k] = (cell_requests >= 0) & (counts[np.maximum(cell_requests, 0)] > 1)

        rho = np.zeros((k + m, n))
        power = np.zeros((k + m, n))
        for link, choice in enumerate(choices):
            if choice is None or collided[link]:
                continue
            rho[link, requested[link]] = 1.0
            power[link, requested[link]] = float(choice[1])

        return cls(
            rho_c=rho[:k],
            rho_d=rho[k:],
            power_c=power[:k],
            power_d=power[k:],
            requested=requested,
            collided=collided,
        )

    @property
    def num_cdevices(self) -> int:
        return int(self.rho_c.shape[0])

    @property
    def num_d2d_pairs(self) -> int:
        return int(self.rho_d.shape[0])

    @property
    def num_links(self) -> int:
        return self.num_cdevices + self.num_d2d_pairs

    @property
    def num_subchannels(self) -> int:
        return int(self.rho_c.shape[1])

    @property
    def rho(self) -> np.ndarray:
        return np.vstack([self.rho_c, self.rho_d])

    @property
    def power(self) -> np.ndarray:
        return np.vstack([self.power_c, self.power_d])

    def effective_power_w(self) -> np.ndarray:
        """Per-link, per-subchannel radiated power in W (zero where rho is zero)."""
        return self.rho * self.power * MW_TO_W


class LinkRates(BaseModel):
    """Spectral rates (bps/Hz) and linear SINR per (link, subchannel)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    rate_c: np.ndarray
    rate_d: np.ndarray
    sinr_c: np.ndarray
    sinr_d: np.ndarray

    @property
    def rates(self) -> np.ndarray:
        return np.concatenate([self.rate_c, self.rate_d])

    @property
    def sinr(self) -> np.ndarray:
        return np.vstack([self.sinr_c, self.sinr_d])


class ConstraintReport(BaseModel):
    """Pass/fail per feasibility constraint."""

    binary: bool
    exclusive_subchannels: bool
    power_cellular: bool
    power_d2d: bool
    power_support: bool

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def violations(self) -> List[str]:
        return [name for name, passed in self.model_dump().items() if not passed]


def _check_index(name: str, index: int, size: int) -> None:
    if not 0 <= index < size:
        raise IndexError(f"{name} index {index} out of range [0, {size})")


def sinr_cellular(
    k: int,
    n: int,
    assignment: AssignmentMatrix,
    channel: ChannelState,
    config: ScenarioConfig,
) -> float:
    """SINR of C-device ``k`` on subchannel ``n`` at the base station."""
    _check_index("C-device", k, assignment.num_cdevices)
    _check_index("Subchannel", n, assignment.num_subchannels)
    signal = assignment.power_c[k, n] * MW_TO_W * channel.h_c[k]
    if signal == 0:
        return 0.0
    d2d_power = assignment.rho_d[:, n] * assignment.power_d[:, n] * MW_TO_W
    interference = float(np.sum(d2d_power * channel.g_db))
    return float(signal / (interference + config.noise_power_w))


def sinr_d2d(
    m: int,
    n: int,
    assignment: AssignmentMatrix,
    channel: ChannelState,
    config: ScenarioConfig,
) -> float:
    """SINR of D2D pair ``m`` on subchannel ``n``; idle C-devices add nothing."""
    _check_index("D2D pair", m, assignment.num_d2d_pairs)
    _check_index("Subchannel", n, assignment.num_subchannels)
    signal = assignment.power_d[m, n] * MW_TO_W * channel.h_d[m]
    if signal == 0:
        return 0.0
    cell_power = assignment.rho_c[:, n] * assignment.power_c[:, n] * MW_TO_W
    cell_interference = float(np.sum(cell_power * channel.g_cd[:, m]))
    d2d_power = assignment.rho_d[:, n] * assignment.power_d[:, n] * MW_TO_W
    d2d_power[m] = 0.0
    d2d_interference = float(np.sum(d2d_power * channel.g_dd[:, m]))
    return float(
        signal / (cell_interference + d2d_interference + config.noise_power_w)
    )


def link_rates(
    assignment: AssignmentMatrix, channel: ChannelState, config: ScenarioConfig
) -> LinkRates:
    """Vectorised SINR and rate of every link on every subchannel."""
    noise = config.noise_power_w
    p_c = assignment.rho_c * assignment.power_c * MW_TO_W
    p_d = assignment.rho_d * assignment.power_d * MW_TO_W

    bs_interference = channel.g_db @ p_d
    sinr_c = p_c * channel.h_c[:, None] / (bs_interference[None, :] + noise)

    cross = channel.g_dd.copy()
    np.fill_diagonal(cross, 0.0)
    rx_interference = channel.g_cd.T @ p_c + cross.T @ p_d
    sinr_d = p_d * channel.h_d[:, None] / (rx_interference + noise)

    rate_c = np.sum(assignment.rho_c * np.log2(1.0 + sinr_c), axis=1)
    rate_d = np.sum(assignment.rho_d * np.log2(1.0 + sinr_d), axis=1)
    return LinkRates(
        rate_c=rate_c.reshape(assignment.num_cdevices),
        rate_d=rate_d.reshape(assignment.num_d2d_pairs),
        sinr_c=sinr_c,
        sinr_d=sinr_d,
    )


def network_ee(
    assignment: AssignmentMatrix, rates: LinkRates, config: ScenarioConfig
) -> float:
    """Sum rate over transmit plus circuit power, in bps/Hz per W."""
    total_rate = float(np.sum(rates.rate_c) + np.sum(rates.rate_d))
    transmit = float(np.sum(assignment.effective_power_w()))
    circuit = assignment.num_links * config.circuit_power * MW_TO_W
    return total_rate / (transmit + circuit)


def network_ee_batch(
    power_c: np.ndarray,
    power_d: np.ndarray,
    channel: ChannelState,
    config: ScenarioConfig,
) -> np.ndarray:
    """Network EE of many candidate assignments at once.

    ``power_c`` is ``(B, K, N)`` and ``power_d`` is ``(B, M, N)``, in W, with a
    link occupying exactly the subchannels where its power is positive.
    """
    noise = config.noise_power_w
    bs_interference = np.einsum("m,bmn->bn", channel.g_db, power_d)
    gain_c = channel.h_c[None, :, None]
    sinr_c = power_c * gain_c / (bs_interference[:, None, :] + noise)

    cross = channel.g_dd.copy()
    np.fill_diagonal(cross, 0.0)
    rx_interference = np.einsum("km,bkn->bmn", channel.g_cd, power_c) + np.einsum(
        "jm,bjn->bmn", cross, power_d
    )
    sinr_d = power_d * channel.h_d[None, :, None] / (rx_interference + noise)

    total_rate = np.log2(1.0 + sinr_c).sum(axis=(1, 2)) + np.log2(1.0 + sinr_d).sum(
        axis=(1, 2)
    )
    num_links = power_c.shape[1] + power_d.shape[1]
    consumed = (
        power_c.sum(axis=(1, 2))
        + power_d.sum(axis=(1, 2))
        + num_links * config.circuit_power * MW_TO_W
    )
    return total_rate / consumed


def check_constraints(
    assignment: AssignmentMatrix, config: ScenarioConfig
) -> ConstraintReport:
    """Evaluate each feasibility constraint without repairing anything."""
    rho = assignment.rho
    power = assignment.power
    binary = bool(np.all((rho == 0) | (rho == 1)))
    exclusive = bool(np.all(assignment.rho_c.sum(axis=0) <= 1))
    power_c = bool(
        np.all(
            (assignment.rho_c * assignment.power_c).sum(axis=1)
            <= config.max_power_c + POWER_TOLERANCE
        )
    )
    power_d = bool(
        np.all(
            (assignment.rho_d * assignment.power_d).sum(axis=1)
            <= config.max_power_d + POWER_TOLERANCE
        )
    )
    support = bool(np.all(power[rho == 0] == 0))
    return ConstraintReport(
        binary=binary,
        exclusive_subchannels=exclusive,
        power_cellular=power_c,
        power_d2d=power_d,
        power_support=support,
    )
