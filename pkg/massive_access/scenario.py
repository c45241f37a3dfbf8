"""Topology generation and per-slot channel realisations."""

import logging
import math
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .errors import ScenarioError
from .models import LinkKind, LinkProfile, ScenarioConfig, Service

logger = logging.getLogger(__name__)

# Generator streams derived from the scenario seed; each consumer owns one.
TOPOLOGY_STREAM = 0
SERVICE_STREAM = 1
CHANNEL_STREAM = 2
TRAFFIC_STREAM = 3
AGENT_STREAM = 4
POLICY_STREAM = 5
ORACLE_STREAM = 6

SPEED_OF_LIGHT = 299_792_458.0


def stream_rng(seed: int, stream: int, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, stream, *extra)``."""
    return np.random.default_rng([seed, stream, *extra])


def _check_points(name: str, value: np.ndarray) -> None:
    if value.ndim != 2 or value.shape[1] != 2:
        raise ValueError(f"{name} must have shape (n, 2), got {value.shape}")


class Topology(BaseModel):
    """Static positions in metres; the base station sits at ``base_station``.

    D2D transmitter ``m`` is paired with receiver ``m``.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    base_station: np.ndarray
    cdevices: np.ndarray
    d2d_tx: np.ndarray
    d2d_rx: np.ndarray

    @model_validator(mode="after")
    def validate_shapes(self) -> "Topology":
        if self.base_station.shape != (2,):
            raise ValueError("base_station must be a 2-vector")
        _check_points("cdevices", self.cdevices)
        _check_points("d2d_tx", self.d2d_tx)
        _check_points("d2d_rx", self.d2d_rx)
        if self.d2d_tx.shape != self.d2d_rx.shape:
            raise ValueError("Every D2D transmitter needs exactly one receiver")
        return self

    @property
    def num_cdevices(self) -> int:
        return int(self.cdevices.shape[0])

    @property
    def num_d2d_pairs(self) -> int:
        return int(self.d2d_tx.shape[0])

    def link_positions(self) -> np.ndarray:
        """Transmitter position of every link, C-devices first."""
        return np.vstack([self.cdevices, self.d2d_tx])

    def d2d_distances(self) -> np.ndarray:
        return np.linalg.norm(self.d2d_tx - self.d2d_rx, axis=1)


class ChannelState(BaseModel):
    """Linear power gains for one slot.

    ``g_dd[j, m]`` is the gain from D2D transmitter ``j`` to receiver ``m``;
    its diagonal equals ``h_d``.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    h_c: np.ndarray
    h_d: np.ndarray
    g_cd: np.ndarray
    g_db: np.ndarray
    g_dd: np.ndarray

    @model_validator(mode="after")
    def validate_gains(self) -> "ChannelState":
        k = self.h_c.shape[0]
        m = self.h_d.shape[0]
        expected = {
            "h_c": (k,),
            "h_d": (m,),
            "g_cd": (k, m),
            "g_db": (m,),
            "g_dd": (m, m),
        }
        for name, shape in expected.items():
            value = getattr(self, name)
            if value.shape != shape:
                raise ValueError(f"{name} has shape {value.shape}, expected {shape}")
            if np.any(value < 0):
                raise ValueError(f"{name} holds negative gains")
        return self

    @property
    def num_cdevices(self) -> int:
        return int(self.h_c.shape[0])

    @property
    def num_d2d_pairs(self) -> int:
        return int(self.h_d.shape[0])


def _uniform_disc(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    r = radius * np.sqrt(rng.random(n))
    theta = 2.0 * np.pi * rng.random(n)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def generate_topology(config: ScenarioConfig) -> Topology:
    """Uniform placement in the cell; receivers in a ring around their transmitter."""
    if config.max_d2d_distance <= 0:
        raise ScenarioError("max_d2d_distance must be positive")

    rng = stream_rng(config.rng_seed, TOPOLOGY_STREAM)
    radius = config.cell_radius
    cdevices = _uniform_disc(rng, config.num_cdevices, radius)
    d2d_tx = _uniform_disc(rng, config.num_d2d_pairs, radius)

    inner = min(config.reference_distance, config.max_d2d_distance)
    outer = config.max_d2d_distance
    d2d_rx = np.empty_like(d2d_tx)
    for m, tx in enumerate(d2d_tx):
        # Redraw receivers that would fall outside the cell.
        while True:
            r = np.sqrt(rng.uniform(inner**2, outer**2))
            theta = rng.uniform(0.0, 2.0 * np.pi)
            candidate = tx + r * np.array([np.cos(theta), np.sin(theta)])
            if np.hypot(candidate[0], candidate[1]) <= radius:
                d2d_rx[m] = candidate
                break

    logger.debug(
        "Placed %d C-devices and %d D2D pairs (seed %d)",
        config.num_cdevices,
        config.num_d2d_pairs,
        config.rng_seed,
    )
    return Topology(
        base_station=np.zeros(2),
        cdevices=cdevices,
        d2d_tx=d2d_tx,
        d2d_rx=d2d_rx,
    )


def pathloss_gain(
    distance: np.ndarray,
    exponent: float,
    intercept_db: float,
    reference_distance: float = 1.0,
) -> np.ndarray:
    """Log-distance path gain; distances below the reference are clamped to it."""
    d = np.maximum(np.asarray(distance, dtype=float), reference_distance)
    loss_db = intercept_db + 10.0 * exponent * np.log10(d / reference_distance)
    return 10.0 ** (-loss_db / 10.0)


def free_space_intercept_db(
    carrier_frequency: float, reference_distance: float
) -> float:
    """Free-space loss in dB at the reference distance."""
    wavelength = SPEED_OF_LIGHT / carrier_frequency
    return 20.0 * math.log10(4.0 * math.pi * reference_distance / wavelength)


def intercepts_db(config: ScenarioConfig) -> Tuple[float, float]:
    """(cellular, D2D) path-loss intercepts, falling back to free space."""
    free = free_space_intercept_db(config.carrier_frequency, config.reference_distance)
    cellular = config.pathloss_intercept_cellular_db
    d2d = config.pathloss_intercept_d2d_db
    return (
        free if cellular is None else cellular,
        free if d2d is None else d2d,
    )


def rayleigh_power(rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
    """Unit-mean exponential power factors (Rayleigh envelope)."""
    return np.maximum(rng.exponential(1.0, size=shape), np.finfo(float).tiny)


def sample_channel(
    topology: Topology, config: ScenarioConfig, slot_index: int
) -> ChannelState:
    """Block-fading channel of ``slot_index``; a pure function of seed and slot."""
    bs = topology.base_station
    d_c = np.linalg.norm(topology.cdevices - bs, axis=1)
    d_db = np.linalg.norm(topology.d2d_tx - bs, axis=1)
    d_cd = np.linalg.norm(
        topology.cdevices[:, None, :] - topology.d2d_rx[None, :, :], axis=2
    )
    d_dd = np.linalg.norm(
        topology.d2d_tx[:, None, :] - topology.d2d_rx[None, :, :], axis=2
    )

    d0 = config.reference_distance
    cell_eta = config.pathloss_exponent_cellular
    d2d_eta = config.pathloss_exponent_d2d
    cell_pl0, d2d_pl0 = intercepts_db(config)

    h_c = pathloss_gain(d_c, cell_eta, cell_pl0, d0)
    g_db = pathloss_gain(d_db, cell_eta, cell_pl0, d0)
    g_cd = pathloss_gain(d_cd, d2d_eta, d2d_pl0, d0)
    g_dd = pathloss_gain(d_dd, d2d_eta, d2d_pl0, d0)

    if config.fading:
        rng = stream_rng(config.rng_seed, CHANNEL_STREAM, slot_index)
        h_c = h_c * rayleigh_power(rng, h_c.shape)
        g_db = g_db * rayleigh_power(rng, g_db.shape)
        g_cd = g_cd * rayleigh_power(rng, g_cd.shape)
        g_dd = g_dd * rayleigh_power(rng, g_dd.shape)

    return ChannelState(
        h_c=h_c,
        h_d=np.diag(g_dd).copy(),
        g_cd=g_cd.reshape(topology.num_cdevices, topology.num_d2d_pairs),
        g_db=g_db,
        g_dd=g_dd.reshape(topology.num_d2d_pairs, topology.num_d2d_pairs),
    )


def build_link_profiles(config: ScenarioConfig) -> List[LinkProfile]:
    """One profile per link: C-devices ``0..K-1`` then D2D pairs.

    ``round(Z * normal_fraction)`` links, picked by a seeded permutation, carry
    normal traffic; the rest are URLLC.
    """
    z = config.num_links
    num_normal = int(round(z * config.normal_fraction))
    rng = stream_rng(config.rng_seed, SERVICE_STREAM)
    normal_links = set(rng.permutation(z)[:num_normal].tolist())

    profiles = []
    for link_id in range(z):
        kind = LinkKind.CELLULAR if link_id < config.num_cdevices else LinkKind.D2D
        normal = link_id in normal_links
        profiles.append(
            LinkProfile(
                link_id=link_id,
                kind=kind,
                service=Service.NORMAL if normal else Service.URLLC,
                arrival_rate=config.arrival_rate,
                mean_packet_bits=(
                    config.normal_packet_bits if normal else config.urllc_packet_bits
                ),
                qos=config.qos,
            )
        )
    return profiles
