"""Tests for topology and channel generation."""

import numpy as np
import pytest
from pydantic import ValidationError

from massive_access.errors import ScenarioError
from massive_access.models import LinkKind, ScenarioConfig, Service
from massive_access.scenario import (
    ChannelState,
    build_link_profiles,
    free_space_intercept_db,
    generate_topology,
    intercepts_db,
    pathloss_gain,
    rayleigh_power,
    sample_channel,
    stream_rng,
)


@pytest.fixture
def config():
    return ScenarioConfig(
        num_cdevices=6, num_d2d_pairs=4, num_subchannels=4, rng_seed=7
    )


def test_topology_inside_cell(config):
    topology = generate_topology(config)
    assert topology.num_cdevices == 6
    assert topology.num_d2d_pairs == 4
    points = np.vstack([topology.cdevices, topology.d2d_tx, topology.d2d_rx])
    assert np.all(np.linalg.norm(points, axis=1) <= config.cell_radius + 1e-9)


def test_d2d_pairs_within_max_distance(config):
    distances = generate_topology(config).d2d_distances()
    assert np.all(distances <= config.max_d2d_distance + 1e-9)
    assert np.all(distances >= config.reference_distance - 1e-9)


def test_topology_is_reproducible(config):
    a = generate_topology(config)
    b = generate_topology(config)
    np.testing.assert_array_equal(a.cdevices, b.cdevices)
    np.testing.assert_array_equal(a.d2d_rx, b.d2d_rx)
    c = generate_topology(config.model_copy(update={"rng_seed": 8}))
    assert not np.array_equal(a.cdevices, c.cdevices)


def test_zero_d2d_distance_rejected():
    config = ScenarioConfig(max_d2d_distance=0.0)
    with pytest.raises(ScenarioError):
        generate_topology(config)


def test_pathloss_gain_reference_point():
    gain = pathloss_gain(np.array([1.0, 10.0, 0.1]), 3.0, 20.0)
    assert gain[0] == pytest.approx(1e-2)
    assert gain[1] == pytest.approx(1e-5)
    # Clamped below the reference distance.
    assert gain[2] == pytest.approx(gain[0])


def test_channel_shapes_and_diagonal(config):
    topology = generate_topology(config)
    channel = sample_channel(topology, config, slot_index=3)
    assert channel.h_c.shape == (6,)
    assert channel.g_cd.shape == (6, 4)
    assert channel.g_dd.shape == (4, 4)
    np.testing.assert_array_equal(channel.h_d, np.diag(channel.g_dd))
    assert np.all(channel.g_db > 0)


def test_channel_is_pure_function_of_slot(config):
    topology = generate_topology(config)
    first = sample_channel(topology, config, 5)
    again = sample_channel(topology, config, 5)
    other = sample_channel(topology, config, 6)
    np.testing.assert_array_equal(first.g_dd, again.g_dd)
    assert not np.array_equal(first.g_dd, other.g_dd)


def test_channel_without_fading_is_pathloss(config):
    flat = config.model_copy(update={"fading": False})
    topology = generate_topology(flat)
    channel = sample_channel(topology, flat, 0)
    distance = np.linalg.norm(topology.cdevices, axis=1)
    expected = pathloss_gain(
        distance,
        flat.pathloss_exponent_cellular,
        flat.pathloss_intercept_cellular_db,
        flat.reference_distance,
    )
    np.testing.assert_allclose(channel.h_c, expected)


def test_free_space_intercept_at_two_gigahertz():
    assert free_space_intercept_db(2e9, 1.0) == pytest.approx(38.47, abs=0.01)
    doubled = free_space_intercept_db(4e9, 1.0) - free_space_intercept_db(2e9, 1.0)
    assert doubled == pytest.approx(20.0 * np.log10(2.0))


def test_missing_intercepts_follow_carrier_frequency(config):
    derived = config.model_copy(
        update={
            "fading": False,
            "carrier_frequency": 3.5e9,
            "pathloss_intercept_cellular_db": None,
            "pathloss_intercept_d2d_db": None,
        }
    )
    free = free_space_intercept_db(3.5e9, derived.reference_distance)
    assert intercepts_db(derived) == pytest.approx((free, free))
    assert intercepts_db(config) == (15.3, 28.0)

    explicit = derived.model_copy(
        update={
            "pathloss_intercept_cellular_db": free,
            "pathloss_intercept_d2d_db": free,
        }
    )
    topology = generate_topology(derived)
    a = sample_channel(topology, derived, 0)
    b = sample_channel(topology, explicit, 0)
    np.testing.assert_allclose(a.h_c, b.h_c)
    np.testing.assert_allclose(a.g_dd, b.g_dd)


def test_rayleigh_power_has_unit_mean():
    draws = rayleigh_power(np.random.default_rng(21), (1_000_000,))
    assert draws.mean() == pytest.approx(1.0, abs=0.01)
    assert draws.min() > 0


def test_channel_fading_factors_average_to_one(config):
    flat = config.model_copy(update={"fading": False})
    topology = generate_topology(config)
    base = sample_channel(topology, flat, 0)
    ratios = []
    for slot in range(2000):
        faded = sample_channel(topology, config, slot)
        for name in ("h_c", "g_db", "g_cd", "g_dd"):
            ratios.append((getattr(faded, name) / getattr(base, name)).ravel())
    assert np.concatenate(ratios).mean() == pytest.approx(1.0, abs=0.02)


def test_channel_state_validation():
    with pytest.raises(ValidationError):
        ChannelState(
            h_c=np.ones(2),
            h_d=np.ones(1),
            g_cd=np.ones((2, 2)),
            g_db=np.ones(1),
            g_dd=np.ones((1, 1)),
        )
    with pytest.raises(ValidationError):
        ChannelState(
            h_c=-np.ones(2),
            h_d=np.ones(1),
            g_cd=np.ones((2, 1)),
            g_db=np.ones(1),
            g_dd=np.ones((1, 1)),
        )


def test_link_profiles_service_mix(config):
    profiles = build_link_profiles(config)
    assert [p.link_id for p in profiles] == list(range(10))
    assert [p.kind for p in profiles[:6]] == [LinkKind.CELLULAR] * 6
    assert [p.kind for p in profiles[6:]] == [LinkKind.D2D] * 4
    normal = [p for p in profiles if p.service is Service.NORMAL]
    assert len(normal) == 2
    assert all(p.mean_packet_bits == config.normal_packet_bits for p in normal)
    assert build_link_profiles(config) == profiles


def test_stream_rng_streams_are_independent():
    a = stream_rng(1, 2).random(4)
    b = stream_rng(1, 3).random(4)
    np.testing.assert_array_equal(a, stream_rng(1, 2).random(4))
    assert not np.array_equal(a, b)
