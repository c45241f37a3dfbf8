"""Tests for SINR, rates, energy efficiency and constraints."""

import numpy as np
import pytest
from pydantic import ValidationError

from massive_access.models import ScenarioConfig
from massive_access.phy import (
    AssignmentMatrix,
    check_constraints,
    link_rates,
    network_ee,
    network_ee_batch,
    sinr_cellular,
    sinr_d2d,
)
from massive_access.scenario import ChannelState, generate_topology, sample_channel


@pytest.fixture
def config():
    # Noise of exactly 1e-9 W keeps hand computations simple.
    return ScenarioConfig(
        num_cdevices=2, num_d2d_pairs=2, num_subchannels=2, noise_power_dbm=-60.0
    )


@pytest.fixture
def channel():
    return ChannelState(
        h_c=np.array([1e-6, 2e-6]),
        h_d=np.array([1e-5, 3e-5]),
        g_cd=np.array([[1e-7, 2e-7], [3e-7, 4e-7]]),
        g_db=np.array([1e-8, 2e-8]),
        g_dd=np.array([[1e-5, 5e-8], [6e-8, 3e-5]]),
    )


def test_from_choices_builds_matrices(config):
    assignment = AssignmentMatrix.from_choices(
        [(0, 500.0), None, (0, 150.0), (1, 50.0)], config
    )
    np.testing.assert_array_equal(assignment.rho_c, [[1, 0], [0, 0]])
    np.testing.assert_array_equal(assignment.rho_d, [[1, 0], [0, 1]])
    assert assignment.power_d[0, 0] == 150.0
    np.testing.assert_array_equal(assignment.requested, [0, -1, 0, 1])
    assert not assignment.collided.any()


def test_cellular_collision_drops_both(config):
    assignment = AssignmentMatrix.from_choices(
        [(1, 500.0), (1, 300.0), (1, 150.0), None], config
    )
    assert assignment.rho_c.sum() == 0
    np.testing.assert_array_equal(assignment.collided, [True, True, False, False])
    assert assignment.rho_d[0, 1] == 1
    assert check_constraints(assignment, config).ok


def test_from_choices_validates_inputs(config):
    with pytest.raises(ValueError):
        AssignmentMatrix.from_choices([None, None], config)
    with pytest.raises(IndexError):
        AssignmentMatrix.from_choices([(5, 50.0), None, None, None], config)


def test_assignment_rejects_negative_power():
    with pytest.raises(ValidationError):
        AssignmentMatrix(
            rho_c=np.ones((1, 1)),
            rho_d=np.zeros((0, 1)),
            power_c=-np.ones((1, 1)),
            power_d=np.zeros((0, 1)),
        )


def test_sinr_matches_hand_computation(config, channel):
    assignment = AssignmentMatrix.from_choices(
        [(0, 500.0), None, (0, 100.0), (0, 200.0)], config
    )
    noise = 1e-9
    expected_c = 0.5 * 1e-6 / (0.1 * 1e-8 + 0.2 * 2e-8 + noise)
    assert sinr_cellular(0, 0, assignment, channel, config) == pytest.approx(expected_c)

    expected_d0 = 0.1 * 1e-5 / (0.5 * 1e-7 + 0.2 * 6e-8 + noise)
    assert sinr_d2d(0, 0, assignment, channel, config) == pytest.approx(expected_d0)
    assert sinr_d2d(0, 1, assignment, channel, config) == 0.0


def test_d2d_alone_sees_only_noise(config, channel):
    assignment = AssignmentMatrix.from_choices(
        [None, None, None, (1, 100.0)], config
    )
    expected = 0.1 * 3e-5 / 1e-9
    assert sinr_d2d(1, 1, assignment, channel, config) == pytest.approx(expected)


def test_sinr_index_errors(config, channel):
    assignment = AssignmentMatrix.empty(2, 2, 2)
    with pytest.raises(IndexError):
        sinr_cellular(2, 0, assignment, channel, config)
    with pytest.raises(IndexError):
        sinr_d2d(0, 2, assignment, channel, config)


def test_vectorised_rates_match_scalar_sinr(config, channel):
    assignment = AssignmentMatrix.from_choices(
        [(0, 500.0), (1, 300.0), (0, 100.0), (1, 200.0)], config
    )
    rates = link_rates(assignment, channel, config)
    for k in range(2):
        for n in range(2):
            assert rates.sinr_c[k, n] == pytest.approx(
                sinr_cellular(k, n, assignment, channel, config)
            )
    for m in range(2):
        for n in range(2):
            assert rates.sinr_d[m, n] == pytest.approx(
                sinr_d2d(m, n, assignment, channel, config)
            )
    assert rates.rate_c[0] == pytest.approx(np.log2(1 + rates.sinr_c[0, 0]))
    assert rates.rates.shape == (4,)


@pytest.mark.parametrize("seed", range(10))
def test_sinr_non_increasing_when_interferer_powers_up(config, seed):
    rng = np.random.default_rng(seed)
    channel = sample_channel(generate_topology(config), config, seed)
    choices = [(int(rng.integers(2)), float(rng.uniform(10, 200))) for _ in range(4)]
    louder = int(rng.integers(4))
    boosted = list(choices)
    boosted[louder] = (choices[louder][0], choices[louder][1] * 2.5)

    base = link_rates(AssignmentMatrix.from_choices(choices, config), channel, config)
    loud = link_rates(AssignmentMatrix.from_choices(boosted, config), channel, config)
    others = [i for i in range(4) if i != louder]
    assert np.all(loud.sinr[others] <= base.sinr[others] * (1 + 1e-12))


def test_network_ee_invariant_under_link_relabelling(config):
    channel = sample_channel(generate_topology(config), config, 3)
    choices = [(0, 100.0), (1, 400.0), (0, 50.0), (1, 150.0)]
    ee = network_ee_of(choices, channel, config)

    perm_c, perm_d = np.array([1, 0]), np.array([1, 0])
    relabelled = ChannelState(
        h_c=channel.h_c[perm_c],
        h_d=channel.h_d[perm_d],
        g_cd=channel.g_cd[np.ix_(perm_c, perm_d)],
        g_db=channel.g_db[perm_d],
        g_dd=channel.g_dd[np.ix_(perm_d, perm_d)],
    )
    moved = [choices[1], choices[0], choices[3], choices[2]]
    assert network_ee_of(moved, relabelled, config) == pytest.approx(ee, rel=1e-12)


def test_network_ee_idle_network_is_zero(config, channel):
    assignment = AssignmentMatrix.empty(2, 2, 2)
    rates = link_rates(assignment, channel, config)
    assert network_ee(assignment, rates, config) == 0.0


def test_network_ee_definition(config, channel):
    assignment = AssignmentMatrix.from_choices(
        [(0, 500.0), None, None, (1, 100.0)], config
    )
    rates = link_rates(assignment, channel, config)
    consumed = 0.5 + 0.1 + 4 * 0.05
    expected = float(rates.rates.sum()) / consumed
    assert network_ee(assignment, rates, config) == pytest.approx(expected)


def test_batch_ee_matches_scalar(config):
    topology = generate_topology(config)
    channel = sample_channel(topology, config, 0)
    rng = np.random.default_rng(0)
    candidates = []
    for _ in range(5):
        choices = [
            (int(rng.integers(2)), float(rng.choice(config.power_levels)))
            if rng.random() < 0.7
            else None
            for _ in range(4)
        ]
        candidates.append(AssignmentMatrix.from_choices(choices, config))
    power = np.stack([a.effective_power_w() for a in candidates])
    batch = network_ee_batch(power[:, :2], power[:, 2:], channel, config)
    for value, assignment in zip(batch, candidates):
        rates = link_rates(assignment, channel, config)
        assert value == pytest.approx(network_ee(assignment, rates, config))


def test_check_constraints_flags_violations(config):
    assignment = AssignmentMatrix(
        rho_c=np.array([[1.0, 0.0], [1.0, 0.0]]),
        rho_d=np.array([[0.5, 0.0], [0.0, 0.0]]),
        power_c=np.array([[600.0, 0.0], [100.0, 0.0]]),
        power_d=np.array([[100.0, 0.0], [0.0, 50.0]]),
    )
    report = check_constraints(assignment, config)
    assert not report.ok
    assert set(report.violations) == {
        "binary",
        "exclusive_subchannels",
        "power_cellular",
        "power_support",
    }


def network_ee_of(choices, channel, config):
    assignment = AssignmentMatrix.from_choices(choices, config)
    return network_ee(assignment, link_rates(assignment, channel, config), config)
