"""Tests for expert selection, blending, grouping and joint action choice."""

import itertools

import numpy as np
import pytest
from pydantic import ValidationError

from massive_access.coop import (
    MAX_EXHAUSTIVE_MEMBERS,
    AgentProfile,
    BlendedQ,
    CooperativePolicy,
    GroupAssignment,
    blend_models,
    bregman_distance,
    decay_transfer_rate,
    group_q,
    joint_action,
    joint_q,
    partition_groups,
    run_implementation,
    select_expert,
)
from massive_access.dqn import IndependentPolicy, QNetwork, greedy_action
from massive_access.env import MassiveAccessEnv
from massive_access.errors import CombinatorialError, DimensionError
from massive_access.mdp import mark_busy
from massive_access.models import (
    JointMode,
    LinkKind,
    ScenarioConfig,
    Service,
    SimulationConfig,
    TrainConfig,
    TransferConfig,
)


@pytest.fixture
def scenario():
    return ScenarioConfig(
        num_cdevices=2, num_d2d_pairs=2, num_subchannels=2, rng_seed=5
    )


@pytest.fixture
def env(scenario):
    return MassiveAccessEnv(scenario)


@pytest.fixture
def models(env):
    sizes = [env.state_size, 8, env.space.size]
    return [
        QNetwork.initialize(sizes, np.random.default_rng(100 + i))
        for i in range(env.num_links)
    ]


def random_states(env, seed=0):
    return np.random.default_rng(seed).random((env.num_links, env.state_size))


def test_agent_profile_from_link(env):
    profile = AgentProfile.from_link(env.profiles[0])
    assert len(profile.features) == 9
    assert all(0.0 <= f <= 1.0 for f in profile.features)
    assert profile.features[0] == 1.0
    d2d = AgentProfile.from_link(env.profiles[-1])
    assert d2d.features[1] == 1.0


def test_agent_profile_validation():
    with pytest.raises(ValidationError):
        AgentProfile(link_id=0, features=[0.5] * 8)
    with pytest.raises(ValidationError):
        AgentProfile(link_id=0, features=[1.5] + [0.0] * 8)


def test_bregman_distance():
    assert bregman_distance([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert bregman_distance([0.0, 0.0], [3.0, 4.0]) == pytest.approx(25.0)
    assert bregman_distance([1.0, 0.0], [0.0, 0.0]) == bregman_distance(
        [0.0, 0.0], [1.0, 0.0]
    )
    with pytest.raises(DimensionError):
        bregman_distance([1.0], [1.0, 2.0])


def make_profile(link_id, first):
    return AgentProfile(link_id=link_id, features=[first] + [0.0] * 8)


def test_select_expert_nearest_inside_ball():
    learner = make_profile(0, 0.0)
    net = QNetwork.zeros([2, 2])
    neighbors = [
        (make_profile(0, 0.0), net),
        (make_profile(3, 0.5), net),
        (make_profile(2, 0.2), net),
        (make_profile(1, 0.2), net),
    ]
    found = select_expert(learner, neighbors, radius=1.0)
    assert found is not None
    # Equal distances go to the lower link id; the learner itself is skipped.
    assert found[0].link_id == 1
    assert select_expert(learner, neighbors, radius=0.01) is None
    assert select_expert(learner, [], radius=1.0) is None


def test_blend_models():
    rng = np.random.default_rng(0)
    transfer = QNetwork.initialize([3, 4, 2], rng)
    current = QNetwork.initialize([3, 4, 2], rng)
    state = rng.random(3)
    np.testing.assert_allclose(
        blend_models(transfer, current, 1.0).forward(state), transfer.forward(state)
    )
    np.testing.assert_allclose(
        blend_models(transfer, current, 0.0).forward(state), current.forward(state)
    )
    blended = blend_models(transfer, current, 0.25)
    assert isinstance(blended, BlendedQ)
    assert blended.output_size == 2
    np.testing.assert_allclose(
        blended.forward(state),
        0.25 * transfer.forward(state) + 0.75 * current.forward(state),
    )


def test_blend_models_rejects_bad_inputs():
    rng = np.random.default_rng(0)
    a = QNetwork.initialize([3, 4, 2], rng)
    with pytest.raises(DimensionError):
        blend_models(a, QNetwork.initialize([3, 5, 2], rng), 0.5)
    with pytest.raises(ValueError):
        blend_models(a, a.copy(), 1.5)


def test_decay_transfer_rate():
    assert decay_transfer_rate(0.8, 0.95) == pytest.approx(0.76)
    mu = 0.8
    for _ in range(50):
        mu = decay_transfer_rate(mu, 0.9)
    assert 0.0 < mu < 0.01


def test_group_assignment_validation():
    groups = GroupAssignment(num_links=4, groups=[[2, 0], [1, 3]])
    assert groups.membership == [0, 1, 0, 1]
    assert groups.group_of(3) == [1, 3]
    with pytest.raises(ValidationError):
        GroupAssignment(num_links=3, groups=[[0, 1]])
    with pytest.raises(ValidationError):
        GroupAssignment(num_links=2, groups=[[0, 1], [1]])
    assert GroupAssignment.singletons(3).groups == [[0], [1], [2]]


@pytest.mark.parametrize("group_size", [1, 2, 3, 10])
def test_partition_groups(env, group_size):
    groups = partition_groups(env.topology, group_size)
    assert groups.num_links == env.num_links
    assert all(1 <= len(g) <= group_size for g in groups.groups)
    assert sorted(i for g in groups.groups for i in g) == list(range(env.num_links))


def test_partition_groups_rejects_zero(env):
    with pytest.raises(ValueError):
        partition_groups(env.topology, 0)


def test_sequential_greedy_never_collides_cellular(env, models):
    evaluators = dict(enumerate(models))
    for seed in range(20):
        states = random_states(env, seed)
        chosen = joint_action(
            range(env.num_links), states, evaluators, env.space, env.kinds, env.masks
        )
        cellular = [
            env.space.subchannel(chosen[i])
            for i in range(env.num_links)
            if env.kinds[i] is LinkKind.CELLULAR
        ]
        busy = [s for s in cellular if s >= 0]
        assert len(busy) == len(set(busy))


def test_sequential_greedy_each_member_best_responds(env, models):
    evaluators = dict(enumerate(models))
    levels = env.space.num_levels
    members = list(range(env.num_links))
    for seed in range(20):
        states = random_states(env, seed)
        chosen = joint_action(
            members, states, evaluators, env.space, env.kinds, env.masks
        )
        announced, taken = [], set()
        for i in members:
            mask = env.masks[i].copy()
            for sub in taken:
                mask[sub * levels : (sub + 1) * levels] = False
            q = models[i].forward(mark_busy(states[i], announced))
            assert chosen[i] == greedy_action(q, mask)
            sub = env.space.subchannel(chosen[i])
            if sub >= 0:
                announced.append(sub)
                if env.kinds[i] is LinkKind.CELLULAR:
                    taken.add(sub)


def test_sequential_greedy_pair_not_worse_than_independent(env, models):
    evaluators = dict(enumerate(models))
    for first, second in itertools.combinations(range(env.num_links), 2):
        for seed in range(10):
            states = random_states(env, seed)
            pair = [first, second]
            chosen = joint_action(
                pair, states, evaluators, env.space, env.kinds, env.masks
            )
            independent = {
                i: greedy_action(models[i].forward(states[i]), env.masks[i])
                for i in pair
            }
            assert chosen[first] == independent[first]
            blocked = (
                env.kinds[first] is LinkKind.CELLULAR
                and env.kinds[second] is LinkKind.D2D
                and env.space.subchannel(independent[first]) >= 0
                and env.space.subchannel(independent[first])
                == env.space.subchannel(independent[second])
            )
            if blocked:
                continue
            assert joint_q(
                pair, states, evaluators, chosen, env.space, env.kinds
            ) >= joint_q(pair, states, evaluators, independent, env.space, env.kinds)


def test_exhaustive_matches_enumeration(env, models):
    members = [0, 1, 2]
    evaluators = dict(enumerate(models))
    states = random_states(env, 7)
    chosen = joint_action(
        members,
        states,
        evaluators,
        env.space,
        env.kinds,
        env.masks,
        JointMode.EXHAUSTIVE,
    )
    options = [np.flatnonzero(env.masks[i]).tolist() for i in members]
    best = max(
        joint_q(
            members, states, evaluators, dict(zip(members, combo)), env.space, env.kinds
        )
        for combo in itertools.product(*options)
    )
    value = joint_q(members, states, evaluators, chosen, env.space, env.kinds)
    assert value == pytest.approx(best)
    greedy = joint_action(members, states, evaluators, env.space, env.kinds, env.masks)
    greedy_value = joint_q(members, states, evaluators, greedy, env.space, env.kinds)
    assert value >= greedy_value - 1e-12


def test_exhaustive_rejects_large_groups(env, models):
    members = list(range(MAX_EXHAUSTIVE_MEMBERS + 1))
    with pytest.raises(CombinatorialError):
        joint_action(
            members,
            random_states(env),
            dict(enumerate(models)),
            env.space,
            env.kinds,
            env.masks,
            JointMode.EXHAUSTIVE,
        )


def test_group_q_sums_member_values():
    assert group_q([1.5, -0.5, 2.0]) == pytest.approx(3.0)
    assert group_q([]) == 0.0


def test_joint_q_cellular_collision_is_minus_infinity(env, models):
    actions = {i: env.space.idle_index for i in range(env.num_links)}
    actions[0] = env.space.encode(1, 0)
    actions[1] = env.space.encode(1, 2)
    value = joint_q(
        range(env.num_links),
        random_states(env),
        dict(enumerate(models)),
        actions,
        env.space,
        env.kinds,
    )
    assert value == -np.inf


def test_singletons_without_transfer_reduce_to_independent(env, models):
    config = TransferConfig(transfer_enabled=False)
    policy = CooperativePolicy(
        env, models, GroupAssignment.singletons(env.num_links), config
    )
    independent = IndependentPolicy(models, env.masks)
    for seed in range(10):
        states = random_states(env, seed)
        assert policy.select(states, 0.0) == independent.select(states, 0.0)
    assert policy.events == []


def test_new_agent_transfer_lifecycle(env, models):
    config = TransferConfig(
        radius=10.0, initial_rate=0.8, decay=0.5, min_transfer_rate=0.15
    )
    groups = GroupAssignment(num_links=4, groups=[[0, 1, 2, 3]])
    policy = CooperativePolicy(env, models, groups, config, new_agents=[0])
    assert [e.event_type for e in policy.events] == ["group"] * 4

    states = env.observe()
    policy.select(states, 0.0)
    transfer = [e for e in policy.events if e.event_type == "transfer"]
    assert len(transfer) == 1
    assert transfer[0].agent == 0
    assert transfer[0].expert_id in {1, 2, 3}
    assert transfer[0].mu == 0.8
    assert isinstance(policy.evaluator(0), BlendedQ)
    assert policy.event_counts() == (1, 1)
    assert policy.event_counts() == (0, 0)

    # 0.8 -> 0.4 -> 0.2 -> 0.1, which falls below the floor.
    for step in range(3):
        result = env.step(policy.assignment(env, states))
        policy.after_step(result)
        states = result.states
        assert (0 in policy.transfers) == (step < 2)
    ended = [e for e in policy.events if e.event_type == "transfer_end"]
    assert len(ended) == 1
    assert ended[0].mu == pytest.approx(0.1)
    assert policy.evaluator(0) is policy.models[0]


def test_transfer_step_pulls_learner_toward_expert(env, models):
    groups = GroupAssignment(num_links=4, groups=[[0, 1, 2, 3]])
    policy = CooperativePolicy(
        env, models, groups, TransferConfig(radius=10.0), new_agents=[0]
    )
    before = models[0].copy()
    states = env.observe()
    result = env.step(policy.assignment(env, states))
    expert = policy.transfers[0].expert

    gap_before = np.linalg.norm(before.forward(states[0]) - expert.forward(states[0]))
    policy.after_step(result)
    gap_after = np.linalg.norm(
        policy.models[0].forward(states[0]) - expert.forward(states[0])
    )
    assert gap_after < gap_before


@pytest.mark.parametrize("distill_step,changed", [(0.01, True), (0.0, False)])
def test_learner_keeps_transferred_knowledge(env, models, distill_step, changed):
    config = TransferConfig(
        radius=10.0,
        initial_rate=0.8,
        decay=0.5,
        min_transfer_rate=0.15,
        distill_step=distill_step,
    )
    groups = GroupAssignment(num_links=4, groups=[[0, 1, 2, 3]])
    policy = CooperativePolicy(env, models, groups, config, new_agents=[3])
    before = models[3].copy()

    states = env.observe()
    for _ in range(3):
        result = env.step(policy.assignment(env, states))
        policy.after_step(result)
        states = result.states

    assert [e.event_type for e in policy.events if e.agent == 3] == [
        "group",
        "transfer",
        "transfer_end",
    ]
    assert policy.evaluator(3) is policy.models[3]
    same = all(
        np.array_equal(a, b)
        for a, b in zip(
            before.weights + before.biases,
            policy.models[3].weights + policy.models[3].biases,
        )
    )
    assert same is not changed


def test_lone_agent_finds_no_expert(env, models):
    policy = CooperativePolicy(
        env,
        models,
        GroupAssignment.singletons(env.num_links),
        TransferConfig(),
        new_agents=[2],
    )
    policy.select(env.observe(), 0.0)
    assert [(e.agent, e.event_type) for e in policy.events] == [(2, "no_expert")]
    assert not policy.transfers


def test_change_service_requests_expert(env, models):
    groups = GroupAssignment(num_links=4, groups=[[0, 1], [2, 3]])
    policy = CooperativePolicy(env, models, groups, TransferConfig(radius=10.0))
    policy.change_service(0, Service.NORMAL)
    assert env.services[0] is Service.NORMAL
    assert policy.profiles[0].features[3] == 1.0
    assert policy.pending == {0}
    policy.select(env.observe(), 0.0)
    assert policy.transfers[0].expert_id == 1


def test_poor_satisfaction_triggers_transfer(env, models):
    config = TransferConfig(radius=10.0, poor_threshold=1.0, poor_patience=2)
    groups = GroupAssignment(num_links=4, groups=[[0, 1, 2, 3]])
    policy = CooperativePolicy(env, models, groups, config)
    idle = env.assign([env.space.idle_index] * env.num_links)
    for _ in range(2):
        policy.after_step(env.step(idle))
    assert policy.pending == {0, 1, 2, 3}


def test_run_implementation(scenario, models):
    settings = SimulationConfig(
        scenario=scenario,
        train=TrainConfig(hidden_layers=[8]),
        transfer=TransferConfig(group_size=2, radius=10.0),
    )
    originals = [m.copy() for m in models]
    outcomes = []
    for _ in range(2):
        env = MassiveAccessEnv(scenario)
        outcomes.append(
            run_implementation(
                models, env, settings, num_slots=25, window=10, new_agents=[3]
            )
        )
    first, second = outcomes
    assert [m.index for m in first.metrics] == [0, 1, 2]
    assert len(first.ee_trace) == 25
    assert first.ee_trace == second.ee_trace
    kinds = {e.event_type for e in first.events}
    assert "group" in kinds
    assert kinds & {"transfer", "no_expert"}
    for original, model in zip(originals, models):
        pairs = zip(original.weights, model.weights)
        assert all(np.array_equal(a, b) for a, b in pairs)
