"""Per-agent deep Q-learning: network, replay memory, updates and training loop."""

import logging
from pathlib import Path
from typing import (
    Callable,
    List,
    NamedTuple,
    Optional,
    Protocol,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
from pydantic import BaseModel, ConfigDict

from .env import MassiveAccessEnv, StepResult
from .errors import DimensionError, DivergenceError, ExperimentIOError, ReplayError
from .metrics import EpisodeAccumulator
from .models import EpisodeMetrics, TrainConfig
from .phy import AssignmentMatrix
from .scenario import AGENT_STREAM, stream_rng

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class Gradients(NamedTuple):
    weights: List[np.ndarray]
    biases: List[np.ndarray]


class Transition(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray


class ForwardCache(NamedTuple):
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]


class QEvaluator(Protocol):
    """Anything that maps states to Q-values."""

    @property
    def output_size(self) -> int: ...

    def forward(self, states: np.ndarray) -> np.ndarray: ...


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, 0.0)


class QNetwork:
    """Fully connected ReLU network with a linear output layer.

    Weights are stored ``(fan_out, fan_in)``; batches are rows.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise DimensionError("Need one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"Layer {i}: weight {w.shape} / bias {b.shape}")
            if i and w.shape[1] != weights[i - 1].shape[0]:
                raise DimensionError(f"Layer {i} does not chain onto layer {i - 1}")
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]

    @classmethod
    def initialize(
        cls, layer_sizes: Sequence[int], rng: np.random.Generator
    ) -> "QNetwork":
        """Uniform weights in +-1/sqrt(fan_in), zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int]) -> "QNetwork":
        pairs = list(zip(layer_sizes[:-1], layer_sizes[1:]))
        return cls(
            [np.zeros((fan_out, fan_in)) for fan_in, fan_out in pairs],
            [np.zeros(fan_out) for _, fan_out in pairs],
        )

    @property
    def layer_sizes(self) -> List[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_size(self) -> int:
        return int(self.weights[0].shape[1])

    @property
    def output_size(self) -> int:
        return int(self.weights[-1].shape[0])

    def _as_batch(self, states: np.ndarray) -> np.ndarray:
        x = np.asarray(states, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise DimensionError(
                f"State of shape {np.shape(states)} does not fit "
                f"input size {self.input_size}"
            )
        return x

    def forward(self, states: np.ndarray) -> np.ndarray:
        """Q-values; a single state gives a vector, a batch gives rows."""
        single = np.ndim(states) == 1
        _, q = self.forward_cached(self._as_batch(states))
        return q[0] if single else q

    def forward_cached(self, states: np.ndarray) -> Tuple[ForwardCache, np.ndarray]:
        x = self._as_batch(states)
        inputs, pre = [], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(x)
            z = x @ w.T + b
            pre.append(z)
            x = z if i == last else relu(z)
        return ForwardCache(inputs, pre), x

    def backward(self, cache: ForwardCache, dq: np.ndarray) -> Gradients:
        """Parameter gradients given dLoss/dQ for the cached batch."""
        grad_w: List[np.ndarray] = [np.empty(0)] * len(self.weights)
        grad_b: List[np.ndarray] = [np.empty(0)] * len(self.weights)
        delta = dq
        for i in reversed(range(len(self.weights))):
            grad_w[i] = delta.T @ cache.inputs[i]
            grad_b[i] = delta.sum(axis=0)
            if i:
                delta = (delta @ self.weights[i]) * relu_grad(
                    cache.pre_activations[i - 1]
                )
        return Gradients(grad_w, grad_b)

    def copy(self) -> "QNetwork":
        return QNetwork(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases]
        )

    def load_from(self, other: "QNetwork") -> None:
        if other.layer_sizes != self.layer_sizes:
            raise DimensionError("Cannot copy parameters between architectures")
        pairs = zip(self.weights + self.biases, other.weights + other.biases)
        for mine, theirs in pairs:
            mine[...] = theirs

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.weights + self.biases)


class ReplayBuffer:
    """Ring buffer of transitions; the oldest entries are overwritten first."""

    def __init__(self, capacity: int, state_size: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("Replay capacity must be positive")
        self.capacity = capacity
        self.state_size = state_size
        self._rng = rng
        self._states = np.zeros((0, state_size))
        self._next_states = np.zeros((0, state_size))
        self._actions = np.zeros(0, dtype=np.int64)
        self._rewards = np.zeros(0, dtype=np.float64)
        self._cursor = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def _grow(self) -> None:
        new_len = min(self.capacity, max(64, 2 * len(self._actions)))
        extra = new_len - len(self._actions)
        self._states = np.vstack([self._states, np.zeros((extra, self.state_size))])
        self._next_states = np.vstack(
            [self._next_states, np.zeros((extra, self.state_size))]
        )
        self._actions = np.concatenate([self._actions, np.zeros(extra, np.int64)])
        self._rewards = np.concatenate([self._rewards, np.zeros(extra)])

    def add(
        self, state: np.ndarray, action: int, reward: float, next_state: np.ndarray
    ) -> None:
        if self._cursor >= len(self._actions):
            self._grow()
        i = self._cursor
        self._states[i] = state
        self._actions[i] = action
        self._rewards[i] = reward
        self._next_states[i] = next_state
        self._cursor = (self._cursor + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int) -> Transition:
        if self._size < batch_size:
            raise ReplayError(
                f"Cannot sample {batch_size} transitions from {self._size} stored"
            )
        idx = self._rng.choice(self._size, size=batch_size, replace=False)
        return Transition(
            states=self._states[idx].copy(),
            actions=self._actions[idx],
            rewards=self._rewards[idx],
            next_states=self._next_states[idx].copy(),
        )


def td_loss(
    net: QNetwork,
    target_net: Optional[QNetwork],
    batch: Transition,
    gamma: float,
) -> Tuple[float, Gradients]:
    """Mean squared TD error and its gradient w.r.t. ``net``.

    The bootstrapped target is held fixed; ``target_net=None`` evaluates it
    with ``net`` itself.
    """
    size = len(batch.actions)
    if size == 0:
        raise ReplayError("Empty batch")
    bootstrap = (target_net or net).forward(batch.next_states)
    targets = batch.rewards + gamma * bootstrap.max(axis=1)

    cache, q = net.forward_cached(batch.states)
    rows = np.arange(size)
    diff = q[rows, batch.actions] - targets
    loss = float(np.mean(diff**2))

    dq = np.zeros_like(q)
    dq[rows, batch.actions] = 2.0 * diff / size
    return loss, net.backward(cache, dq)


def distill_loss(
    net: QNetwork, states: np.ndarray, targets: np.ndarray
) -> Tuple[float, Gradients]:
    """Mean squared gap between ``net`` and fixed Q-value targets, all actions."""
    cache, q = net.forward_cached(states)
    targets = np.asarray(targets, dtype=float).reshape(q.shape)
    diff = q - targets
    loss = float(np.mean(diff**2))
    return loss, net.backward(cache, 2.0 * diff / diff.size)


def sgd_step(net: QNetwork, gradients: Gradients, step: float) -> QNetwork:
    """Plain gradient descent, in place."""
    for w, g in zip(net.weights, gradients.weights):
        if w.shape != g.shape:
            raise DimensionError("Gradient does not match the network")
        w -= step * g
    for b, g in zip(net.biases, gradients.biases):
        if b.shape != g.shape:
            raise DimensionError("Gradient does not match the network")
        b -= step * g
    return net


def greedy_action(q_values: np.ndarray, mask: Optional[np.ndarray] = None) -> int:
    """Argmax with lowest-index ties, restricted to ``mask``."""
    if mask is not None:
        q_values = np.where(mask, q_values, -np.inf)
    return int(np.argmax(q_values))


def select_action(
    net: QEvaluator,
    state: np.ndarray,
    epsilon: float,
    rng: Optional[np.random.Generator],
    mask: Optional[np.ndarray] = None,
) -> int:
    """Epsilon-greedy choice; the generator is touched only when ``epsilon > 0``."""
    if epsilon > 0 and rng is not None and rng.random() < epsilon:
        size = net.output_size
        candidates = np.flatnonzero(mask) if mask is not None else np.arange(size)
        return int(rng.choice(candidates))
    return greedy_action(net.forward(state), mask)


def tabular_q_update(
    table: np.ndarray,
    state: int,
    action: int,
    reward: float,
    next_state: int,
    alpha: float,
    gamma: float,
) -> np.ndarray:
    updated = table.copy()
    target = reward + gamma * np.max(table[next_state])
    updated[state, action] += alpha * (target - table[state, action])
    return updated


def tabular_q_step(
    table: np.ndarray,
    state: int,
    action: int,
    reward: float,
    next_state: int,
    config: TrainConfig,
) -> np.ndarray:
    """Tabular update at the configured learning rate and discount."""
    alpha, gamma = config.learning_rate_q, config.discount
    return tabular_q_update(table, state, action, reward, next_state, alpha, gamma)


class DqnAgent:
    """One link's network, optional target copy, replay memory and generator."""

    def __init__(
        self,
        link_id: int,
        net: QNetwork,
        buffer: ReplayBuffer,
        rng: np.random.Generator,
        use_target: bool = True,
    ):
        self.link_id = link_id
        self.net = net
        self.buffer = buffer
        self.rng = rng
        self.target = net.copy() if use_target else None
        self.grad_steps = 0

    def sync_target(self) -> None:
        if self.target is not None:
            self.target.load_from(self.net)

    def learn(self, config: TrainConfig) -> Optional[float]:
        """One mini-batch step, or None while the memory holds less than a batch."""
        if len(self.buffer) < config.batch_size:
            return None
        batch = self.buffer.sample(config.batch_size)
        loss, grads = td_loss(self.net, self.target, batch, config.discount)
        sgd_step(self.net, grads, config.weight_step)
        self.grad_steps += 1
        period = config.target_sync_period
        if period and self.grad_steps % period == 0:
            self.sync_target()
        return loss


def make_agents(
    env: MassiveAccessEnv,
    config: TrainConfig,
    seed: int,
    models: Optional[Sequence[QNetwork]] = None,
) -> List[DqnAgent]:
    """One agent per link with its own seed stream; ``models`` reuses trained nets."""
    sizes = [env.state_size, *config.hidden_layers, env.space.size]
    agents = []
    for link_id in range(env.num_links):
        rng = stream_rng(seed, AGENT_STREAM, link_id)
        net = models[link_id] if models is not None else QNetwork.initialize(sizes, rng)
        if net.layer_sizes != sizes:
            raise DimensionError(
                f"Model for link {link_id} has layers {net.layer_sizes}"
            )
        buffer = ReplayBuffer(config.replay_capacity, env.state_size, rng)
        agents.append(
            DqnAgent(
                link_id, net, buffer, rng, use_target=config.target_sync_period > 0
            )
        )
    return agents


class ActionSelector:
    """Chooses every link's action for one slot."""

    def __init__(self) -> None:
        self.last_actions: List[int] = []

    def select(self, states: np.ndarray, epsilon: float) -> List[int]:
        raise NotImplementedError

    def assignment(
        self, env: MassiveAccessEnv, states: np.ndarray, epsilon: float = 0.0
    ) -> AssignmentMatrix:
        self.last_actions = self.select(states, epsilon)
        return env.assign(self.last_actions)

    def after_step(self, result: StepResult) -> None:
        """Hook run once the slot outcome is known."""

    def event_counts(self) -> Tuple[int, int]:
        """(transfer, cooperation) events since the last call."""
        return 0, 0


class IndependentPolicy(ActionSelector):
    """Each agent acts on its own Q-values; no sharing, no transfer."""

    def __init__(
        self,
        models: Sequence[QNetwork],
        masks: np.ndarray,
        rngs: Optional[Sequence[np.random.Generator]] = None,
    ):
        super().__init__()
        self.models = list(models)
        self.masks = masks
        self.rngs = list(rngs) if rngs is not None else [None] * len(self.models)

    def select(self, states: np.ndarray, epsilon: float) -> List[int]:
        return [
            select_action(model, states[i], epsilon, self.rngs[i], self.masks[i])
            for i, model in enumerate(self.models)
        ]


class TrainingResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    models: List[QNetwork]
    metrics: List[EpisodeMetrics]


def train(
    agents: Sequence[DqnAgent],
    env: MassiveAccessEnv,
    config: TrainConfig,
    selector: Optional[ActionSelector] = None,
) -> TrainingResult:
    """Episodes of acting and storing, each followed by per-agent mini-batch updates."""
    if selector is None:
        selector = IndependentPolicy(
            [a.net for a in agents], env.masks, [a.rng for a in agents]
        )
    metrics: List[EpisodeMetrics] = []
    report_every = max(1, config.episodes // 10)

    for episode in range(config.episodes):
        epsilon = config.epsilon_at(episode)
        states = env.reset(slot_offset=episode * config.steps_per_episode)
        accumulator = EpisodeAccumulator.for_links(env.profiles)

        for _ in range(config.steps_per_episode):
            result = env.step(selector.assignment(env, states, epsilon))
            actions = selector.last_actions
            selector.after_step(result)
            for agent in agents:
                i = agent.link_id
                agent.buffer.add(
                    states[i], actions[i], result.rewards[i], result.states[i]
                )
            accumulator.add(result)
            states = result.states

        for agent in agents:
            loss = None
            for _ in range(config.updates_per_episode):
                loss = agent.learn(config)
                if loss is None:
                    break
            if not agent.net.is_finite():
                raise DivergenceError(agent.link_id, episode, loss)

        transfers, coop = selector.event_counts()
        row = accumulator.finish(
            episode, epsilon=epsilon, transfer_events=transfers, coop_events=coop
        )
        metrics.append(row)
        if (episode + 1) % report_every == 0:
            logger.info(
                "Episode %d/%d: EE %.3f, success %.3f, epsilon %.3f",
                episode + 1,
                config.episodes,
                row.mean_ee,
                row.success,
                epsilon,
            )

    return TrainingResult(models=[a.net for a in agents], metrics=metrics)


StepHook = Callable[[np.ndarray, StepResult], None]


def run_windows(
    env: MassiveAccessEnv,
    selector: ActionSelector,
    num_slots: int,
    window: int,
    on_step: Optional[StepHook] = None,
) -> List[EpisodeMetrics]:
    """Greedy execution for ``num_slots`` slots, one metrics row per window.

    ``on_step`` receives the pre-step states and the slot outcome. A trailing
    partial window still yields a row.
    """
    if window < 1:
        raise ValueError("Window must hold at least one slot")
    rows: List[EpisodeMetrics] = []
    accumulator = EpisodeAccumulator.for_links(env.profiles)
    states = env.observe()

    def close_window() -> None:
        transfers, coop = selector.event_counts()
        rows.append(
            accumulator.finish(len(rows), transfer_events=transfers, coop_events=coop)
        )

    for _ in range(num_slots):
        result = env.step(selector.assignment(env, states, 0.0))
        selector.after_step(result)
        if on_step is not None:
            on_step(states, result)
        accumulator.add(result)
        states = result.states
        if accumulator.count == window:
            close_window()
            accumulator = EpisodeAccumulator.for_links(env.profiles)

    if accumulator.count:
        close_window()
    return rows


def save_checkpoint(path: Union[str, Path], models: Sequence[QNetwork]) -> None:
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "num_agents": np.array(len(models)),
    }
    for i, model in enumerate(models):
        arrays[f"agent{i}_layer_sizes"] = np.array(model.layer_sizes)
        for j, (w, b) in enumerate(zip(model.weights, model.biases)):
            arrays[f"agent{i}_w{j}"] = w
            arrays[f"agent{i}_b{j}"] = b
    try:
        with open(path, "wb") as f:
            np.savez(f, **arrays)
    except OSError as e:
        raise ExperimentIOError(path, e) from e


def load_checkpoint(path: Union[str, Path]) -> List[QNetwork]:
    try:
        with np.load(path) as data:
            version = int(data["version"])
            if version != CHECKPOINT_VERSION:
                raise ExperimentIOError(
                    path, f"unsupported checkpoint version {version}"
                )
            models = []
            for i in range(int(data["num_agents"])):
                layers = len(data[f"agent{i}_layer_sizes"]) - 1
                models.append(
                    QNetwork(
                        [data[f"agent{i}_w{j}"] for j in range(layers)],
                        [data[f"agent{i}_b{j}"] for j in range(layers)],
                    )
                )
            return models
    except (OSError, KeyError, ValueError) as e:
        raise ExperimentIOError(path, e) from e
