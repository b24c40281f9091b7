"""Independent Q-learning machinery built on plain numpy.

A small fully connected Q-network (ReLU hidden layers, linear output over
a discrete bid grid), hand-written backprop, RMSprop updates, an episode
replay buffer, a linear exploration schedule, and an observation codec
that fixes the scaling constants agents see. Checkpoints round-trip all
of it bit-exactly through a single .npz file.
"""

import json
from collections import deque
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

GAMMA = 0.99
LEARNING_RATE = 5e-4
RMSPROP_DECAY = 0.99
RMSPROP_EPS = 1e-5
REPLAY_CAPACITY = 5000
BATCH_SIZE = 32
TARGET_SYNC_EVERY = 200
EPSILON_START = 1.0
EPSILON_END = 0.05
EPSILON_ANNEAL_STEPS = 50_000

CHECKPOINT_VERSION = 1


class ActionGrid:
    """Uniform grid of bid amounts indexed by discrete action."""

    def __init__(self, low: float = 0.0, high: float = 5.0, num_actions: int = 21):
        if num_actions < 2:
            raise ValueError("num_actions must be >= 2")
        if not high > low:
            raise ValueError("high must exceed low")
        self.low = float(low)
        self.high = float(high)
        self.num_actions = int(num_actions)
        self.levels = np.linspace(self.low, self.high, self.num_actions)

    def amount(self, action: int) -> float:
        return float(self.levels[action])

    def amounts(self, actions: Sequence[int]) -> np.ndarray:
        return self.levels[np.asarray(actions, dtype=int)]

    def __len__(self) -> int:
        return self.num_actions

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ActionGrid)
            and self.low == other.low
            and self.high == other.high
            and self.num_actions == other.num_actions
        )


class QNet:
    """Fully connected ReLU network with a linear head, float64 throughout.

    Weights start uniform in +-1/sqrt(fan_in), biases at zero. forward()
    takes a (batch, input_dim) matrix; backward() consumes the cache from
    forward(..., keep_cache=True) plus the output gradient and returns
    per-layer (dW, db) pairs.
    """

    def __init__(
        self,
        input_dim: int,
        output_dim: int,
        hidden_sizes: Sequence[int] = (64, 64, 64),
        rng: Optional[np.random.Generator] = None,
    ):
        if rng is None:
            rng = np.random.default_rng()
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        dims = [self.input_dim, *self.hidden_sizes, self.output_dim]
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self._cache = None

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray, keep_cache: bool = False) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        activations = [x]
        h = x
        for layer in range(self.num_layers):
            z = h @ self.weights[layer] + self.biases[layer]
            if layer < self.num_layers - 1:
                h = np.maximum(z, 0.0)
            else:
                h = z
            activations.append(h)
        self._cache = activations if keep_cache else None
        return h

    def backward(self, grad_out: np.ndarray) -> List[tuple]:
        """Gradients of a scalar loss given d(loss)/d(output)."""
        if self._cache is None:
            raise RuntimeError("backward() requires forward(..., keep_cache=True)")
        activations = self._cache
        grads = [None] * self.num_layers
        delta = np.asarray(grad_out, dtype=float)
        for layer in range(self.num_layers - 1, -1, -1):
            a_in = activations[layer]
            grads[layer] = (a_in.T @ delta, delta.sum(axis=0))
            if layer > 0:
                delta = delta @ self.weights[layer].T
                delta = delta * (activations[layer] > 0.0)
        return grads

    def copy_from(self, other: "QNet") -> None:
        for w, ow in zip(self.weights, other.weights):
            w[:] = ow
        for b, ob in zip(self.biases, other.biases):
            b[:] = ob

    def clone(self) -> "QNet":
        twin = QNet(self.input_dim, self.output_dim, self.hidden_sizes,
                    rng=np.random.default_rng(0))
        twin.copy_from(self)
        return twin


class RMSProp:
    """Root-mean-square gradient scaling, one accumulator per parameter."""

    def __init__(
        self,
        net: QNet,
        learning_rate: float = LEARNING_RATE,
        decay: float = RMSPROP_DECAY,
        eps: float = RMSPROP_EPS,
    ):
        self.learning_rate = learning_rate
        self.decay = decay
        self.eps = eps
        self.acc_w = [np.zeros_like(w) for w in net.weights]
        self.acc_b = [np.zeros_like(b) for b in net.biases]

    def apply(self, net: QNet, grads: Sequence[tuple]) -> None:
        for layer, (dw, db) in enumerate(grads):
            self.acc_w[layer] = self.decay * self.acc_w[layer] + (1 - self.decay) * dw ** 2
            self.acc_b[layer] = self.decay * self.acc_b[layer] + (1 - self.decay) * db ** 2
            net.weights[layer] -= self.learning_rate * dw / (np.sqrt(self.acc_w[layer]) + self.eps)
            net.biases[layer] -= self.learning_rate * db / (np.sqrt(self.acc_b[layer]) + self.eps)


def td_targets(
    rewards: np.ndarray,
    next_q_max: np.ndarray,
    terminal: np.ndarray,
    gamma: float = GAMMA,
) -> np.ndarray:
    """One-step targets y = r + gamma * max_a' Q'(s'), truncated at episode end."""
    rewards = np.asarray(rewards, dtype=float)
    cont = 1.0 - np.asarray(terminal, dtype=float)
    return rewards + gamma * cont * np.asarray(next_q_max, dtype=float)


def train_step(
    qnet: QNet,
    target_net: QNet,
    optimizer: RMSProp,
    obs: np.ndarray,
    actions: np.ndarray,
    rewards: np.ndarray,
    next_obs: np.ndarray,
    terminal: np.ndarray,
    gamma: float = GAMMA,
) -> float:
    """One RMSprop step on the mean squared TD error; returns the loss."""
    actions = np.asarray(actions, dtype=int)
    q = qnet.forward(obs, keep_cache=True)
    next_q = target_net.forward(next_obs)
    y = td_targets(rewards, next_q.max(axis=1), terminal, gamma)
    rows = np.arange(len(actions))
    chosen = q[rows, actions]
    err = chosen - y
    loss = float(np.mean(err ** 2))
    grad_out = np.zeros_like(q)
    grad_out[rows, actions] = 2.0 * err / len(actions)
    optimizer.apply(qnet, qnet.backward(grad_out))
    return loss


def select_actions(
    qnet: QNet,
    obs: np.ndarray,
    epsilon: float,
    rng: np.random.Generator,
    num_actions: Optional[int] = None,
) -> np.ndarray:
    """Epsilon-greedy actions for a batch of observations (one per row)."""
    obs = np.atleast_2d(obs)
    if num_actions is None:
        num_actions = qnet.output_dim
    if epsilon >= 1.0:
        return rng.integers(0, num_actions, size=len(obs))
    greedy = np.argmax(qnet.forward(obs), axis=1)
    if epsilon <= 0.0:
        return greedy
    explore = rng.random(len(obs)) < epsilon
    random_actions = rng.integers(0, num_actions, size=len(obs))
    return np.where(explore, random_actions, greedy)


def select_action(
    qnet: QNet, obs: np.ndarray, epsilon: float, rng: np.random.Generator
) -> int:
    return int(select_actions(qnet, obs, epsilon, rng)[0])


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = EPSILON_START
    end: float = EPSILON_END
    anneal_steps: int = EPSILON_ANNEAL_STEPS

    def __post_init__(self):
        if self.anneal_steps < 1:
            raise ValueError("anneal_steps must be >= 1")
        if not (0.0 <= self.end <= self.start <= 1.0):
            raise ValueError("need 0 <= end <= start <= 1")

    def value(self, global_step: int) -> float:
        frac = min(1.0, max(0, global_step) / self.anneal_steps)
        return self.start + (self.end - self.start) * frac


@dataclass
class EpisodeBatch:
    """All transitions of one episode, stacked over (agent, timestep)."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


class ReplayBuffer:
    """Ring buffer of whole episodes; sampling is uniform over episodes."""

    def __init__(self, capacity: int = REPLAY_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._episodes = deque(maxlen=capacity)

    def add(self, episode: EpisodeBatch) -> None:
        self._episodes.append(episode)

    def __len__(self) -> int:
        return len(self._episodes)

    def ready(self, batch_size: int) -> bool:
        """Whether a full batch can be drawn; callers skip training until then."""
        return len(self) >= batch_size

    def sample(self, batch_size: int, rng: np.random.Generator) -> List[EpisodeBatch]:
        if not self.ready(batch_size):
            raise ValueError(
                f"replay buffer holds {len(self)} episodes, need {batch_size}")
        idx = rng.choice(len(self), size=batch_size, replace=False)
        pool = list(self._episodes)
        return [pool[i] for i in idx]

    @staticmethod
    def stack(episodes: Sequence[EpisodeBatch]) -> EpisodeBatch:
        return EpisodeBatch(
            obs=np.concatenate([e.obs for e in episodes]),
            actions=np.concatenate([e.actions for e in episodes]),
            rewards=np.concatenate([e.rewards for e in episodes]),
            next_obs=np.concatenate([e.next_obs for e in episodes]),
            terminal=np.concatenate([e.terminal for e in episodes]),
        )


@dataclass(frozen=True)
class ObservationCodec:
    """Fixed scaling used to build agent observations.

    Layout: [budget / initial_budget, value, timesteps_left / episode_length,
    one-hot agent id]. The constants live in checkpoints so a reloaded
    network always sees inputs scaled the way it was trained.
    """

    num_agents: int
    episode_length: int
    initial_budgets: tuple

    def __post_init__(self):
        if len(self.initial_budgets) != self.num_agents:
            raise ValueError("initial_budgets length must equal num_agents")
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")

    @property
    def obs_dim(self) -> int:
        return 3 + self.num_agents

    def encode(
        self,
        agent_index: int,
        remaining_budget: float,
        value: float,
        timesteps_left: int,
    ) -> np.ndarray:
        out = np.zeros(self.obs_dim)
        denom = self.initial_budgets[agent_index]
        out[0] = remaining_budget / denom if denom > 0 else 0.0
        out[1] = value
        out[2] = timesteps_left / self.episode_length
        out[3 + agent_index] = 1.0
        return out

    def encode_all(
        self,
        remaining_budgets: Sequence[float],
        values: Sequence[float],
        timesteps_left: int,
    ) -> np.ndarray:
        """(num_agents, obs_dim) matrix, one row per agent."""
        rows = np.zeros((self.num_agents, self.obs_dim))
        for i in range(self.num_agents):
            denom = self.initial_budgets[i]
            rows[i, 0] = remaining_budgets[i] / denom if denom > 0 else 0.0
            rows[i, 1] = values[i]
            rows[i, 2] = timesteps_left / self.episode_length
            rows[i, 3 + i] = 1.0
        return rows


def save_checkpoint(
    path: str,
    qnet: QNet,
    optimizer: Optional[RMSProp] = None,
    codec: Optional[ObservationCodec] = None,
    action_grid: Optional[ActionGrid] = None,
    extra: Optional[dict] = None,
) -> None:
    """Serialize network, optimizer state, and codec constants to .npz."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "input_dim": qnet.input_dim,
        "output_dim": qnet.output_dim,
        "hidden_sizes": list(qnet.hidden_sizes),
        "has_optimizer": optimizer is not None,
    }
    if optimizer is not None:
        meta["optimizer"] = {
            "learning_rate": optimizer.learning_rate,
            "decay": optimizer.decay,
            "eps": optimizer.eps,
        }
    if codec is not None:
        meta["codec"] = {
            "num_agents": codec.num_agents,
            "episode_length": codec.episode_length,
            "initial_budgets": list(codec.initial_budgets),
        }
    if action_grid is not None:
        meta["action_grid"] = {
            "low": action_grid.low,
            "high": action_grid.high,
            "num_actions": action_grid.num_actions,
        }
    if extra:
        meta["extra"] = extra
    arrays = {}
    for layer in range(qnet.num_layers):
        arrays[f"w{layer}"] = qnet.weights[layer]
        arrays[f"b{layer}"] = qnet.biases[layer]
        if optimizer is not None:
            arrays[f"acc_w{layer}"] = optimizer.acc_w[layer]
            arrays[f"acc_b{layer}"] = optimizer.acc_b[layer]
    np.savez(path, meta=np.asarray(json.dumps(meta)), **arrays)


def load_checkpoint(path: str) -> dict:
    """Rebuild the saved objects; inverse of save_checkpoint, bit for bit."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        qnet = QNet(
            meta["input_dim"],
            meta["output_dim"],
            tuple(meta["hidden_sizes"]),
            rng=np.random.default_rng(0),
        )
        for layer in range(qnet.num_layers):
            qnet.weights[layer][:] = data[f"w{layer}"]
            qnet.biases[layer][:] = data[f"b{layer}"]
        optimizer = None
        if meta["has_optimizer"]:
            opt_meta = meta["optimizer"]
            optimizer = RMSProp(
                qnet,
                learning_rate=opt_meta["learning_rate"],
                decay=opt_meta["decay"],
                eps=opt_meta["eps"],
            )
            for layer in range(qnet.num_layers):
                optimizer.acc_w[layer][:] = data[f"acc_w{layer}"]
                optimizer.acc_b[layer][:] = data[f"acc_b{layer}"]
    codec = None
    if "codec" in meta:
        c = meta["codec"]
        codec = ObservationCodec(
            num_agents=c["num_agents"],
            episode_length=c["episode_length"],
            initial_budgets=tuple(c["initial_budgets"]),
        )
    grid = None
    if "action_grid" in meta:
        g = meta["action_grid"]
        grid = ActionGrid(g["low"], g["high"], g["num_actions"])
    return {
        "qnet": qnet,
        "optimizer": optimizer,
        "codec": codec,
        "action_grid": grid,
        "extra": meta.get("extra"),
    }
