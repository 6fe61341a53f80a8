"""Defenders: the rule-based static detector and the DQN topology switcher."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import neuralnet as nn
from .dynamics import ConfigError


@dataclass(frozen=True)
class Experience:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool = False


class ReplayMemory:
    """Fixed-capacity ring buffer with uniform sampling from a seeded generator."""

    def __init__(self, capacity: int, seed=0):
        if capacity < 1:
            raise ConfigError("replay capacity must be >= 1")
        self.capacity = int(capacity)
        self._buf: list = []
        self._next = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self._buf)

    def push(self, exp: Experience):
        if not math.isfinite(exp.reward):
            raise ValueError(f"non-finite reward {exp.reward}")
        if len(self._buf) < self.capacity:
            self._buf.append(exp)
        else:
            self._buf[self._next] = exp
        self._next = (self._next + 1) % self.capacity

    def sample_indices(self, k: int) -> np.ndarray:
        if not self._buf:
            raise ValueError("cannot sample from an empty replay memory")
        return self.rng.integers(0, len(self._buf), size=k)

    def sample(self, k: int) -> list:
        return [self._buf[i] for i in self.sample_indices(k)]

    def contents(self) -> list:
        return list(self._buf)


@dataclass(frozen=True)
class AgentConfig:
    B0: float = 1.0
    lambda_decay: float = 0.01
    gamma: float = 0.95
    batch_size: int = 32
    capacity: int = 10_000
    freeze_period: int = 50
    drop_fraction: float = 0.2
    window: int = 10
    reward_floor: float = 0.05
    B_r: float = 0.3
    hidden: tuple = (24, 24)
    lr: float = 1e-3

    def __post_init__(self):
        if not 0 < self.B0 <= 1:
            raise ConfigError("B0 must be in (0, 1]")
        if self.lambda_decay < 0:
            raise ConfigError("lambda_decay must be >= 0")
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must be in (0, 1)")
        if not 0 <= self.B_r <= self.B0:
            raise ConfigError("B_r must be in [0, B0]")
        if self.reward_floor < 0:
            raise ConfigError("reward_floor must be >= 0")
        if self.batch_size < 1 or self.capacity < 1 or self.freeze_period < 1 or self.window < 1:
            raise ConfigError("batch size, capacity, freeze period and window must be >= 1")
        if not 0 < self.drop_fraction < 1:
            raise ConfigError("drop_fraction must be in (0, 1)")


@dataclass(frozen=True)
class StaticDetectorConfig:
    """Per-channel thresholds on ``|received - nominal| / nominal``."""

    thresholds: tuple = (0.06, 0.06, 0.06)

    def __post_init__(self):
        if len(self.thresholds) != 3 or min(self.thresholds) <= 0:
            raise ConfigError("static detector needs three positive thresholds")


def static_detect(received, nominals, config: StaticDetectorConfig) -> np.ndarray:
    """Per-link flags for packets deviating from nominal by more than the threshold.

    ``received`` is ``(N, N, 3)`` indexed ``[receiver, sender, channel]``;
    the result is an ``(N, N)`` boolean array in the same layout.
    """
    r = np.asarray(received, dtype=float)
    nom = np.asarray(nominals, dtype=float)
    rel = np.abs(r - nom) / np.abs(nom)
    return np.any(rel > np.asarray(config.thresholds), axis=-1)


def make_static_detector(config: StaticDetectorConfig):
    def detector(recv, nominal):
        return static_detect(recv, nominal, config)
    return detector


def encode_state(state, n_topologies: int) -> np.ndarray:
    """Anomaly flags, burned flags and the one-hot current topology."""
    flags = np.asarray(state.flags, dtype=float)
    burned = np.asarray(state.burned, dtype=float)
    onehot = np.zeros(n_topologies)
    onehot[state.topology] = 1.0
    return np.concatenate([flags, burned, onehot])


def exploration_threshold(t, config: AgentConfig, B_start=None) -> float:
    """``B_0 exp(-lambda t)``; ``B_start`` replaces ``B_0`` after a retraining reset."""
    if t < 0:
        raise ValueError("step must be >= 0")
    B = config.B0 if B_start is None else B_start
    return B * math.exp(-config.lambda_decay * t)


def greedy_action(weights, features) -> int:
    q = nn.forward(weights, features)
    return int(np.argmax(q))  # argmax returns the lowest index on ties


def select_action(weights, features, B_t, rng) -> int:
    if not 0.0 <= B_t <= 1.0:
        raise ValueError(f"exploration threshold {B_t} outside [0, 1]")
    if rng.uniform() < B_t:
        return int(rng.integers(0, weights.n_out))
    return greedy_action(weights, features)


def td_targets(target_weights, batch, gamma) -> np.ndarray:
    nxt = np.stack([e.next_state for e in batch])
    q_next = nn.forward(target_weights, nxt).max(axis=1)
    r = np.array([e.reward for e in batch])
    term = np.array([e.terminal for e in batch])
    return np.where(term, r, r + gamma * q_next)


def bellman_residual(weights, batch, gamma) -> float:
    """Mean squared TD error of ``weights`` against its own bootstrapped targets."""
    s = np.stack([e.state for e in batch])
    a = np.array([e.action for e in batch])
    q = nn.forward(weights, s)[np.arange(len(batch)), a]
    return nn.mse_loss(q, td_targets(weights, batch, gamma))


def train_step(weights, target_weights, batch, gamma, opt):
    """One Adam step on the TD loss. Returns ``(new_weights, loss)``."""
    if not batch:
        raise ValueError("empty minibatch")
    s = np.stack([e.state for e in batch])
    a = np.array([e.action for e in batch])
    y = td_targets(target_weights, batch, gamma)
    q = nn.forward(weights, s)
    rows = np.arange(len(batch))
    q_sa = q[rows, a]
    loss = nn.mse_loss(q_sa, y)
    if not math.isfinite(loss):
        raise nn.NonFiniteError(f"non-finite TD loss at optimizer step {opt.step}")
    g = np.zeros_like(q)
    g[rows, a] = nn.mse_grad(q_sa, y)
    grads = nn.backward(weights, s, g)
    return nn.adam_step(weights, grads, opt), loss


def sync_target(weights, target_weights, step, freeze_period):
    if step % freeze_period == 0:
        return nn.clone(weights)
    return target_weights


def maybe_retrain(recent_rewards, config: AgentConfig) -> bool:
    """True when the latest reward drops well below the trailing mean.

    ``recent_rewards`` ends with the current reward; the window before it
    must be full. Defender rewards are mostly negative, so the drop is
    measured against the magnitude of the trailing mean, and it must also
    exceed ``reward_floor`` in absolute terms so that noise on near-zero
    rewards does not count.
    """
    r = list(recent_rewards)
    if len(r) < config.window + 1:
        return False
    current = r[-1]
    trailing = np.asarray(r[-config.window - 1:-1], dtype=float)
    mean = float(trailing.mean())
    return current < mean - max(config.drop_fraction * abs(mean), config.reward_floor)


class StaticDefender:
    """Keeps the initial topology; protection comes only from the link detector."""

    name = "static"

    def __init__(self, topology: int = 0):
        self.topology = topology

    def act(self, state) -> int:
        return self.topology

    def observe(self, state, action, reward, next_state, terminal=False):
        return None


class DqnDefender:
    """Epsilon-greedy DQN choosing a communication topology each epoch."""

    name = "dqn"

    def __init__(self, n_topologies: int, n_dg: int, config: AgentConfig = AgentConfig(),
                 seed=0, weights=None, train=True):
        self.config = config
        self.n_topologies = n_topologies
        self.n_in = 2 * n_dg + n_topologies
        self.rng = np.random.default_rng(seed)
        sizes = (self.n_in, *config.hidden, n_topologies)
        self.weights = weights if weights is not None else nn.init_mlp(sizes, self.rng)
        if self.weights.sizes != sizes:
            raise ConfigError(f"checkpoint architecture {self.weights.sizes} != expected {sizes}")
        self.target = nn.clone(self.weights)
        self.opt = nn.OptimizerState.for_weights(self.weights, lr=config.lr)
        self.memory = ReplayMemory(config.capacity, seed=int(self.rng.integers(2**63)))
        self.train = train
        self.t = 0
        self.t_reset = 0
        self.B_start = config.B0
        self.train_steps = 0
        self.rewards: deque = deque(maxlen=config.window + 1)
        self.losses: list = []
        self.retrains: int = 0

    @property
    def B_t(self) -> float:
        return exploration_threshold(self.t - self.t_reset, self.config, self.B_start)

    def features(self, state) -> np.ndarray:
        return encode_state(state, self.n_topologies)

    def act(self, state) -> int:
        return select_action(self.weights, self.features(state), self.B_t, self.rng)

    def observe(self, state, action, reward, next_state, terminal=False):
        """Store the transition and do one training step; returns the loss or None."""
        self.t += 1
        self.rewards.append(reward)
        if maybe_retrain(self.rewards, self.config):
            self.t_reset = self.t
            self.B_start = self.config.B_r
            self.retrains += 1
        if not self.train:
            return None
        self.memory.push(Experience(self.features(state), int(action), float(reward),
                                    self.features(next_state), bool(terminal)))
        return self.learn()

    def learn(self):
        if len(self.memory) < self.config.batch_size:
            return None
        batch = self.memory.sample(self.config.batch_size)
        self.target = sync_target(self.weights, self.target, self.train_steps,
                                  self.config.freeze_period)
        self.weights, loss = train_step(self.weights, self.target, batch, self.config.gamma,
                                        self.opt)
        self.train_steps += 1
        self.losses.append(loss)
        return loss

    def save(self, path, extra=None):
        meta = {"t": self.t, "train_steps": self.train_steps, "n_topologies": self.n_topologies}
        meta.update(extra or {})
        nn.save_checkpoint(path, self.weights, meta)

    @classmethod
    def from_checkpoint(cls, path, n_topologies, n_dg, config=AgentConfig(), seed=0, train=True):
        weights, meta = nn.load_checkpoint(path)
        agent = cls(n_topologies, n_dg, config, seed=seed, weights=weights, train=train)
        agent.t = int(meta.get("t", 0))
        return agent


# -- reduced abstraction used to cross-check the learner --------------------

@dataclass
class SurrogateGame:
    """Deterministic reduced game: ``Theta`` fixed per episode, state ``(Theta, topology)``.

    Reward for choosing tree ``a`` is minus the number of compromised
    directed links it keeps active, minus ``switch_cost`` when ``a`` differs
    from the current tree.
    """

    topologies: list
    switch_cost: float = 1.0
    gamma: float = 0.95
    states: list = field(init=False)

    def __post_init__(self):
        n = self.topologies[0].n
        self.n = n
        thetas = [tuple((i >> b) & 1 for b in range(n)) for i in range(2 ** n)]
        self.states = [(th, a) for th in thetas for a in range(len(self.topologies))]

    @property
    def n_actions(self):
        return len(self.topologies)

    def reward(self, state, action) -> float:
        theta, cur = state
        S = self.topologies[action].S
        exposed = float(sum(S[k].sum() for k in range(self.n) if theta[k]))
        return -exposed - (self.switch_cost if action != cur else 0.0)

    def next_state(self, state, action):
        return (state[0], action)

    def encode(self, state) -> np.ndarray:
        theta, cur = state
        onehot = np.zeros(self.n_actions)
        onehot[cur] = 1.0
        return np.concatenate([np.asarray(theta, dtype=float), np.zeros(self.n), onehot])


def value_iteration(game: SurrogateGame, tol=1e-12, max_iter=10_000):
    """Optimal ``Q*`` as ``{state: array over actions}``."""
    V = {s: 0.0 for s in game.states}
    for _ in range(max_iter):
        Q = {s: np.array([game.reward(s, a) + game.gamma * V[game.next_state(s, a)]
                          for a in range(game.n_actions)]) for s in game.states}
        newV = {s: float(Q[s].max()) for s in game.states}
        delta = max(abs(newV[s] - V[s]) for s in game.states)
        V = newV
        if delta < tol:
            break
    return Q


def train_on_surrogate(game: SurrogateGame, episodes=200, horizon=10, seed=0,
                       config: AgentConfig | None = None, updates_per_step=4):
    """Train a DQN defender on the surrogate game; returns the agent."""
    config = config or AgentConfig(gamma=game.gamma, lambda_decay=0.003, batch_size=32,
                                   freeze_period=50, lr=3e-3)
    agent = DqnDefender(game.n_actions, game.n, config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for _ in range(episodes):
        s = game.states[int(rng.integers(len(game.states)))]
        for h in range(horizon):
            x = game.encode(s)
            a = select_action(agent.weights, x, agent.B_t, agent.rng)
            r = game.reward(s, a)
            s2 = game.next_state(s, a)
            agent.t += 1
            agent.memory.push(Experience(x, a, r, game.encode(s2), False))
            for _ in range(updates_per_step):
                agent.learn()
            s = s2
    return agent


def oracle_agreement(game: SurrogateGame, agent, Q=None, tol=1e-9) -> float:
    """Fraction of states where the agent's greedy action is optimal."""
    Q = Q or value_iteration(game)
    hits = 0
    for s in game.states:
        a = greedy_action(agent.weights, game.encode(s))
        hits += Q[s][a] >= Q[s].max() - tol
    return hits / len(game.states)
