"""Deep Q-learning written directly on numpy.

One ``DQNLearner`` exists per agent type. Everything runs in float64 so that
finite-difference gradient checks and bit-for-bit reruns are meaningful.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

N_ACTIONS = 5


class QNetwork:
    """Fully connected network: ReLU hidden layers, linear output.

    ``weights[i]`` has shape ``(sizes[i], sizes[i+1])`` and maps a row vector
    ``h`` to ``h @ W + b``.
    """

    def __init__(self, sizes: Sequence[int], rng: Optional[np.random.Generator] = None, zero: bool = False):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"invalid layer sizes {sizes}")
        if sizes[-1] != N_ACTIONS:
            raise ValueError(f"output layer must have {N_ACTIONS} units, got {sizes[-1]}")
        self.sizes = sizes
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        if rng is None and not zero:
            raise ValueError("a random generator is required unless zero=True")
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            if zero:
                w = np.zeros((fan_in, fan_out))
            else:
                limit = math.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def params(self) -> list[np.ndarray]:
        """Parameter arrays in checkpoint order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "QNetwork":
        other = QNetwork(self.sizes, zero=True)
        other.copy_from(self)
        return other

    def copy_from(self, other: "QNetwork") -> None:
        if other.sizes != self.sizes:
            raise ValueError("layer sizes differ")
        for dst, src in zip(self.params, other.params):
            dst[...] = src

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Q-values for one state ``(d,)`` or a batch ``(k, d)``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"state has {x.shape[-1]} entries, network expects {self.sizes[0]}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h


def forward(net: QNetwork, state: np.ndarray) -> np.ndarray:
    return net.forward(state)


def loss_and_grads(net: QNetwork, states: np.ndarray, actions: np.ndarray, targets: np.ndarray):
    """Mean squared error of ``Q(s, a)`` against fixed targets, with its gradient.

    Returns ``(loss, grads)`` where ``grads`` follows ``net.params`` order.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    k = states.shape[0]
    # forward, keeping every layer input and pre-activation
    inputs, pre = [], []
    h = states
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
    rows = np.arange(k)
    diff = h[rows, actions] - targets
    loss = float(np.mean(diff * diff))

    dz = np.zeros_like(h)
    dz[rows, actions] = 2.0 * diff / k
    grads_w, grads_b = [], []
    for i in range(last, -1, -1):
        grads_w.append(inputs[i].T @ dz)
        grads_b.append(dz.sum(axis=0))
        if i > 0:
            dz = (dz @ net.weights[i].T) * (pre[i - 1] > 0.0)
    grads = []
    for gw, gb in zip(reversed(grads_w), reversed(grads_b)):
        grads.extend((gw, gb))
    return loss, grads


# --- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kwargs) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kwargs)

    def clone(self) -> "AdamState":
        return AdamState([m.copy() for m in self.m], [v.copy() for v in self.v],
                         self.t, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params: list, grads: list, state: AdamState) -> list:
    """Bias-corrected Adam update applied in place; returns ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state have different lengths")
    for p, g, m in zip(params, grads, state.m):
        if np.shape(p) != np.shape(g) or np.shape(p) != np.shape(m):
            raise ValueError(f"shape mismatch: param {np.shape(p)}, grad {np.shape(g)}, moment {np.shape(m)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# --- replay ------------------------------------------------------------------


@dataclass(eq=False)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: Optional[np.ndarray]
    terminal: bool

    def __post_init__(self):
        if self.terminal != (self.next_state is None):
            raise ValueError("terminal transitions carry no next_state, others must")


@dataclass(eq=False)
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray  # rows of terminal transitions are zero
    terminals: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition]) -> "Batch":
        if not transitions:
            raise ValueError("empty batch")
        d = len(transitions[0].state)
        nxt = np.zeros((len(transitions), d))
        for i, t in enumerate(transitions):
            if not t.terminal:
                nxt[i] = t.next_state
        return cls(
            np.array([t.state for t in transitions], dtype=np.float64),
            np.array([t.action for t in transitions], dtype=np.int64),
            np.array([t.reward for t in transitions], dtype=np.float64),
            nxt,
            np.array([t.terminal for t in transitions], dtype=bool),
        )


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions with uniform sampling.

    Storage grows geometrically up to ``capacity`` so a nominal 10^6 buffer
    only costs memory for what has actually been pushed.
    """

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.state_dim = int(state_dim)
        self._alloc = 0
        self._states = np.empty((0, state_dim))
        self._next = np.empty((0, state_dim))
        self._actions = np.empty(0, dtype=np.int64)
        self._rewards = np.empty(0)
        self._terminals = np.empty(0, dtype=bool)
        self.size = 0
        self.cursor = 0  # next write slot

    def __len__(self) -> int:
        return self.size

    def _grow(self) -> None:
        new = min(self.capacity, max(1024, 2 * self._alloc))

        def grown(a, shape):
            out = np.zeros(shape, dtype=a.dtype)
            out[: len(a)] = a
            return out

        self._states = grown(self._states, (new, self.state_dim))
        self._next = grown(self._next, (new, self.state_dim))
        self._actions = grown(self._actions, new)
        self._rewards = grown(self._rewards, new)
        self._terminals = grown(self._terminals, new)
        self._alloc = new

    def push(self, t: Transition) -> None:
        if len(t.state) != self.state_dim:
            raise ValueError(f"state has {len(t.state)} entries, buffer holds {self.state_dim}")
        if self.size < self.capacity and self.cursor >= self._alloc:
            self._grow()
        i = self.cursor
        self._states[i] = t.state
        self._actions[i] = t.action
        self._rewards[i] = t.reward
        self._terminals[i] = t.terminal
        if t.terminal:
            self._next[i] = 0.0
        else:
            self._next[i] = t.next_state
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _indices(self, k: int, rng: np.random.Generator) -> np.ndarray:
        if k > self.size:
            raise ValueError(f"cannot sample {k} transitions from a buffer holding {self.size}")
        return rng.integers(0, self.size, size=k)

    def _transition(self, i: int) -> Transition:
        term = bool(self._terminals[i])
        return Transition(self._states[i].copy(), int(self._actions[i]), float(self._rewards[i]),
                          None if term else self._next[i].copy(), term)

    def sample(self, k: int, rng: np.random.Generator) -> list[Transition]:
        return [self._transition(int(i)) for i in self._indices(k, rng)]

    def sample_batch(self, k: int, rng: np.random.Generator) -> Batch:
        """Same draw as ``sample`` but returned as stacked arrays."""
        idx = self._indices(k, rng)
        return Batch(self._states[idx], self._actions[idx], self._rewards[idx],
                     self._next[idx], self._terminals[idx])

    def transitions(self) -> list[Transition]:
        """Current contents, oldest first."""
        start = self.cursor if self.size == self.capacity else 0
        return [self._transition((start + j) % self.capacity) for j in range(self.size)]


def push_transition(buffer: ReplayBuffer, t: Transition) -> None:
    buffer.push(t)


def sample(buffer: ReplayBuffer, k: int, rng: np.random.Generator) -> list[Transition]:
    return buffer.sample(k, rng)


# --- exploration ---------------------------------------------------------------


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 0.9
    end: float = 0.0
    decay_steps: int = 100_000

    def value(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be non-negative")
        if step >= self.decay_steps:
            return self.end
        eps = self.start + (self.end - self.start) * (step / self.decay_steps)
        lo, hi = min(self.start, self.end), max(self.start, self.end)
        return min(max(eps, lo), hi)


def epsilon(schedule: EpsilonSchedule, step: int) -> float:
    return schedule.value(step)


def greedy(q_values: np.ndarray) -> int:
    """Argmax with ties resolved toward the lowest action index."""
    q = np.asarray(q_values, dtype=np.float64)
    if np.isnan(q).any():
        raise ValueError("NaN in Q-values")
    return int(np.argmax(q))


def select_action(q_values: np.ndarray, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy choice. Always consumes one uniform draw, plus one more when exploring."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    if np.isnan(np.asarray(q_values, dtype=np.float64)).any():
        raise ValueError("NaN in Q-values")
    if rng.random() < eps:
        return int(rng.integers(N_ACTIONS))
    return greedy(q_values)


# --- training ----------------------------------------------------------------


def bellman_targets(batch: Union[Batch, Sequence[Transition]], target_net: QNetwork, gamma: float) -> np.ndarray:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if not isinstance(batch, Batch):
        batch = Batch.from_transitions(batch)
    best_next = target_net.forward(batch.next_states).max(axis=1)
    return np.where(batch.terminals, batch.rewards, batch.rewards + gamma * best_next)


def train_batch(net: QNetwork, target_net: QNetwork, adam: AdamState,
                batch: Union[Batch, Sequence[Transition]], gamma: float = 0.99) -> float:
    """One Adam step on the squared Bellman error; returns the pre-step loss."""
    if not isinstance(batch, Batch):
        batch = Batch.from_transitions(batch)
    targets = bellman_targets(batch, target_net, gamma)
    loss, grads = loss_and_grads(net, batch.states, batch.actions, targets)
    adam_step(net.params, grads, adam)
    return loss


def sync_target(net: QNetwork, target_net: QNetwork) -> None:
    target_net.copy_from(net)


@dataclass
class LearnerConfig:
    input_dim: int
    hidden: tuple = (64, 64)
    lr: float = 0.001
    gamma: float = 0.99
    batch_size: int = 256
    capacity: int = 1_000_000
    schedule: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    sync_interval: int = 500


class DQNLearner:
    """Network, target copy, optimizer, replay and exploration for one agent type.

    ``decisions`` counts exploratory-phase action choices and drives the
    epsilon schedule; ``train_steps`` counts optimizer updates.
    """

    def __init__(self, config: LearnerConfig, init_rng: np.random.Generator, sample_rng: np.random.Generator):
        if config.sync_interval < 1:
            raise ValueError("sync_interval must be >= 1")
        self.config = config
        self.net = QNetwork([config.input_dim, *config.hidden, N_ACTIONS], init_rng)
        self.target_net = self.net.copy()
        self.adam = AdamState.for_params(self.net.params, lr=config.lr)
        self.buffer = ReplayBuffer(config.capacity, config.input_dim)
        self.sample_rng = sample_rng
        self.decisions = 0
        self.train_steps = 0

    @property
    def epsilon(self) -> float:
        return self.config.schedule.value(self.decisions)

    def act(self, state: np.ndarray, rng: np.random.Generator, explore: bool = True) -> int:
        """Epsilon-greedy action; the network is only evaluated when exploiting.

        Draws from ``rng`` exactly as ``select_action`` does.
        """
        eps = self.epsilon if explore else 0.0
        if explore:
            self.decisions += 1
        if rng.random() < eps:
            return int(rng.integers(N_ACTIONS))
        return greedy(self.net.forward(state))

    def push(self, t: Transition) -> None:
        self.buffer.push(t)

    def maybe_train(self) -> Optional[float]:
        """One training step once the buffer holds a full batch."""
        cfg = self.config
        if len(self.buffer) < cfg.batch_size:
            return None
        batch = self.buffer.sample_batch(cfg.batch_size, self.sample_rng)
        loss = train_batch(self.net, self.target_net, self.adam, batch, cfg.gamma)
        self.train_steps += 1
        if self.train_steps % cfg.sync_interval == 0:
            sync_target(self.net, self.target_net)
        return loss


# --- checkpoints -------------------------------------------------------------

_MAGIC = "qnet-checkpoint v1"


def save_checkpoint(net: QNetwork, path, seed: int, step: int) -> None:
    """Write a one-line ASCII header then every parameter as little-endian float64.

    Header: ``qnet-checkpoint v1 sizes=26,64,64,5 seed=<int> step=<int>\\n``.
    Body: for each layer, the weight matrix (row-major, fan_in x fan_out) then
    its bias vector.
    """
    header = f"{_MAGIC} sizes={','.join(map(str, net.sizes))} seed={int(seed)} step={int(step)}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for p in net.params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[QNetwork, int, int]:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    fields = data[:nl].decode("ascii").split(" ")
    if " ".join(fields[:2]) != _MAGIC:
        raise ValueError(f"{path}: not a {_MAGIC} file")
    meta = dict(f.split("=", 1) for f in fields[2:])
    sizes = [int(s) for s in meta["sizes"].split(",")]
    net = QNetwork(sizes, zero=True)
    body = np.frombuffer(data[nl + 1:], dtype="<f8")
    if body.size != net.n_params:
        raise ValueError(f"{path}: expected {net.n_params} parameters, found {body.size}")
    offset = 0
    for p in net.params:
        p[...] = body[offset: offset + p.size].reshape(p.shape)
        offset += p.size
    return net, int(meta["seed"]), int(meta["step"])
