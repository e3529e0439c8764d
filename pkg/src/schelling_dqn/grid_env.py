"""Grid world for the two-population Schelling model with learning agents.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row; row 0 is
the top of the grid, so ``Up`` decrements ``y``. Observation windows are read
row-major from the top-left corner of the neighbourhood.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, NamedTuple, Optional

import numpy as np

MAX_AGE = 80
ALPHA_LEVELS = (0.0, 0.5, 1.0)
EMPTY = -1


class Kind(IntEnum):
    """Agent type. The value doubles as the cell code in ``Grid.kinds``."""

    A = 1
    B = -1

    @property
    def other(self) -> "Kind":
        return Kind(-self.value)


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    STAY = 4


N_ACTIONS = len(Action)
_ACTIONS = tuple(Action)

# (dx, dy) per action, y grows downward
_DELTAS = {
    Action.UP: (0, -1),
    Action.DOWN: (0, 1),
    Action.LEFT: (-1, 0),
    Action.RIGHT: (1, 0),
    Action.STAY: (0, 0),
}


class Outcome(Enum):
    STAYED = "stayed"
    MOVED = "moved"
    BLOCKED = "blocked"
    KILLED = "killed"


class MoveOutcome(NamedTuple):
    status: Outcome
    victim: Optional[int] = None

    @classmethod
    def make(cls, status: Outcome, victim: Optional[int] = None) -> "MoveOutcome":
        if (status is Outcome.KILLED) != (victim is not None):
            raise ValueError("victim id is set exactly when the outcome is KILLED")
        return cls(status, victim)


_STAYED = MoveOutcome(Outcome.STAYED)
_MOVED = MoveOutcome(Outcome.MOVED)
_BLOCKED = MoveOutcome(Outcome.BLOCKED)


@dataclass
class Agent:
    id: int
    kind: Kind
    pos: tuple[int, int]
    age: int = 0
    alpha: float = 1.0


@dataclass(frozen=True)
class ToleranceMode:
    """``fixed(alpha)`` gives every agent the same tolerance; ``uniform_random``
    draws each agent's tolerance from ``ALPHA_LEVELS``."""

    name: str = "fixed"
    alpha: float = 1.0

    def __post_init__(self):
        if self.name not in ("fixed", "uniform_random"):
            raise ValueError(f"unknown tolerance mode {self.name!r}")
        if self.name == "fixed" and self.alpha not in ALPHA_LEVELS:
            raise ValueError(f"alpha must be one of {ALPHA_LEVELS}, got {self.alpha}")

    @classmethod
    def parse(cls, text: str) -> "ToleranceMode":
        text = text.strip()
        if text == "uniform_random":
            return cls("uniform_random", 0.0)
        if text.startswith("fixed(") and text.endswith(")"):
            return cls("fixed", float(text[6:-1]))
        raise ValueError(f"tolerance_mode must be 'fixed(<alpha>)' or 'uniform_random', got {text!r}")

    def __str__(self) -> str:
        return "uniform_random" if self.name == "uniform_random" else f"fixed({self.alpha!r})"

    def draw(self, rng: np.random.Generator) -> float:
        if self.name == "fixed":
            return self.alpha
        return ALPHA_LEVELS[int(rng.integers(len(ALPHA_LEVELS)))]


@dataclass(frozen=True)
class EnvConfig:
    width: int = 50
    height: int = 50
    occupancy: float = 0.5
    window: int = 5
    tolerance: ToleranceMode = field(default_factory=ToleranceMode)
    torus: bool = True


@dataclass(frozen=True)
class RewardParams:
    move_cost: float = 0.3
    stay_penalty: float = 1.0
    survival_bonus: float = 0.1
    death_penalty: float = 1.0
    victim_penalty: float = 1.0
    cost_on_stay: bool = False

    def __post_init__(self):
        for name in ("move_cost", "stay_penalty", "survival_bonus", "death_penalty", "victim_penalty"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")
            object.__setattr__(self, name, value)


class NeighborCounts(NamedTuple):
    a_same: int
    b_other: int


class RewardBreakdown(NamedTuple):
    tolerance: float
    interdependence: float
    survival: float
    moving: float
    total: float

    @classmethod
    def of(cls, tolerance, interdependence, survival, moving) -> "RewardBreakdown":
        # fsum: total is the correctly rounded sum, independent of term order
        total = math.fsum((tolerance, interdependence, survival, moving))
        return cls(tolerance, interdependence, survival, moving, total)


@dataclass(eq=False, slots=True)
class Observation:
    window: np.ndarray  # (n, n) int8, values in {-1, 0, 1}
    age_norm: float

    @property
    def n(self) -> int:
        return self.window.shape[0]

    def vector(self) -> np.ndarray:
        """Network input: flattened window followed by normalized age."""
        out = np.empty(self.window.size + 1)
        out[:-1] = self.window.ravel()
        out[-1] = self.age_norm
        return out

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        return self.age_norm == other.age_norm and np.array_equal(self.window, other.window)


class Grid:
    """Authoritative world state: cell occupancy plus the agent table.

    ``cells[y, x]`` holds an agent id or ``EMPTY``; ``kinds[y, x]`` mirrors it
    with the occupant's ``Kind`` value (0 for empty) for fast window reads.
    """

    def __init__(self, width: int = 50, height: int = 50, torus: bool = True):
        if width < 1 or height < 1:
            raise ValueError("grid dimensions must be positive")
        self.width = width
        self.height = height
        self.torus = torus
        self.cells = np.full((height, width), EMPTY, dtype=np.int64)
        self.kinds = np.zeros((height, width), dtype=np.int8)
        self.agents: dict[int, Agent] = {}
        self.next_id = 0

    def add_agent(self, kind: Kind, pos: tuple[int, int], age: int = 0, alpha: float = 1.0) -> Agent:
        x, y = pos
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise ValueError(f"position {pos} outside {self.width}x{self.height} grid")
        if self.cells[y, x] != EMPTY:
            raise ValueError(f"cell {pos} already occupied")
        if not 0 <= age <= MAX_AGE:
            raise ValueError(f"age {age} outside [0, {MAX_AGE}]")
        if alpha not in ALPHA_LEVELS:
            raise ValueError(f"alpha must be one of {ALPHA_LEVELS}")
        agent = Agent(self.next_id, Kind(kind), (x, y), age, alpha)
        self.next_id += 1
        self.agents[agent.id] = agent
        self.cells[y, x] = agent.id
        self.kinds[y, x] = agent.kind
        return agent

    def remove_agent(self, agent_id: int) -> Agent:
        agent = self.agents.pop(agent_id)
        x, y = agent.pos
        self.cells[y, x] = EMPTY
        self.kinds[y, x] = 0
        return agent

    def _relocate(self, agent: Agent, pos: tuple[int, int]) -> None:
        x, y = agent.pos
        self.cells[y, x] = EMPTY
        self.kinds[y, x] = 0
        nx, ny = pos
        self.cells[ny, nx] = agent.id
        self.kinds[ny, nx] = agent.kind
        agent.pos = pos

    def empty_cells(self) -> np.ndarray:
        """Flat indices (``y * width + x``) of empty cells, ascending."""
        return np.flatnonzero(self.cells.ravel() == EMPTY)

    def population(self) -> dict[Kind, int]:
        counts = {Kind.A: 0, Kind.B: 0}
        for agent in self.agents.values():
            counts[agent.kind] += 1
        return counts

    def target(self, pos: tuple[int, int], action: Action) -> Optional[tuple[int, int]]:
        """Cell reached by ``action`` from ``pos``; None when it leaves a bounded grid."""
        dx, dy = _DELTAS[Action(action)]
        x, y = pos[0] + dx, pos[1] + dy
        if self.torus:
            return x % self.width, y % self.height
        if 0 <= x < self.width and 0 <= y < self.height:
            return x, y
        return None

    def check_invariants(self) -> None:
        """Raise AssertionError if the cell table and agent table disagree."""
        occupied = self.cells != EMPTY
        assert int(occupied.sum()) == len(self.agents), "occupied cells != agent count"
        assert np.array_equal(self.kinds == 0, ~occupied), "kind layer out of sync"
        if not self.agents:
            return
        ids = np.fromiter(self.agents.keys(), dtype=np.int64, count=len(self.agents))
        table = np.array([(a.id, a.pos[0], a.pos[1], a.kind, a.age) for a in self.agents.values()], dtype=np.int64)
        assert np.array_equal(table[:, 0], ids), "agent id does not match its key"
        xs, ys = table[:, 1], table[:, 2]
        assert ((xs >= 0) & (xs < self.width) & (ys >= 0) & (ys < self.height)).all(), "agent out of bounds"
        assert np.array_equal(self.cells[ys, xs], ids), "position/agent bijection broken"
        assert np.array_equal(self.kinds[ys, xs], table[:, 3]), "kind layer disagrees with agent"
        assert ((table[:, 4] >= 0) & (table[:, 4] <= MAX_AGE)).all(), "age out of range"
        assert all(a.alpha in ALPHA_LEVELS for a in self.agents.values()), "alpha not an allowed level"

    def copy(self) -> "Grid":
        other = Grid(self.width, self.height, self.torus)
        other.cells = self.cells.copy()
        other.kinds = self.kinds.copy()
        other.agents = {i: Agent(a.id, a.kind, a.pos, a.age, a.alpha) for i, a in self.agents.items()}
        other.next_id = self.next_id
        return other


def init_grid(config: EnvConfig, rng: np.random.Generator) -> Grid:
    """Place ``floor(occupancy * W * H / 2)`` agents of each type at random cells."""
    if not 0.0 < config.occupancy < 1.0:
        raise ValueError(f"occupancy must lie in (0, 1), got {config.occupancy}")
    n_cells = config.width * config.height
    per_type = int(config.occupancy * n_cells / 2)
    if per_type < 1:
        raise ValueError("occupancy too low: no agents would be placed")
    if 2 * per_type > n_cells:
        raise ValueError("agent count exceeds cell count")
    grid = Grid(config.width, config.height, config.torus)
    cells = rng.permutation(n_cells)[: 2 * per_type]
    ages = rng.integers(0, MAX_AGE, size=2 * per_type)
    for i, flat in enumerate(cells):
        kind = Kind.A if i < per_type else Kind.B
        y, x = divmod(int(flat), config.width)
        grid.add_agent(kind, (x, y), int(ages[i]), config.tolerance.draw(rng))
    return grid


_OFFSETS: dict[int, np.ndarray] = {}
_TORUS_INDEX: dict[tuple[int, int, int], np.ndarray] = {}


def _torus_index(width: int, height: int, n: int) -> np.ndarray:
    """Row ``y * width + x`` lists the flat cell indices of the window at (x, y)."""
    key = (width, height, n)
    table = _TORUS_INDEX.get(key)
    if table is None:
        off = np.arange(-(n // 2), n // 2 + 1)
        ys, xs = np.divmod(np.arange(width * height), width)
        rows = (ys[:, None, None] + off[None, :, None]) % height
        cols = (xs[:, None, None] + off[None, None, :]) % width
        table = _TORUS_INDEX[key] = (rows * width + cols).reshape(width * height, n * n)
    return table


def _window(grid: Grid, pos: tuple[int, int], n: int) -> np.ndarray:
    r = n // 2
    x, y = pos
    if r <= x < grid.width - r and r <= y < grid.height - r:
        return grid.kinds[y - r: y + r + 1, x - r: x + r + 1]
    if grid.torus:
        index = _torus_index(grid.width, grid.height, n)[y * grid.width + x]
        return grid.kinds.ravel().take(index).reshape(n, n)
    offs = _OFFSETS.get(n)
    if offs is None:
        offs = _OFFSETS[n] = np.arange(-r, r + 1)
    rows, cols = offs + y, offs + x
    win = grid.kinds.take(rows, axis=0, mode="clip").take(cols, axis=1, mode="clip")
    win[(rows < 0) | (rows >= grid.height), :] = 0
    win[:, (cols < 0) | (cols >= grid.width)] = 0
    return win


def observe(grid: Grid, agent_id: int, n: int) -> Observation:
    if n < 3 or n % 2 == 0:
        raise ValueError(f"window size must be odd and >= 3, got {n}")
    try:
        agent = grid.agents[agent_id]
    except KeyError:
        raise KeyError(f"unknown agent id {agent_id}") from None
    raw = _window(grid, agent.pos, n)
    # flip signs for type B so that same type reads +1; always a fresh array
    window = raw.copy() if agent.kind is Kind.A else -raw
    return Observation(window, agent.age / MAX_AGE)


def neighbor_counts(obs: Observation) -> NeighborCounts:
    return _counts(obs.window.astype(np.int8, copy=False), 1)


def _counts(window: np.ndarray, sign: int) -> NeighborCounts:
    """Counts from an int8 kind window seen by an observer of type ``sign`` (self excluded)."""
    cells = window.tobytes()
    plus, minus = cells.count(b"\x01"), cells.count(b"\xff")
    if sign < 0:
        plus, minus = minus, plus
    return NeighborCounts(plus - 1, minus)


def resolve_action(grid: Grid, agent_id: int, action: Action) -> MoveOutcome:
    return _resolve(grid, grid.agents[agent_id], action)


def _resolve(grid: Grid, agent: Agent, action: Action) -> MoveOutcome:
    if action is Action.STAY:
        return _STAYED
    dx, dy = _DELTAS[action]
    x, y = agent.pos[0] + dx, agent.pos[1] + dy
    if grid.torus:
        x, y = x % grid.width, y % grid.height
    elif not (0 <= x < grid.width and 0 <= y < grid.height):
        return _BLOCKED
    occupant = grid.cells.item(y, x)
    if occupant == EMPTY:
        grid._relocate(agent, (x, y))
        return _MOVED
    if grid.agents[occupant].kind == agent.kind:
        return _BLOCKED
    grid.remove_agent(occupant)
    grid._relocate(agent, (x, y))
    return MoveOutcome(Outcome.KILLED, occupant)


def compute_reward(
    outcome: MoveOutcome,
    counts: NeighborCounts,
    agent: Agent,
    params: RewardParams,
    died_this_step: bool,
) -> RewardBreakdown:
    """Reward for one agent turn.

    Every movement attempt pays the moving expense, blocked ones included;
    staying pays the stay penalty (and the moving expense only when
    ``cost_on_stay`` is set).
    """
    tolerance = counts.a_same - agent.alpha * counts.b_other + 0.0
    stayed = outcome.status is Outcome.STAYED
    interdependence = -params.stay_penalty if stayed else 0.0
    moving = -params.move_cost if (not stayed or params.cost_on_stay) else 0.0
    survival = -params.death_penalty if died_this_step else params.survival_bonus
    total = math.fsum((tolerance, interdependence, survival, moving))
    return RewardBreakdown(tolerance, interdependence, survival, moving, total)


def victim_reward(params: RewardParams) -> RewardBreakdown:
    """Reward event charged to an agent that was killed by a mover."""
    return RewardBreakdown.of(0.0, -params.victim_penalty, -params.death_penalty, 0.0)


# --- iteration ---------------------------------------------------------------

Policy = Callable[[Agent, Observation], Action]


class StepRecord(NamedTuple):
    agent_id: int
    kind: Kind
    observation: Observation
    action: Action
    outcome: MoveOutcome
    reward: RewardBreakdown
    terminal: bool


@dataclass(frozen=True)
class VictimRecord:
    agent_id: int
    kind: Kind
    killer_id: int
    reward: RewardBreakdown
    terminal: bool = True


@dataclass
class IterationReport:
    """Every event of one iteration in the order it happened."""

    events: list = field(default_factory=list)
    kills: int = 0
    deaths: int = 0  # age-outs
    respawned: list = field(default_factory=list)

    @property
    def steps(self) -> list[StepRecord]:
        return [e for e in self.events if isinstance(e, StepRecord)]

    @property
    def victims(self) -> list[VictimRecord]:
        return [e for e in self.events if isinstance(e, VictimRecord)]


def step_iteration(
    grid: Grid,
    policy_a: Policy,
    policy_b: Policy,
    params: RewardParams,
    rng: np.random.Generator,
    n: int = 5,
    tolerance: ToleranceMode = ToleranceMode(),
) -> IterationReport:
    """Advance the world by one iteration.

    Living agents act once each in a uniformly shuffled order. Agents killed
    earlier in the iteration lose their turn. Dead agents (killed or aged out)
    are replaced at the end of the iteration by newborns of the same type at
    uniformly random empty cells, so per-type populations are conserved.
    """
    if n < 3 or n % 2 == 0:
        raise ValueError(f"window size must be odd and >= 3, got {n}")
    report = IterationReport()
    if not grid.agents:
        return report
    agents = grid.agents
    order = rng.permutation(np.fromiter(agents.keys(), dtype=np.int64, count=len(agents)))
    events = report.events
    kind_a, killed = Kind.A, Outcome.KILLED
    dead: list[Kind] = []
    for agent_id in order.tolist():
        agent = agents.get(agent_id)
        if agent is None:
            continue
        kind = agent.kind
        raw = _window(grid, agent.pos, n)
        if kind is kind_a:
            obs = Observation(raw.copy(), agent.age / MAX_AGE)
            action = _ACTIONS[policy_a(agent, obs)]
        else:
            obs = Observation(-raw, agent.age / MAX_AGE)
            action = _ACTIONS[policy_b(agent, obs)]
        outcome = _resolve(grid, agent, action)
        if outcome.status is killed:
            # the victim was removed from the grid by _resolve
            victim_kind = kind.other
            report.kills += 1
            events.append(VictimRecord(outcome.victim, victim_kind, agent_id, victim_reward(params)))
            dead.append(victim_kind)
        agent.age += 1
        died = agent.age >= MAX_AGE
        # the window only changes when this agent changed cells
        after = raw if outcome is _STAYED or outcome is _BLOCKED else _window(grid, agent.pos, n)
        counts = _counts(after, 1 if kind is kind_a else -1)
        reward = compute_reward(outcome, counts, agent, params, died)
        events.append(StepRecord(agent_id, kind, obs, action, outcome, reward, died))
        if died:
            grid.remove_agent(agent_id)
            report.deaths += 1
            dead.append(kind)
    for kind in dead:
        empties = grid.empty_cells()
        y, x = divmod(int(empties[rng.integers(len(empties))]), grid.width)
        newborn = grid.add_agent(kind, (x, y), 0, tolerance.draw(rng))
        report.respawned.append(newborn.id)
    return report


# --- snapshots ---------------------------------------------------------------

SYMBOLS = {0: ".", int(Kind.A): "A", int(Kind.B): "B"}


def snapshot_text(grid: Grid) -> str:
    """One line per grid row (top row first), one symbol per cell, LF endings."""
    lines = ("".join(SYMBOLS[int(v)] for v in row) for row in grid.kinds)
    return "".join(line + "\n" for line in lines)


def parse_snapshot(text: str) -> np.ndarray:
    """Inverse of ``snapshot_text``: an (H, W) int8 array of Kind codes."""
    codes = {".": 0, "A": int(Kind.A), "B": int(Kind.B)}
    rows = text.split("\n")
    if rows and rows[-1] == "":
        rows.pop()
    if not rows or not rows[0]:
        raise ValueError("empty snapshot")
    width = len(rows[0])
    out = np.zeros((len(rows), width), dtype=np.int8)
    for y, row in enumerate(rows):
        if len(row) != width:
            raise ValueError(f"snapshot line {y + 1} has {len(row)} cells, expected {width}")
        try:
            out[y] = [codes[ch] for ch in row]
        except KeyError as exc:
            raise ValueError(f"bad snapshot symbol {exc.args[0]!r} on line {y + 1}") from None
    return out


def snapshot_csv(grid: Grid) -> str:
    """``x,y,type,alpha,age`` rows for every agent, ordered by row then column."""
    out = ["x,y,type,alpha,age\n"]
    for agent in sorted(grid.agents.values(), key=lambda a: (a.pos[1], a.pos[0])):
        x, y = agent.pos
        out.append(f"{x},{y},{agent.kind.name},{agent.alpha!r},{agent.age}\n")
    return "".join(out)
