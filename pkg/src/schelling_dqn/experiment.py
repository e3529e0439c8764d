"""Training/evaluation runs, the tolerance x moving-cost sweep, and file output.

Random streams. A run with seed ``s`` spawns eight child streams from
``numpy.random.SeedSequence(s)`` in this order: grid initialisation, world
dynamics (turn order and respawn), network init A, network init B, action
choice A, action choice B, replay sampling A, replay sampling B.

Sweep cells reuse the replicate seed unchanged, so for a given seed every
(alpha, cost) cell starts from the same draws and differs only in the swept
parameters.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import grid_env as ge
from .grid_env import Kind
from .metrics import MetricsRecord, interface_density, same_type_fraction
from .qlearn import DQNLearner, EpsilonSchedule, LearnerConfig, QNetwork, Transition, save_checkpoint

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.0, 0.5, 1.0)
DEFAULT_COSTS = (0.3, 0.6, 0.9)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    width: int = 50
    height: int = 50
    occupancy: float = 0.5
    window: int = 5
    tolerance_mode: str = "uniform_random"
    torus: bool = True
    move_cost: float = 0.3
    stay_penalty: float = 1.0
    survival_bonus: float = 0.1
    death_penalty: float = 1.0
    victim_penalty: float = 1.0
    cost_on_stay: bool = False
    gamma: float = 0.99
    batch_size: int = 256
    lr: float = 0.001
    hidden: tuple = (64, 64)
    train_iterations: int = 3000
    eval_iterations: int = 1000
    buffer_capacity: int = 1_000_000
    eps_start: float = 0.9
    eps_end: float = 0.0
    eps_decay: int = 100_000
    target_sync: int = 500
    seed: Optional[int] = None
    snapshot_every: int = 100
    out_dir: str = ""

    def validate(self) -> "ExperimentConfig":
        if self.seed is None:
            raise ConfigError("seed is required")
        if self.width < 1 or self.height < 1:
            raise ConfigError("width and height must be positive")
        if not 0.0 < self.occupancy < 1.0:
            raise ConfigError("occupancy must lie in (0, 1)")
        if self.window < 3 or self.window % 2 == 0:
            raise ConfigError("window must be odd and >= 3")
        for name in ("move_cost", "stay_penalty", "survival_bonus", "death_penalty", "victim_penalty"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        for name in ("batch_size", "buffer_capacity", "eps_decay", "target_sync", "snapshot_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.train_iterations < 0 or self.eval_iterations < 0:
            raise ConfigError("iteration counts must be non-negative")
        if not (0.0 <= self.eps_end <= 1.0 and 0.0 <= self.eps_start <= 1.0):
            raise ConfigError("exploration rates must lie in [0, 1]")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden must list positive layer widths")
        try:
            self.tolerance
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    @property
    def tolerance(self) -> ge.ToleranceMode:
        return ge.ToleranceMode.parse(self.tolerance_mode)

    def env_config(self) -> ge.EnvConfig:
        return ge.EnvConfig(self.width, self.height, self.occupancy, self.window, self.tolerance, self.torus)

    def reward_params(self) -> ge.RewardParams:
        return ge.RewardParams(self.move_cost, self.stay_penalty, self.survival_bonus,
                               self.death_penalty, self.victim_penalty, self.cost_on_stay)

    def learner_config(self) -> LearnerConfig:
        return LearnerConfig(
            input_dim=self.window * self.window + 1,
            hidden=tuple(self.hidden),
            lr=self.lr,
            gamma=self.gamma,
            batch_size=self.batch_size,
            capacity=self.buffer_capacity,
            schedule=EpsilonSchedule(self.eps_start, self.eps_end, self.eps_decay),
            sync_interval=self.target_sync,
        )

    # -- key=value text ----------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format_value(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        return cls().with_overrides(parse_pairs(text, source))

    def with_overrides(self, pairs: dict) -> "ExperimentConfig":
        kinds = {f.name: f for f in fields(self)}
        updates = {}
        for key, raw in pairs.items():
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            updates[key] = _parse_value(key, raw, kinds[key].default)
        return dataclasses.replace(self, **updates)


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key == "seed":
            return None if raw == "" else int(raw)
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_pairs(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Defaults, then the file, then ``KEY=VALUE`` overrides."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    cfg = ExperimentConfig.from_text(text, str(path))
    extra = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        extra[key.strip()] = value
    return cfg.with_overrides(extra).validate()


# --- single run ----------------------------------------------------------------


@dataclass
class RunResult:
    config: ExperimentConfig
    metrics: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)  # iterations completed -> snapshot text
    final_grid: Optional[ge.Grid] = None
    networks: dict = field(default_factory=dict)  # Kind -> QNetwork
    train_steps: dict = field(default_factory=dict)  # Kind -> optimizer steps
    duration: float = 0.0

    @property
    def final_snapshot(self) -> str:
        return ge.snapshot_text(self.final_grid)


class _TransitionAssembler:
    """Turns iteration events into replay transitions.

    A step's transition stays pending until the same agent's next turn
    supplies the next state. Age-out steps are pushed as terminal at once; a
    kill closes the victim's pending transition as terminal with the victim
    penalty added to its reward.
    """

    def __init__(self, learners: dict):
        self.learners = learners
        self.pending: dict[int, tuple] = {}

    def consume(self, report: ge.IterationReport) -> None:
        for event in report.events:
            learner = self.learners[event.kind]
            prev = self.pending.pop(event.agent_id, None)
            if isinstance(event, ge.VictimRecord):
                if prev is not None:
                    s, a, r = prev
                    learner.push(Transition(s, a, r + event.reward.total, None, True))
                continue
            state = event.observation.vector()
            if prev is not None:
                s, a, r = prev
                learner.push(Transition(s, a, r, state, False))
            if event.terminal:
                learner.push(Transition(state, int(event.action), event.reward.total, None, True))
            else:
                self.pending[event.agent_id] = (state, int(event.action), event.reward.total)


def _mean_reward(report: ge.IterationReport, kind: Kind) -> float:
    totals = [e.reward.total for e in report.events if isinstance(e, ge.StepRecord) and e.kind is kind]
    return math.fsum(totals) / len(totals) if totals else float("nan")


def run_simulation(config: ExperimentConfig) -> RunResult:
    """Train for ``train_iterations`` then run ``eval_iterations`` greedily with learning frozen."""
    config.validate()
    started = time.perf_counter()
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(8)]
    init_rng, world_rng, init_a, init_b, act_a, act_b, sample_a, sample_b = streams

    grid = ge.init_grid(config.env_config(), init_rng)
    lcfg = config.learner_config()
    learners = {Kind.A: DQNLearner(lcfg, init_a, sample_a), Kind.B: DQNLearner(lcfg, init_b, sample_b)}
    act_rngs = {Kind.A: act_a, Kind.B: act_b}
    assembler = _TransitionAssembler(learners)
    params = config.reward_params()
    tolerance = config.tolerance
    result = RunResult(config)
    result.snapshots[0] = ge.snapshot_text(grid)

    training = True

    def policy_for(kind):
        learner, rng = learners[kind], act_rngs[kind]

        def policy(agent, obs):
            return learner.act(obs.vector(), rng, explore=training)

        return policy

    policy_a, policy_b = policy_for(Kind.A), policy_for(Kind.B)
    total = config.train_iterations + config.eval_iterations
    for it in range(total):
        training = it < config.train_iterations
        report = ge.step_iteration(grid, policy_a, policy_b, params, world_rng, config.window, tolerance)
        if training:
            assembler.consume(report)
            for learner in learners.values():
                learner.maybe_train()
        eps = 0.5 * (learners[Kind.A].epsilon + learners[Kind.B].epsilon) if training else 0.0
        result.metrics.append(MetricsRecord(
            iteration=it + 1,
            same_type_fraction=same_type_fraction(grid),
            interface_density=interface_density(grid),
            mean_reward_a=_mean_reward(report, Kind.A),
            mean_reward_b=_mean_reward(report, Kind.B),
            deaths=report.deaths,
            kills=report.kills,
            epsilon=eps,
        ))
        if (it + 1) % config.snapshot_every == 0:
            result.snapshots[it + 1] = ge.snapshot_text(grid)

    result.snapshots[total] = ge.snapshot_text(grid)
    result.final_grid = grid
    result.networks = {k: l.net for k, l in learners.items()}
    result.train_steps = {k: l.train_steps for k, l in learners.items()}
    result.duration = time.perf_counter() - started
    return result


# --- output --------------------------------------------------------------------


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def metrics_csv(records) -> str:
    return _csv_text(MetricsRecord.FIELDS, (r.row() for r in records))


def write_outputs(result: RunResult, out_dir) -> Path:
    """Write metrics.csv, snapshots, checkpoints, config.echo and run.log under ``out_dir``.

    run.log holds the only wall-clock data; everything else is a pure function
    of the configuration.
    """
    out = Path(out_dir)
    try:
        (out / "snapshots").mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(metrics_csv(result.metrics))
        for it, text in sorted(result.snapshots.items()):
            (out / "snapshots" / f"snapshot_{it:06d}.txt").write_text(text)
        (out / "final_grid.csv").write_text(ge.snapshot_csv(result.final_grid))
        seed = result.config.seed
        for kind, net in result.networks.items():
            save_checkpoint(net, out / f"network_{kind.name}.ckpt", seed, result.train_steps.get(kind, 0))
        (out / "config.echo").write_text(result.config.to_text())
        (out / "run.log").write_text(
            f"finished {time.strftime('%Y-%m-%dT%H:%M:%S')} duration_seconds={result.duration:.3f}\n"
        )
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write outputs: {exc.strerror}", exc.filename) from exc
    return out


# --- sweep ---------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    cost: float
    seed: int
    final_same_type_fraction: float
    final_interface_density: float


@dataclass
class SweepSummary:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (alpha, cost, seed, message)


def cell_name(alpha: float, cost: float, seed: int) -> str:
    return f"alpha{alpha!r}_cost{cost!r}_seed{seed}"


def _run_cell(base: ExperimentConfig, alpha: float, cost: float, seed: int, out_dir: Optional[str]):
    cfg = dataclasses.replace(base, tolerance_mode=f"fixed({alpha!r})", move_cost=cost, seed=seed)
    result = run_simulation(cfg)
    if out_dir is not None:
        write_outputs(result, Path(out_dir) / cell_name(alpha, cost, seed))
    grid = result.final_grid
    return SweepRow(alpha, cost, seed, same_type_fraction(grid), interface_density(grid))


def run_sweep(
    base: ExperimentConfig,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    costs: Sequence[float] = DEFAULT_COSTS,
    seeds: Sequence[int] = (0, 1, 2),
    out_dir=None,
    workers: int = 1,
) -> SweepSummary:
    """Run every (alpha, cost, seed) cell; a failing cell does not stop the others."""
    if not alphas or not costs or not seeds:
        raise ConfigError("sweep axes must be non-empty")
    cells = [(float(a), float(c), int(s)) for a in alphas for c in costs for s in seeds]
    out = None if out_dir is None else str(out_dir)
    summary = SweepSummary()
    outcomes = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_cell, base, a, c, s, out) for a, c, s in cells]
            for cell, fut in zip(cells, futures):
                try:
                    outcomes.append((cell, fut.result(), None))
                except Exception as exc:  # noqa: BLE001 - recorded per cell
                    outcomes.append((cell, None, exc))
    else:
        for cell in cells:
            try:
                outcomes.append((cell, _run_cell(base, *cell, out), None))
            except Exception as exc:  # noqa: BLE001
                outcomes.append((cell, None, exc))
    for (a, c, s), row, exc in outcomes:
        if exc is None:
            summary.rows.append(row)
        else:
            log.error("sweep cell alpha=%s cost=%s seed=%s failed: %s", a, c, s, exc)
            summary.failures.append((a, c, s, f"{type(exc).__name__}: {exc}"))
    if out is not None:
        write_sweep_summary(summary, out)
    return summary


def write_sweep_summary(summary: SweepSummary, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ("alpha", "cost", "seed", "final_same_type_fraction", "final_interface_density")
    rows = ([getattr(r, h) for h in header] for r in summary.rows)
    (out / "summary.csv").write_text(_csv_text(header, rows))
    if summary.failures:
        (out / "failures.csv").write_text(_csv_text(("alpha", "cost", "seed", "error"), summary.failures))
