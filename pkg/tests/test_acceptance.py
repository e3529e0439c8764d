"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Criteria 6 to 8 train desk-scale models and take several minutes.
"""
import dataclasses
import time

import numpy as np
import pytest

from schelling_dqn import cli
from schelling_dqn import grid_env as ge
from schelling_dqn import qlearn as ql
from schelling_dqn.experiment import ExperimentConfig, run_simulation
from schelling_dqn.grid_env import Kind
from schelling_dqn.metrics import discounted_return, interface_density, same_type_fraction

from oracles import (
    adam_one_step,
    brute_interface_density,
    checkerboard,
    max_relative_error,
    numeric_grads,
    reward_oracle,
    torus_neighborhood,
)

DESK = ExperimentConfig(width=25, height=25, occupancy=0.3, window=5,
                        train_iterations=1500, eval_iterations=500, seed=0)
TREND_SEEDS = (0, 1, 2)
TREND_COSTS = (0.3, 0.9)


def test_c1_epsilon_schedule(criterion):
    start = time.perf_counter()
    sched = ql.EpsilonSchedule(0.9, 0.0, 10**5)
    endpoints = (sched.value(0), sched.value(10**5), sched.value(5 * 10**4))
    dense = [sched.value(s) for s in range(0, 2 * 10**5 + 1, 7)]
    monotone = all(a >= b for a, b in zip(dense, dense[1:]))
    elapsed = time.perf_counter() - start
    ok = endpoints == (0.9, 0.0, 0.45) and monotone and elapsed < 1.0
    criterion(1, "epsilon schedule exactness", ok, f"eps(0, 1e5, 5e4)={endpoints}, {elapsed:.2f}s")
    assert ok


def _random_network(rng):
    while True:
        hidden = rng.integers(2, 9, size=rng.integers(1, 3)).tolist()
        sizes = [int(rng.integers(2, 7)), *hidden, 5]
        net = ql.QNetwork(sizes, rng)
        if net.n_params <= 200:
            break
    for p in net.params:
        p[...] = rng.normal(scale=0.7, size=p.shape)
    return net


def test_c2_gradient_check(criterion):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(25):
        rng = np.random.default_rng(1000 + seed)
        net = _random_network(rng)
        states = rng.normal(size=(8, net.sizes[0]))
        actions = rng.integers(0, 5, size=8)
        targets = rng.normal(size=8)
        _, analytic = ql.loss_and_grads(net, states, actions, targets)
        numeric = numeric_grads(net, lambda: ql.loss_and_grads(net, states, actions, targets)[0])
        worst = max(worst, max_relative_error(analytic, numeric))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 30.0
    criterion(2, "gradient check on 25 networks", ok, f"max rel err {worst:.2e}, {elapsed:.2f}s")
    assert ok


def test_c3_adam_single_step(criterion):
    start = time.perf_counter()
    errors = []
    for param, grad in [(0.5, 0.2), (-1.25, -3.0), (2.0, 1e-6), (0.0, 40.0)]:
        p = [np.array([param])]
        ql.adam_step(p, [np.array([grad])], ql.AdamState.for_params(p))
        errors.append(abs(float(p[0][0]) - adam_one_step(param, grad)))
    elapsed = time.perf_counter() - start
    ok = max(errors) <= 1e-12 and elapsed < 1.0
    criterion(3, "Adam single-step oracle", ok, f"max abs err {max(errors):.1e}, {elapsed:.3f}s")
    assert ok


def test_c4_reward_oracle(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    statuses = list(ge.Outcome)
    mismatches = []
    for case in range(50):
        alpha = float(rng.choice(ge.ALPHA_LEVELS))
        a_same = int(rng.integers(0, 25))
        b_other = int(rng.integers(0, 25 - a_same))
        status = statuses[int(rng.integers(len(statuses)))]
        cost = float(rng.uniform(0, 1.5))
        died = bool(rng.integers(2))
        on_stay = bool(rng.integers(2))
        params = ge.RewardParams(move_cost=cost, cost_on_stay=on_stay)
        agent = ge.Agent(0, Kind.A, (0, 0), 0, alpha)
        outcome = ge.MoveOutcome.make(status, 1 if status is ge.Outcome.KILLED else None)
        got = ge.compute_reward(outcome, ge.NeighborCounts(a_same, b_other), agent, params, died)
        parts, total = reward_oracle(alpha, a_same, b_other, status.value, cost, died, cost_on_stay=on_stay)
        if got.total != total or got._asdict() | {"total": total} != parts | {"total": total}:
            mismatches.append(case)
    elapsed = time.perf_counter() - start
    ok = not mismatches and elapsed < 1.0
    criterion(4, "reward oracle, 50 cases", ok, f"{len(mismatches)} mismatches, {elapsed:.3f}s")
    assert ok


def _independent_violations(grid, expected_population):
    cells, kinds = grid.cells.tolist(), grid.kinds.tolist()
    found = []
    seen = set()
    population = {Kind.A: 0, Kind.B: 0}
    for key, agent in grid.agents.items():
        x, y = agent.pos
        if key != agent.id or not (0 <= x < grid.width and 0 <= y < grid.height):
            found.append(f"agent {key} has a foreign id or is out of bounds")
        elif cells[y][x] != key or kinds[y][x] != agent.kind:
            found.append(f"cell {agent.pos} does not point back at agent {key}")
        seen.add(agent.pos)
        population[agent.kind] += 1
    if len(seen) != len(grid.agents):
        found.append("two agents share a cell")
    if int(np.count_nonzero(grid.cells != ge.EMPTY)) != len(seen):
        found.append("occupied cells without an agent")
    if population != expected_population:
        found.append(f"population {population}")
    return found


def test_c5_environment_invariants(criterion):
    start = time.perf_counter()
    width = height = 20
    n = 5
    grid = ge.init_grid(ge.EnvConfig(width, height, occupancy=0.3, window=n), np.random.default_rng(5))
    population = grid.population()
    choices = iter(np.random.default_rng(6).integers(0, 5, size=5 * 10**6).tolist())
    world_rng = np.random.default_rng(7)
    violations = []

    def random_policy(agent, obs):
        return next(choices)

    def checked_policy(agent, obs):
        # compare against a loop-built window while the grid is in decision-time state
        cells = torus_neighborhood(*agent.pos, n, width, height)
        expected = [int(agent.kind) * int(grid.kinds[y, x]) for x, y in cells]
        if obs.window.ravel().tolist() != expected or obs.age_norm != agent.age / ge.MAX_AGE:
            violations.append(f"observation mismatch for agent {agent.id}")
        return next(choices)

    for it in range(10**4):
        policy = checked_policy if it % 20 == 0 else random_policy
        report = ge.step_iteration(grid, policy, policy, ge.RewardParams(), world_rng, n)
        windows = [s.observation.window for s in report.steps]
        blob = b"".join(w.tobytes() for w in windows)
        # int8 n x n windows, values in {-1, 0, 1}, observer at the centre reading +1
        if {(w.dtype, w.shape) for w in windows} != {(np.dtype(np.int8), (n, n))} \
                or blob.translate(None, b"\x00\x01\xff") or blob[n * n // 2::n * n] != b"\x01" * len(windows):
            violations.append(f"malformed observation in iteration {it}")
        violations.extend(_independent_violations(grid, population))
    elapsed = time.perf_counter() - start
    ok = not violations and elapsed < 30.0
    criterion(5, "environment invariants over 1e4 iterations", ok,
              f"{len(violations)} violations, {elapsed:.1f}s")
    assert ok


@pytest.mark.slow
def test_c6_cli_determinism(criterion, tmp_path):
    start = time.perf_counter()
    cfg = tmp_path / "desk.cfg"
    cfg.write_text(DESK.to_text())
    outputs = []
    codes = []
    for name in ("first", "second"):
        codes.append(cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / name)]))
        outputs.append((tmp_path / name / "metrics.csv").read_bytes())
    elapsed = time.perf_counter() - start
    ok = codes == [0, 0] and outputs[0] == outputs[1] and elapsed < 300.0
    criterion(6, "train determinism at desk scale", ok,
              f"identical={outputs[0] == outputs[1]}, {len(outputs[0])} bytes, {elapsed:.0f}s")
    assert ok


@pytest.fixture(scope="module")
def trend_runs():
    runs = {}
    for cost in TREND_COSTS:
        for seed in TREND_SEEDS:
            config = dataclasses.replace(DESK, tolerance_mode="fixed(1.0)", move_cost=cost, seed=seed)
            started = time.perf_counter()
            runs[cost, seed] = (run_simulation(config), time.perf_counter() - started)
    return runs


@pytest.mark.slow
def test_c7_trend_with_moving_cost(criterion, trend_runs):
    final = {key: result.metrics[-1].same_type_fraction for key, (result, _) in trend_runs.items()}
    diffs = [final[0.3, s] - final[0.9, s] for s in TREND_SEEDS]
    mean_diff = float(np.mean(diffs))
    holds = sum(d > 0 for d in diffs)
    slowest = max(elapsed for _, elapsed in trend_runs.values())
    ok = mean_diff >= 0.05 and holds >= 2 and slowest <= 600.0
    criterion(7, "segregation falls as moving cost rises", ok,
              f"mean diff {mean_diff:+.4f} (need >= 0.05), per-seed {[round(d, 4) for d in diffs]}, "
              f"slowest cell {slowest:.0f}s")
    assert ok


def _mean_reward(records):
    return float(np.mean([(m.mean_reward_a + m.mean_reward_b) / 2 for m in records]))


@pytest.mark.slow
def test_c8_learning_signal(criterion, trend_runs):
    gains = []
    for seed in TREND_SEEDS:
        train = trend_runs[0.3, seed][0].metrics[:DESK.train_iterations]
        gains.append(_mean_reward(train[-200:]) - _mean_reward(train[:200]))
    ok = sum(g > 0 for g in gains) >= 2
    criterion(8, "reward improves during training", ok, f"last-minus-first gains {[round(g, 3) for g in gains]}")
    assert ok


def test_c9_metric_oracles(criterion):
    start = time.perf_counter()
    board = checkerboard(10)
    packed = np.ones((8, 8), dtype=np.int8)
    values = {
        "checkerboard same": (same_type_fraction(board), 0.5),
        "checkerboard same, von Neumann": (same_type_fraction(board, "von_neumann"), 0.0),
        "checkerboard interface": (interface_density(board), 0.5),
        "checkerboard interface, enumerated": (float(brute_interface_density(board)), 0.5),
        "packed same": (same_type_fraction(packed), 1.0),
        "packed interface": (interface_density(packed), 0.0),
    }
    exact = all(got == want for got, want in values.values())
    geometric = max(abs(discounted_return([r] * k, g) - r * (1 - g**k) / (1 - g))
                    for r, g, k in [(1.0, 0.99, 100), (0.1, 0.9, 50), (-1.0, 0.5, 20)])
    elapsed = time.perf_counter() - start
    ok = exact and geometric <= 1e-12 and elapsed < 1.0
    criterion(9, "metric oracles", ok, f"exact={exact}, geometric err {geometric:.1e}, {elapsed:.3f}s")
    assert ok
