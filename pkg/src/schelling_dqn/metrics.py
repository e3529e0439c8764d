"""Segregation indices and return bookkeeping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MOORE = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))
VON_NEUMANN = ((-1, 0), (0, -1), (0, 1), (1, 0))
# one representative of each +/- offset pair, so unordered pairs are counted once
_MOORE_HALF = ((0, 1), (1, -1), (1, 0), (1, 1))
_VON_NEUMANN_HALF = ((0, 1), (1, 0))


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    same_type_fraction: float
    interface_density: float
    mean_reward_a: float
    mean_reward_b: float
    deaths: int
    kills: int
    epsilon: float

    FIELDS = ("iteration", "same_type_fraction", "interface_density", "mean_reward_a",
              "mean_reward_b", "deaths", "kills", "epsilon")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


def _kinds(grid) -> tuple[np.ndarray, bool]:
    if isinstance(grid, np.ndarray):
        return grid, True
    return grid.kinds, grid.torus


def _shifted(kinds: np.ndarray, dy: int, dx: int, torus: bool) -> np.ndarray:
    """``out[y, x] = kinds[y + dy, x + dx]``, wrapping or zero-filled at the edges."""
    if torus:
        return np.roll(kinds, (-dy, -dx), axis=(0, 1))
    h, w = kinds.shape
    out = np.zeros_like(kinds)
    ys, yd = slice(max(dy, 0), h + min(dy, 0)), slice(max(-dy, 0), h + min(-dy, 0))
    xs, xd = slice(max(dx, 0), w + min(dx, 0)), slice(max(-dx, 0), w + min(-dx, 0))
    out[yd, xd] = kinds[ys, xs]
    return out


def same_type_fraction(grid, neighborhood: str = "moore") -> float:
    """Mean over agents of the same-type share among occupied adjacent cells.

    Agents without occupied neighbours are left out; if no agent has one the
    result is 0.5. ``grid`` may be a ``Grid`` or a torus-wrapped kind array.
    """
    kinds, torus = _kinds(grid)
    offsets = {"moore": MOORE, "von_neumann": VON_NEUMANN}[neighborhood]
    k = kinds.astype(np.int64)
    same = np.zeros_like(k)
    occupied = np.zeros_like(k)
    for dy, dx in offsets:
        nb = _shifted(k, dy, dx, torus)
        occupied += nb != 0
        same += (nb * k) > 0
    mask = (k != 0) & (occupied > 0)
    if not mask.any():
        return 0.5
    return float(np.mean(same[mask] / occupied[mask]))


def interface_density(grid, neighborhood: str = "moore") -> float:
    """Share of adjacent occupied pairs whose members differ in type."""
    kinds, torus = _kinds(grid)
    offsets = {"moore": _MOORE_HALF, "von_neumann": _VON_NEUMANN_HALF}[neighborhood]
    k = kinds.astype(np.int64)
    mixed = pairs = 0
    for dy, dx in offsets:
        prod = k * _shifted(k, dy, dx, torus)
        pairs += int(np.count_nonzero(prod))
        mixed += int(np.count_nonzero(prod < 0))
    return mixed / pairs if pairs else 0.0


def discounted_return(rewards, gamma: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    total = 0.0
    for r in reversed(list(rewards)):
        total = r + gamma * total
    return float(total)
