"""Heuristic attacker policy.

Attackers rank cells by a blend of animal density and distance from the
defenders' initial allocations, smooth that ranking across episodes with an
exponential moving average, and greedily step toward the best-scored
neighboring cell. Once fleeing, an attacker heads for the nearest park edge
along a shortest Manhattan path. The attacker knows the density map and the
defenders' initial allocations only; live defender positions are never read.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from greenpatrol.engine import FLEEING, GameState, MOVES, RESOLVED
from greenpatrol.grid import Cell, GridWorld, min_distance_map, neighbors, normalize_rank

UPDATE_RATE = 0.1  # cross-episode EMA rate

STAY = MOVES.index((0, 0))


@dataclass(frozen=True)
class ScoreMap:
    """Per-cell attacker preference scores plus the episode count behind them."""

    values: np.ndarray
    episodes: int = 1

    def __post_init__(self):
        self.values.setflags(write=False)


def distance_ranks(grid: GridWorld, defender_allocation: list[Cell]) -> np.ndarray:
    """Per-cell rank in [0, 1] of min distance to any allocated defender.

    Cells farther from every defender rank higher; a uniform distance map
    ranks 0 everywhere.
    """
    if not defender_allocation:
        raise ValueError("defender allocation must not be empty")
    dist = min_distance_map(grid, set(defender_allocation))
    return normalize_rank(dist)


def score_average(density, distance_rank):
    """Blend of animal density and distance rank, equally weighted."""
    return 0.5 * density + 0.5 * distance_rank


def score_update(score_map: ScoreMap, s_av_map: np.ndarray) -> ScoreMap:
    """One exponential-moving-average step toward this episode's averages."""
    if score_map.values.shape != s_av_map.shape:
        raise ValueError("score map and average map shapes differ")
    values = score_map.values + UPDATE_RATE * (s_av_map - score_map.values)
    return ScoreMap(values=values, episodes=score_map.episodes + 1)


def _move_index(cell: Cell, target: Cell) -> int:
    delta = (target[0] - cell[0], target[1] - cell[1])
    return MOVES.index(delta)


def next_move(
    grid: GridWorld,
    state: GameState,
    attacker_id: int,
    score_map: ScoreMap,
    perceived_signal: bool = False,
) -> int:
    """Greedy move toward the best-scored neighbor, or the flee step.

    Ties break in the fixed action order (up, down, left, right, stay).
    """
    cell = state.attacker_pos[attacker_id]
    if perceived_signal or state.attacker_status[attacker_id] == FLEEING:
        return flee_route(grid, cell)
    best_cell = None
    best_score = -np.inf
    for cand in neighbors(grid, cell):
        s = float(score_map.values[cand[0], cand[1]])
        if s > best_score:
            best_cell, best_score = cand, s
    return _move_index(cell, best_cell)


def edge_distance(grid: GridWorld, cell: Cell) -> int:
    """Manhattan distance from a cell to the nearest edge cell."""
    r, c = cell
    return min(r, c, grid.height - 1 - r, grid.width - 1 - c)


def flee_route(grid: GridWorld, attacker_cell: Cell) -> int:
    """One step along a shortest Manhattan path to the nearest edge.

    Already on an edge: stay (the exit resolves in the engine). Ties break
    in the fixed action order.
    """
    d = edge_distance(grid, attacker_cell)
    if d == 0:
        return STAY
    r, c = attacker_cell
    for move, (dr, dc) in enumerate(MOVES[:4]):
        cand = (r + dr, c + dc)
        if grid.contains(cand) and edge_distance(grid, cand) == d - 1:
            return move
    return STAY  # unreachable on a valid grid


class HeuristicAttacker:
    """Engine-facing attacker policy with a cross-episode score map.

    ``begin_episode`` must be called with the defenders' initial allocation
    before each episode; it refreshes the score map (first episode: the map
    is seeded directly with that episode's averages). ``update_cadence`` is
    "episode" (default) or "timestep", which additionally applies the EMA
    at every step of the episode.
    """

    def __init__(self, update_cadence: str = "episode"):
        if update_cadence not in ("episode", "timestep"):
            raise ValueError(f"unknown update cadence {update_cadence!r}")
        self.update_cadence = update_cadence
        self.score: ScoreMap | None = None
        self._s_av: np.ndarray | None = None

    def begin_episode(self, grid: GridWorld, defender_allocation: list[Cell]) -> None:
        ranks = distance_ranks(grid, defender_allocation)
        self._s_av = score_average(grid.density, ranks)
        if self.score is None:
            self.score = ScoreMap(values=self._s_av.copy(), episodes=1)
        else:
            self.score = score_update(self.score, self._s_av)

    def act(self, state: GameState, grid: GridWorld, rng: np.random.Generator):
        if self.score is None:
            raise RuntimeError("begin_episode must be called before acting")
        if self.update_cadence == "timestep":
            self.score = score_update(self.score, self._s_av)
        moves = []
        for k, status in enumerate(state.attacker_status):
            if status in RESOLVED:
                moves.append(STAY)
            else:
                moves.append(next_move(grid, state, k, self.score))
        return moves


def score_csv(score_map: ScoreMap) -> str:
    """Score map as CSV text, one row per grid row, six decimal places."""
    lines = [",".join(f"{v:.6f}" for v in row) for row in score_map.values]
    return "\n".join(lines) + "\n"
