"""Attacker heuristic tests: ranks, score EMA, greedy moves, flee routing."""

import numpy as np
import pytest

from greenpatrol.attacker import (
    HeuristicAttacker,
    ScoreMap,
    distance_ranks,
    edge_distance,
    flee_route,
    next_move,
    score_average,
    score_csv,
    score_update,
)
from greenpatrol.engine import (
    ACTIVE,
    FLEEING,
    GameConfig,
    MOVES,
    RandomDefenderPolicy,
    init_patrol,
    run_episode,
    uniform_cells,
)
from greenpatrol.grid import GridWorld, min_distance_map, neighbors, random_density

UP, DOWN, LEFT, RIGHT, STAY = range(5)


def make_state(grid, attacker_cells, statuses=None, n_drones=1, n_rangers=0):
    config = GameConfig(
        n_drones=n_drones, n_rangers=n_rangers,
        n_attackers=len(attacker_cells), max_steps=50,
    )
    defenders = [(0, 0)] * (n_drones + n_rangers)
    state = init_patrol(grid, config, defenders, attacker_cells)
    if statuses is not None:
        state.attacker_status = list(statuses)
    return state


def test_distance_ranks_center_defender():
    grid = random_density(3, 3, seed=0)
    ranks = distance_ranks(grid, [(1, 1)])
    assert ranks[1, 1] == 0.0
    for corner in [(0, 0), (0, 2), (2, 0), (2, 2)]:
        assert ranks[corner] == 1.0
    for mid in [(0, 1), (1, 0), (1, 2), (2, 1)]:
        assert ranks[mid] == pytest.approx(0.5)


def test_distance_ranks_full_coverage_is_zero():
    grid = random_density(3, 3, seed=0)
    ranks = distance_ranks(grid, list(grid.all_cells()))
    np.testing.assert_array_equal(ranks, np.zeros((3, 3)))


def test_distance_ranks_empty_allocation_errors():
    grid = random_density(3, 3, seed=0)
    with pytest.raises(ValueError):
        distance_ranks(grid, [])


def test_adding_defender_never_raises_distance():
    grid = random_density(6, 6, seed=1)
    rng = np.random.default_rng(2)
    for _ in range(25):
        base = set(map(tuple, [c for c in uniform_cells(grid, 3, rng)]))
        extra = base | {tuple(uniform_cells(grid, 1, rng)[0])}
        d_base = min_distance_map(grid, base)
        d_extra = min_distance_map(grid, extra)
        assert np.all(d_extra <= d_base)


def test_distance_ranks_permutation_invariant():
    grid = random_density(5, 5, seed=3)
    cells = [(0, 0), (2, 3), (4, 1)]
    a = distance_ranks(grid, cells)
    b = distance_ranks(grid, cells[::-1])
    np.testing.assert_array_equal(a, b)


def test_score_average_values():
    assert score_average(0.6, 0.4) == pytest.approx(0.5)
    assert score_average(0.0, 0.0) == 0.0
    assert score_average(1.0, 1.0) == 1.0
    d = np.array([[0.2, 0.8]])
    r = np.array([[0.4, 0.0]])
    np.testing.assert_allclose(score_average(d, r), [[0.3, 0.4]])


def test_score_update_values():
    fixed = ScoreMap(np.full((2, 2), 0.5))
    out = score_update(fixed, np.full((2, 2), 0.5))
    np.testing.assert_allclose(out.values, 0.5)
    assert out.episodes == fixed.episodes + 1

    zero = ScoreMap(np.zeros((2, 2)))
    out = score_update(zero, np.ones((2, 2)))
    np.testing.assert_allclose(out.values, 0.1)


def test_score_update_geometric_contraction():
    score = ScoreMap(np.zeros((3, 3)))
    target = np.full((3, 3), 0.7)
    prev_gap = np.abs(score.values - target).max()
    for _ in range(30):
        score = score_update(score, target)
        gap = np.abs(score.values - target).max()
        assert gap == pytest.approx(0.9 * prev_gap, rel=1e-12)
        prev_gap = gap


def test_score_update_shape_mismatch_errors():
    with pytest.raises(ValueError):
        score_update(ScoreMap(np.zeros((2, 2))), np.zeros((3, 3)))


def test_scores_stay_in_unit_interval():
    rng = np.random.default_rng(4)
    score = ScoreMap(rng.uniform(0, 1, size=(4, 4)))
    for _ in range(300):
        score = score_update(score, rng.uniform(0, 1, size=(4, 4)))
        assert score.values.min() >= 0.0 and score.values.max() <= 1.0


def test_score_map_converges_under_constant_allocation():
    grid = random_density(8, 8, seed=5)
    attacker = HeuristicAttacker()
    allocation = [(1, 1), (6, 6), (3, 4)]
    attacker.begin_episode(grid, allocation)
    converged = False
    for _ in range(200):
        prev = attacker.score.values
        attacker.begin_episode(grid, allocation)
        if np.abs(attacker.score.values - prev).max() < 1e-6:
            converged = True
            break
    assert converged


def test_next_move_picks_highest_neighbor():
    values = np.zeros((3, 3))
    values[0, 1] = 0.2  # up
    values[2, 1] = 0.9  # down
    values[1, 0] = 0.1  # left
    values[1, 2] = 0.3  # right
    values[1, 1] = 0.5  # stay
    grid = random_density(3, 3, seed=0)
    state = make_state(grid, [(1, 1)])
    move = next_move(grid, state, 0, ScoreMap(values))
    assert move == DOWN


def test_next_move_uniform_ties_break_in_order():
    grid = random_density(3, 3, seed=0)
    uniform = ScoreMap(np.full((3, 3), 0.4))
    # interior: up is legal and first in order
    state = make_state(grid, [(1, 1)])
    assert next_move(grid, state, 0, uniform) == UP
    # top-left corner: up and left illegal, down comes first
    state = make_state(grid, [(0, 0)])
    assert next_move(grid, state, 0, uniform) == DOWN
    # bottom-right corner: up is legal again
    state = make_state(grid, [(2, 2)])
    assert next_move(grid, state, 0, uniform) == UP


def brute_force_next(grid, values, cell):
    """Independent one-step lookahead: scan legal moves in fixed order."""
    best_move, best = None, -1.0
    for move, (dr, dc) in enumerate(MOVES):
        cand = (cell[0] + dr, cell[1] + dc)
        if not grid.contains(cand):
            continue
        if values[cand] > best:
            best_move, best = move, values[cand]
    return best_move


def test_next_move_matches_brute_force_everywhere():
    rng = np.random.default_rng(6)
    for trial in range(10):
        grid = random_density(5, 5, seed=trial)
        values = rng.uniform(0, 1, size=(5, 5))
        score = ScoreMap(values)
        for cell in grid.all_cells():
            state = make_state(grid, [cell])
            got = next_move(grid, state, 0, score)
            want = brute_force_next(grid, values, cell)
            assert got == want, (cell, got, want)


def test_next_move_is_always_legal():
    rng = np.random.default_rng(7)
    grid = random_density(4, 6, seed=8)
    values = rng.uniform(0, 1, size=(6, 4))
    score = ScoreMap(values)
    for cell in grid.all_cells():
        state = make_state(grid, [cell])
        move = next_move(grid, state, 0, score)
        dr, dc = MOVES[move]
        assert grid.contains((cell[0] + dr, cell[1] + dc)) or move == STAY


def test_fleeing_status_uses_flee_route():
    grid = random_density(5, 5, seed=9)
    state = make_state(grid, [(2, 1)], statuses=[FLEEING])
    score = ScoreMap(np.zeros((5, 5)))
    assert next_move(grid, state, 0, score) == LEFT
    # perceived signal forces the flee step even while still active
    state = make_state(grid, [(2, 1)], statuses=[ACTIVE])
    assert next_move(grid, state, 0, score, perceived_signal=True) == LEFT


def test_flee_route_adjacent_to_left_edge():
    grid = random_density(5, 5, seed=0)
    assert flee_route(grid, (2, 1)) == LEFT


def test_flee_route_center_ties_to_up():
    grid = random_density(5, 5, seed=0)
    assert flee_route(grid, (2, 2)) == UP


def test_flee_route_on_edge_stays():
    grid = random_density(5, 5, seed=0)
    assert flee_route(grid, (0, 3)) == STAY


def test_flee_path_length_closed_form():
    grid = random_density(7, 6, seed=10)
    for cell in grid.all_cells():
        expected = min(cell[0], cell[1], grid.height - 1 - cell[0],
                       grid.width - 1 - cell[1])
        assert edge_distance(grid, cell) == expected
        # walk the route and count steps to the edge
        steps, cur = 0, cell
        while edge_distance(grid, cur) > 0:
            move = flee_route(grid, cur)
            dr, dc = MOVES[move]
            cur = (cur[0] + dr, cur[1] + dc)
            steps += 1
            assert steps <= expected
        assert steps == expected


def test_heuristic_attacker_episode_integration():
    grid = random_density(6, 6, seed=11)
    config = GameConfig(n_drones=2, n_rangers=1, n_attackers=1, max_steps=30)
    attacker = HeuristicAttacker()
    rng = np.random.default_rng(12)
    defenders = uniform_cells(grid, config.n_defenders, rng)
    attackers = uniform_cells(grid, config.n_attackers, rng)
    attacker.begin_episode(grid, defenders)
    record = run_episode(
        grid, config, RandomDefenderPolicy(), attacker, defenders, attackers, rng
    )
    assert record.length <= config.max_steps
    assert attacker.score.episodes == 1
    attacker.begin_episode(grid, defenders)
    assert attacker.score.episodes == 2


def test_heuristic_attacker_requires_begin_episode():
    grid = random_density(4, 4, seed=13)
    attacker = HeuristicAttacker()
    state = make_state(grid, [(1, 1)])
    with pytest.raises(RuntimeError):
        attacker.act(state, grid, np.random.default_rng(0))


def test_heuristic_attacker_rejects_unknown_cadence():
    with pytest.raises(ValueError):
        HeuristicAttacker(update_cadence="weekly")


def test_timestep_cadence_updates_during_episode():
    grid = random_density(4, 4, seed=14)
    attacker = HeuristicAttacker(update_cadence="timestep")
    attacker.begin_episode(grid, [(0, 0)])
    state = make_state(grid, [(2, 2)])
    before = attacker.score.episodes
    attacker.act(state, grid, np.random.default_rng(0))
    assert attacker.score.episodes == before + 1


def test_score_csv_format():
    score = ScoreMap(np.array([[0.5, 0.25], [1.0, 0.0]]))
    text = score_csv(score)
    assert text == "0.500000,0.250000\n1.000000,0.000000\n"
