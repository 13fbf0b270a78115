"""Patrolling-stage simulator.

Discrete synchronized timesteps: all agents move, drones run their detectors,
drone communication resolves (warning signals to co-located attackers,
notifications to rangers), rangers capture co-located attackers, fleeing
attackers exit at the park edge, and remaining active attackers damage their
current cell. Detection is subject to a false-negative rate beta; an
attacker's perception of a warning signal is subject to a false-negative
rate kappa. The game is zero-sum: the attacker side's payoff is the negation
of the defender side's cumulative reward.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from greenpatrol.grid import Cell, GridWorld

# Shared move order; the fixed order is also the tie-break order everywhere.
MOVES: tuple[tuple[int, int], ...] = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))
MOVE_NAMES = ("up", "down", "left", "right", "stay")
N_MOVES = len(MOVES)

COMM_SIGNAL, COMM_NOTIFY, COMM_NOOP = 0, 1, 2
COMM_NAMES = ("signal", "notify", "noop")
N_COMMS = 3
N_DRONE_ACTIONS = N_MOVES * N_COMMS  # composite (move, comm) actions

ACTIVE, FLEEING, CAUGHT, FLED = "active", "fleeing", "caught", "fled"
RESOLVED = (CAUGHT, FLED)


class GameError(ValueError):
    """Raised for invalid configurations, allocations or illegal stepping."""


def drone_action(move: int, comm: int) -> int:
    """Composite drone action index from a move and a comm component."""
    return move * N_COMMS + comm


def split_drone_action(action: int) -> tuple[int, int]:
    return action // N_COMMS, action % N_COMMS


@dataclass(frozen=True)
class GameConfig:
    """Patrolling-stage parameters: team sizes, horizon, uncertainty, rewards."""

    n_drones: int = 2
    n_rangers: int = 1
    n_attackers: int = 1
    max_steps: int = 100
    beta: float = 0.0
    kappa: float = 0.0
    r_capture: float = 10.0
    r_damage_scale: float = 1.0
    r_comm: float = 0.1
    r_comm_penalty: float = -0.2
    gamma: float = 0.99

    def __post_init__(self):
        if not (0.0 <= self.beta <= 1.0 and 0.0 <= self.kappa <= 1.0):
            raise GameError("beta and kappa must lie in [0, 1]")
        if self.max_steps < 1:
            raise GameError("max_steps must be >= 1")
        if min(self.n_drones, self.n_rangers, self.n_attackers) < 0:
            raise GameError("agent counts must be >= 0")
        if self.r_capture <= 0 or self.r_damage_scale <= 0:
            raise GameError("r_capture and r_damage_scale must be > 0")
        if self.r_comm_penalty >= 0:
            raise GameError("r_comm_penalty must be < 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise GameError("gamma must lie in [0, 1]")

    @property
    def n_defenders(self) -> int:
        return self.n_drones + self.n_rangers


@dataclass
class GameState:
    """Full simulator state at one timestep.

    ``visit_counts`` has one layer per defender agent (drones first), and is
    incremented at the agent's cell every timestep including t=0. Caught and
    fled attacker statuses are absorbing; their positions freeze.
    """

    t: int
    drone_pos: list[Cell]
    ranger_pos: list[Cell]
    attacker_pos: list[Cell]
    attacker_status: list[str]
    visit_counts: np.ndarray
    last_detections: list[bool] = field(default_factory=list)
    last_comms: list[int] = field(default_factory=list)

    def copy(self) -> "GameState":
        return GameState(
            t=self.t,
            drone_pos=list(self.drone_pos),
            ranger_pos=list(self.ranger_pos),
            attacker_pos=list(self.attacker_pos),
            attacker_status=list(self.attacker_status),
            visit_counts=self.visit_counts.copy(),
            last_detections=list(self.last_detections),
            last_comms=list(self.last_comms),
        )

    def defender_cells(self) -> list[Cell]:
        return list(self.drone_pos) + list(self.ranger_pos)


@dataclass
class StepOutcome:
    defender_reward: float
    events: list[dict]


def init_patrol(
    grid: GridWorld,
    config: GameConfig,
    defender_allocation: list[Cell],
    attacker_allocation: list[Cell],
) -> GameState:
    """Start a patrolling stage from initial allocations.

    ``defender_allocation`` lists drone cells first then ranger cells.
    Agents may share a cell.
    """
    if len(defender_allocation) != config.n_defenders:
        raise GameError(
            f"defender allocation size {len(defender_allocation)} != "
            f"{config.n_defenders}"
        )
    if len(attacker_allocation) != config.n_attackers:
        raise GameError(
            f"attacker allocation size {len(attacker_allocation)} != "
            f"{config.n_attackers}"
        )
    for cell in list(defender_allocation) + list(attacker_allocation):
        if not grid.contains(cell):
            raise GameError(f"allocation cell {cell} outside grid")

    visit = np.zeros((config.n_defenders, grid.height, grid.width), dtype=np.int64)
    for i, cell in enumerate(defender_allocation):
        visit[i, cell[0], cell[1]] += 1
    return GameState(
        t=0,
        drone_pos=list(defender_allocation[: config.n_drones]),
        ranger_pos=list(defender_allocation[config.n_drones:]),
        attacker_pos=list(attacker_allocation),
        attacker_status=[ACTIVE] * config.n_attackers,
        visit_counts=visit,
        last_detections=[False] * config.n_drones,
        last_comms=[COMM_NOOP] * config.n_drones,
    )


def detect(
    drone_cell: Cell, attacker_cells: list[Cell], beta: float, rng: np.random.Generator
) -> bool:
    """Drone detector output: false negatives at rate beta, no false positives.

    ``attacker_cells`` must hold only attackers that are detectable (active
    or fleeing). The RNG is consumed only on co-location.
    """
    if drone_cell not in attacker_cells:
        return False
    return rng.random() >= beta


def observe_signal(signal_present: bool, kappa: float, rng: np.random.Generator) -> bool:
    """Attacker's perception of a drone signal: misses at rate kappa."""
    if not signal_present:
        return False
    return rng.random() >= kappa


def is_terminal(state: GameState, config: GameConfig) -> bool:
    """True once every attacker is caught or fled, or time has run out."""
    if state.t >= config.max_steps:
        return True
    return all(s in RESOLVED for s in state.attacker_status)


def _apply_move(grid: GridWorld, cell: Cell, move: int) -> Cell:
    # illegal moves clamp to stay
    dr, dc = MOVES[move]
    cand = (cell[0] + dr, cell[1] + dc)
    return cand if grid.contains(cand) else cell


def _on_edge(grid: GridWorld, cell: Cell) -> bool:
    r, c = cell
    return r == 0 or c == 0 or r == grid.height - 1 or c == grid.width - 1


def step(
    state: GameState,
    grid: GridWorld,
    config: GameConfig,
    drone_actions: list[int],
    ranger_actions: list[int],
    attacker_actions: list[int],
    rng: np.random.Generator,
) -> tuple[GameState, StepOutcome]:
    """Advance the game by one synchronized timestep.

    Resolution order: moves, detection, communication, capture, flee-exit,
    damage, reward accounting. RNG draws happen in agent-index order within
    each phase, so identical (state, actions, seed) reproduce identically.
    """
    if is_terminal(state, config):
        raise GameError("cannot step a terminal state")
    if len(drone_actions) != config.n_drones or len(ranger_actions) != config.n_rangers:
        raise GameError("defender action count mismatch")
    if len(attacker_actions) != config.n_attackers:
        raise GameError("attacker action count mismatch")

    nxt = state.copy()
    events: list[dict] = []
    drone_moves = [split_drone_action(a)[0] for a in drone_actions]
    drone_comms = [split_drone_action(a)[1] for a in drone_actions]

    # 1. simultaneous movement; resolved attackers stay frozen
    nxt.drone_pos = [
        _apply_move(grid, cell, m) for cell, m in zip(state.drone_pos, drone_moves)
    ]
    nxt.ranger_pos = [
        _apply_move(grid, cell, a) for cell, a in zip(state.ranger_pos, ranger_actions)
    ]
    for k, (cell, a) in enumerate(zip(state.attacker_pos, attacker_actions)):
        if nxt.attacker_status[k] not in RESOLVED:
            nxt.attacker_pos[k] = _apply_move(grid, cell, a)

    # 2. detection (one draw per co-located drone)
    detectable = [
        nxt.attacker_pos[k]
        for k in range(config.n_attackers)
        if nxt.attacker_status[k] not in RESOLVED
    ]
    detections: list[bool] = []
    for i, cell in enumerate(nxt.drone_pos):
        hit = detect(cell, detectable, config.beta, rng)
        detections.append(hit)
        if hit:
            events.append({"kind": "detection", "drone": i, "cell": cell})

    # 3. communication; signals may turn co-located active attackers fleeing
    for i, comm in enumerate(drone_comms):
        if comm == COMM_SIGNAL:
            events.append(
                {"kind": "signal", "drone": i, "cell": nxt.drone_pos[i],
                 "justified": detections[i]}
            )
            for k in range(config.n_attackers):
                if (
                    nxt.attacker_status[k] == ACTIVE
                    and nxt.attacker_pos[k] == nxt.drone_pos[i]
                    and observe_signal(True, config.kappa, rng)
                ):
                    nxt.attacker_status[k] = FLEEING
        elif comm == COMM_NOTIFY:
            events.append(
                {"kind": "notify", "drone": i, "cell": nxt.drone_pos[i],
                 "justified": detections[i]}
            )

    # 4. capture by rangers (active or fleeing attackers alike)
    for j, rcell in enumerate(nxt.ranger_pos):
        for k in range(config.n_attackers):
            if nxt.attacker_status[k] not in RESOLVED and nxt.attacker_pos[k] == rcell:
                nxt.attacker_status[k] = CAUGHT
                events.append(
                    {"kind": "capture", "ranger": j, "attacker": k, "cell": rcell}
                )

    # 5. fleeing attackers exit at the park edge
    for k in range(config.n_attackers):
        if nxt.attacker_status[k] == FLEEING and _on_edge(grid, nxt.attacker_pos[k]):
            nxt.attacker_status[k] = FLED
            events.append({"kind": "flee", "attacker": k, "cell": nxt.attacker_pos[k]})

    # 6. still-active attackers damage their current cell
    for k in range(config.n_attackers):
        if nxt.attacker_status[k] == ACTIVE:
            cell = nxt.attacker_pos[k]
            damage = config.r_damage_scale * grid.density_at(cell)
            events.append(
                {"kind": "attack", "attacker": k, "cell": cell, "damage": damage}
            )

    reward = reward_accounting(events, config, grid)

    # 7. bookkeeping
    nxt.t = state.t + 1
    for i, cell in enumerate(nxt.drone_pos):
        nxt.visit_counts[i, cell[0], cell[1]] += 1
    for j, cell in enumerate(nxt.ranger_pos):
        nxt.visit_counts[config.n_drones + j, cell[0], cell[1]] += 1
    nxt.last_detections = detections
    nxt.last_comms = drone_comms

    return nxt, StepOutcome(defender_reward=reward, events=events)


def reward_accounting(events: list[dict], config: GameConfig, grid: GridWorld) -> float:
    """Team defender reward for one step's events.

    Captures pay r_capture each; every attack costs damage proportional to
    the attacked cell's density; each signal or notify pays r_comm when the
    communicating drone detected this step and r_comm_penalty otherwise.
    Fleeing exits contribute nothing.
    """
    total = 0.0
    for ev in events:
        kind = ev["kind"]
        if kind == "capture":
            total += config.r_capture
        elif kind == "attack":
            total -= config.r_damage_scale * grid.density_at(tuple(ev["cell"]))
        elif kind in ("signal", "notify"):
            total += config.r_comm if ev["justified"] else config.r_comm_penalty
    return total


def episode_return(outcomes: list[StepOutcome]) -> float:
    """Undiscounted defender return over one episode."""
    return float(sum(o.defender_reward for o in outcomes))


def attacker_return(outcomes: list[StepOutcome]) -> float:
    """Attacker payoff; the game is zero-sum."""
    return -episode_return(outcomes)


def uniform_cells(grid: GridWorld, n: int, rng: np.random.Generator) -> list[Cell]:
    """n cells drawn uniformly (with replacement) from the grid."""
    idx = rng.integers(0, grid.n_cells, size=n)
    return [grid.index_cell(int(i)) for i in idx]


@dataclass
class EpisodeRecord:
    """One completed patrolling stage with its per-step records."""

    defender_allocation: list[Cell]
    attacker_allocation: list[Cell]
    outcomes: list[StepOutcome]
    steps: list[dict]
    final_state: GameState

    @property
    def defender_return(self) -> float:
        return episode_return(self.outcomes)

    @property
    def attacker_return(self) -> float:
        return -episode_return(self.outcomes)

    @property
    def length(self) -> int:
        return len(self.outcomes)

    def count_events(self, kind: str) -> int:
        return sum(1 for o in self.outcomes for e in o.events if e["kind"] == kind)


def run_episode(
    grid: GridWorld,
    config: GameConfig,
    defender_policy,
    attacker_policy,
    defender_allocation: list[Cell],
    attacker_allocation: list[Cell],
    rng: np.random.Generator,
) -> EpisodeRecord:
    """Play a patrolling stage to termination.

    Policies are called as ``policy.act(state, grid, rng)``; the defender
    returns (drone_actions, ranger_actions) and the attacker a move list.
    """
    state = init_patrol(grid, config, defender_allocation, attacker_allocation)
    outcomes: list[StepOutcome] = []
    steps: list[dict] = []
    while not is_terminal(state, config):
        drone_actions, ranger_actions = defender_policy.act(state, grid, rng)
        attacker_actions = attacker_policy.act(state, grid, rng)
        state, outcome = step(
            state, grid, config, drone_actions, ranger_actions, attacker_actions, rng
        )
        outcomes.append(outcome)
        steps.append(
            {
                "t": state.t,
                "drones": list(state.drone_pos),
                "rangers": list(state.ranger_pos),
                "attackers": [
                    {"cell": state.attacker_pos[k], "status": state.attacker_status[k]}
                    for k in range(config.n_attackers)
                ],
                "drone_actions": list(drone_actions),
                "ranger_actions": list(ranger_actions),
                "attacker_actions": list(attacker_actions),
                "events": outcome.events,
                "reward": outcome.defender_reward,
            }
        )
    return EpisodeRecord(
        defender_allocation=list(defender_allocation),
        attacker_allocation=list(attacker_allocation),
        outcomes=outcomes,
        steps=steps,
        final_state=state,
    )


class RandomDefenderPolicy:
    """Uniform random legal moves; drones pick uniform comm components."""

    def act(self, state: GameState, grid: GridWorld, rng: np.random.Generator):
        drone_actions = []
        for cell in state.drone_pos:
            move = int(rng.integers(0, N_MOVES))
            comm = int(rng.integers(0, N_COMMS))
            drone_actions.append(drone_action(move, comm))
        ranger_actions = [int(rng.integers(0, N_MOVES)) for _ in state.ranger_pos]
        return drone_actions, ranger_actions


class StationaryDefenderPolicy:
    """Defenders that never move and never communicate."""

    def act(self, state: GameState, grid: GridWorld, rng: np.random.Generator):
        stay = MOVES.index((0, 0))
        return (
            [drone_action(stay, COMM_NOOP)] * len(state.drone_pos),
            [stay] * len(state.ranger_pos),
        )


class RandomAttackerPolicy:
    """Uniform random moves for every unresolved attacker."""

    def act(self, state: GameState, grid: GridWorld, rng: np.random.Generator):
        return [int(rng.integers(0, N_MOVES)) for _ in state.attacker_pos]
