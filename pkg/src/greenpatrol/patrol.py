"""Defender patrolling learner.

One Double DQN is shared by all drones and one by all rangers (centralized
training); each agent still selects its own action from its own egocentric
observation (decentralized execution). Observations are 9-channel tensors
over the grid; drones act in a composite move x communication space of 15
actions, rangers in the 5 moves. Training rolls episodes against the
heuristic attacker from uniformly random allocations, pushes every agent's
transition into its kind's shared replay buffer, and applies minibatch
Double-DQN updates with periodic target synchronization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from greenpatrol.attacker import HeuristicAttacker
from greenpatrol.engine import (
    COMM_NOTIFY,
    COMM_SIGNAL,
    GameConfig,
    GameState,
    MOVES,
    N_COMMS,
    N_DRONE_ACTIONS,
    N_MOVES,
    drone_action,
    init_patrol,
    is_terminal,
    step,
    uniform_cells,
)
from greenpatrol.grid import Cell, GridWorld
from greenpatrol.nn import (
    AdamState,
    Conv2D,
    Dense,
    Flatten,
    Network,
    ReLU,
    adam_init,
    adam_step,
    q_loss,
)
from greenpatrol.seeding import stream

N_CHANNELS = 9
DENSITY_MODES = ("visited_mask", "own_cell")


@dataclass(frozen=True)
class PatrolTrainConfig:
    """Hyperparameters of the patrolling-stage learner."""

    episodes: int
    lr: float = 3e-4
    batch_size: int = 32
    drone_buffer: int = 192_000
    ranger_buffer: int = 64_000
    drone_sync: int = 20
    ranger_sync: int = 50
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 25_000
    learn_start: int = 500
    density_mode: str = "visited_mask"
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if self.density_mode not in DENSITY_MODES:
            raise ValueError(f"density_mode must be one of {DENSITY_MODES}")
        if self.batch_size < 1 or self.learn_start < self.batch_size:
            raise ValueError("need learn_start >= batch_size >= 1")


def encode_observation(
    state: GameState,
    grid: GridWorld,
    agent_id: int,
    agent_kind: str,
    density_mode: str = "visited_mask",
) -> np.ndarray:
    """Egocentric 9-channel observation tensor for one defender agent.

    Channels: 0 own position; 1 attacker-detected-at-own-cell flag; 2 other
    drones; 3 other rangers; 4 detector outputs at drone cells; 5 notify
    flags at drone cells; 6 signal flags at drone cells; 7 animal density
    restricted to cells this agent has visited (or the own cell only, per
    ``density_mode``); 8 team visitation counts normalized by elapsed steps.
    """
    if agent_kind == "drone":
        if not 0 <= agent_id < len(state.drone_pos):
            raise ValueError(f"unknown drone {agent_id}")
        own = state.drone_pos[agent_id]
        visit_layer = agent_id
    elif agent_kind == "ranger":
        if not 0 <= agent_id < len(state.ranger_pos):
            raise ValueError(f"unknown ranger {agent_id}")
        own = state.ranger_pos[agent_id]
        visit_layer = len(state.drone_pos) + agent_id
    else:
        raise ValueError(f"unknown agent kind {agent_kind!r}")

    obs = np.zeros((N_CHANNELS, grid.height, grid.width))
    obs[0, own[0], own[1]] = 1.0

    detected_cells = {
        state.drone_pos[i]
        for i, hit in enumerate(state.last_detections)
        if hit
    }
    if own in detected_cells:
        obs[1, own[0], own[1]] = 1.0

    for i, cell in enumerate(state.drone_pos):
        if agent_kind == "drone" and i == agent_id:
            continue
        obs[2, cell[0], cell[1]] = 1.0
    for j, cell in enumerate(state.ranger_pos):
        if agent_kind == "ranger" and j == agent_id:
            continue
        obs[3, cell[0], cell[1]] = 1.0

    for i, cell in enumerate(state.drone_pos):
        if i < len(state.last_detections) and state.last_detections[i]:
            obs[4, cell[0], cell[1]] = 1.0
        if i < len(state.last_comms):
            if state.last_comms[i] == COMM_NOTIFY:
                obs[5, cell[0], cell[1]] = 1.0
            elif state.last_comms[i] == COMM_SIGNAL:
                obs[6, cell[0], cell[1]] = 1.0

    if density_mode == "visited_mask":
        visited = state.visit_counts[visit_layer] > 0
        obs[7] = grid.density * visited
    elif density_mode == "own_cell":
        obs[7, own[0], own[1]] = grid.density_at(own)
    else:
        raise ValueError(f"unknown density mode {density_mode!r}")

    obs[8] = state.visit_counts.sum(axis=0) / (state.t + 1)
    return obs


def build_patrol_network(grid: GridWorld, n_actions: int) -> Network:
    """Patrol Q-network: two 3x3 convolutions then a dense funnel."""
    if grid.height < 5 or grid.width < 5:
        raise ValueError("patrol network needs a grid of at least 5x5")
    flat = 20 * (grid.height - 4) * (grid.width - 4)
    return Network(
        (N_CHANNELS, grid.height, grid.width),
        [
            Conv2D(N_CHANNELS, 10, kernel=3),
            ReLU(),
            Conv2D(10, 20, kernel=3),
            ReLU(),
            Flatten(),
            Dense(flat, 128),
            ReLU(),
            Dense(128, 64),
            ReLU(),
            Dense(64, n_actions),
        ],
    )


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions, preallocated on first push."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.size = 0
        self.cursor = 0
        self._obs = None

    def _allocate(self, obs_shape):
        c = self.capacity
        self._obs = np.zeros((c,) + obs_shape, dtype=np.float32)
        self._next_obs = np.zeros((c,) + obs_shape, dtype=np.float32)
        self._actions = np.zeros(c, dtype=np.int64)
        self._rewards = np.zeros(c, dtype=np.float64)
        self._dones = np.zeros(c, dtype=bool)

    def push(self, obs, action, reward, next_obs, done) -> None:
        if self._obs is None:
            self._allocate(obs.shape)
        i = self.cursor
        self._obs[i] = obs
        self._next_obs[i] = next_obs
        self._actions[i] = action
        self._rewards[i] = reward
        self._dones[i] = done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return (
            self._obs[idx].astype(np.float64),
            self._actions[idx],
            self._rewards[idx],
            self._next_obs[idx].astype(np.float64),
            self._dones[idx],
        )

    def __len__(self) -> int:
        return self.size


@dataclass
class DDQNPair:
    """Online/target parameter pair sharing one network architecture."""

    network: Network
    online: np.ndarray
    target: np.ndarray
    sync_period: int
    adam: AdamState
    gamma: float = 0.99
    updates: int = 0


def make_ddqn_pair(
    grid: GridWorld,
    n_actions: int,
    sync_period: int,
    lr: float,
    rng: np.random.Generator,
    gamma: float = 0.99,
) -> DDQNPair:
    network = build_patrol_network(grid, n_actions)
    online = network.init(rng)
    return DDQNPair(
        network=network,
        online=online,
        target=online.copy(),
        sync_period=sync_period,
        adam=adam_init(network.n_params, lr),
        gamma=gamma,
    )


def ddqn_target(
    network: Network,
    reward: float,
    next_obs: np.ndarray,
    done: bool,
    online: np.ndarray,
    target: np.ndarray,
    gamma: float,
) -> float:
    """Double-DQN bootstrap: online net picks the action, target net rates it."""
    if done:
        return float(reward)
    q_online, _ = network.forward(online, next_obs[None])
    best = int(np.argmax(q_online[0]))
    q_target, _ = network.forward(target, next_obs[None])
    return float(reward + gamma * q_target[0, best])


def epsilon(step_count: int, start: float = 1.0, end: float = 0.05,
            decay_steps: int = 25_000) -> float:
    """Linear exploration schedule, constant after the decay window."""
    if step_count < 0:
        raise ValueError("step must be >= 0")
    if step_count >= decay_steps:
        return end
    return start + (end - start) * (step_count / decay_steps)


def legal_moves(grid: GridWorld, cell: Cell) -> list[int]:
    moves = []
    for m, (dr, dc) in enumerate(MOVES):
        if grid.contains((cell[0] + dr, cell[1] + dc)):
            moves.append(m)
    return moves


def legal_drone_actions(grid: GridWorld, cell: Cell) -> list[int]:
    return [
        drone_action(m, c) for m in legal_moves(grid, cell) for c in range(N_COMMS)
    ]


def _choose(q_row: np.ndarray, legal: list[int], eps: float,
            rng: np.random.Generator) -> int:
    if eps > 0.0 and rng.random() < eps:
        return int(legal[rng.integers(0, len(legal))])
    masked = np.full(q_row.shape, -np.inf)
    masked[legal] = q_row[legal]
    return int(np.argmax(masked))


def select_actions(
    state: GameState,
    grid: GridWorld,
    drone_net: DDQNPair,
    ranger_net: DDQNPair,
    eps: float,
    rng: np.random.Generator,
    density_mode: str = "visited_mask",
):
    """Independent epsilon-greedy action per agent over its legal actions."""
    drone_actions = []
    for i, cell in enumerate(state.drone_pos):
        obs = encode_observation(state, grid, i, "drone", density_mode)
        q, _ = drone_net.network.forward(drone_net.online, obs[None])
        drone_actions.append(_choose(q[0], legal_drone_actions(grid, cell), eps, rng))
    ranger_actions = []
    for j, cell in enumerate(state.ranger_pos):
        obs = encode_observation(state, grid, j, "ranger", density_mode)
        q, _ = ranger_net.network.forward(ranger_net.online, obs[None])
        ranger_actions.append(_choose(q[0], legal_moves(grid, cell), eps, rng))
    return drone_actions, ranger_actions


class DDQNDefenderPolicy:
    """Engine-facing defender policy wrapping the trained network pair."""

    def __init__(self, drone_net: DDQNPair, ranger_net: DDQNPair,
                 eps: float = 0.0, density_mode: str = "visited_mask"):
        self.drone_net = drone_net
        self.ranger_net = ranger_net
        self.eps = eps
        self.density_mode = density_mode

    def act(self, state: GameState, grid: GridWorld, rng: np.random.Generator):
        return select_actions(
            state, grid, self.drone_net, self.ranger_net, self.eps, rng,
            self.density_mode,
        )


def q_update(pair: DDQNPair, obs, actions, rewards, next_obs, dones) -> float:
    """One minibatch Double-DQN step; syncs the target on schedule."""
    net = pair.network
    q_next_online, _ = net.forward(pair.online, next_obs)
    best = np.argmax(q_next_online, axis=1)
    q_next_target, _ = net.forward(pair.target, next_obs)
    bootstrap = q_next_target[np.arange(len(best)), best]
    targets = rewards + pair.gamma * bootstrap * (~dones)
    q, cache = net.forward(pair.online, obs)
    loss, dq = q_loss(q, actions, targets)
    grad, _ = net.backward(pair.online, cache, dq)
    pair.online, pair.adam = adam_step(pair.online, grad, pair.adam)
    pair.updates += 1
    if pair.updates % pair.sync_period == 0:
        pair.target = pair.online.copy()
    return loss


@dataclass
class PatrolResult:
    drone: DDQNPair
    ranger: DDQNPair
    metrics: list[dict] = field(default_factory=list)


def train_patrol(
    grid: GridWorld, config: GameConfig, train: PatrolTrainConfig
) -> PatrolResult:
    """Train the shared drone and ranger DDQNs against the heuristic attacker.

    Every episode starts from fresh uniform allocations. All randomness is
    drawn from named streams derived from ``train.seed``, so two runs with
    the same inputs produce identical results.
    """
    init_rng = stream(train.seed, "patrol-init")
    alloc_rng = stream(train.seed, "patrol-alloc")
    explore_rng = stream(train.seed, "patrol-explore")
    replay_rng = stream(train.seed, "patrol-replay")
    engine_rng = stream(train.seed, "patrol-engine")

    drone = make_ddqn_pair(
        grid, N_DRONE_ACTIONS, train.drone_sync, train.lr, init_rng, config.gamma
    )
    ranger = make_ddqn_pair(
        grid, N_MOVES, train.ranger_sync, train.lr, init_rng, config.gamma
    )
    drone_buf = ReplayBuffer(train.drone_buffer)
    ranger_buf = ReplayBuffer(train.ranger_buffer)
    attacker = HeuristicAttacker()
    result = PatrolResult(drone=drone, ranger=ranger)
    global_step = 0

    for episode in range(train.episodes):
        defenders = uniform_cells(grid, config.n_defenders, alloc_rng)
        attackers = uniform_cells(grid, config.n_attackers, alloc_rng)
        attacker.begin_episode(grid, defenders)
        state = init_patrol(grid, config, defenders, attackers)
        episode_reward = 0.0
        captures = 0
        losses = []
        while not is_terminal(state, config):
            eps = epsilon(
                global_step, train.eps_start, train.eps_end, train.eps_decay_steps
            )
            drone_obs = [
                encode_observation(state, grid, i, "drone", train.density_mode)
                for i in range(config.n_drones)
            ]
            ranger_obs = [
                encode_observation(state, grid, j, "ranger", train.density_mode)
                for j in range(config.n_rangers)
            ]
            drone_actions, ranger_actions = select_actions(
                state, grid, drone, ranger, eps, explore_rng, train.density_mode
            )
            attacker_actions = attacker.act(state, grid, engine_rng)
            state, outcome = step(
                state, grid, config,
                drone_actions, ranger_actions, attacker_actions, engine_rng,
            )
            done = is_terminal(state, config)
            reward = outcome.defender_reward
            episode_reward += reward
            captures += sum(1 for e in outcome.events if e["kind"] == "capture")
            for i in range(config.n_drones):
                nxt = encode_observation(state, grid, i, "drone", train.density_mode)
                drone_buf.push(drone_obs[i], drone_actions[i], reward, nxt, done)
            for j in range(config.n_rangers):
                nxt = encode_observation(state, grid, j, "ranger", train.density_mode)
                ranger_buf.push(ranger_obs[j], ranger_actions[j], reward, nxt, done)
            global_step += 1
            if len(drone_buf) >= train.learn_start and config.n_drones:
                losses.append(
                    q_update(drone, *drone_buf.sample(train.batch_size, replay_rng))
                )
            if len(ranger_buf) >= train.learn_start and config.n_rangers:
                q_update(ranger, *ranger_buf.sample(train.batch_size, replay_rng))
        result.metrics.append(
            {
                "episode": episode,
                "return": episode_reward,
                "length": state.t,
                "epsilon": epsilon(
                    global_step, train.eps_start, train.eps_end,
                    train.eps_decay_steps,
                ),
                "captures": captures,
                "drone_fill": len(drone_buf),
                "ranger_fill": len(ranger_buf),
                "loss": float(np.mean(losses)) if losses else None,
            }
        )
    return result
