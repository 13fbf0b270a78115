"""Allocation-stage learning.

Covers the pieces that decide where agents start an episode: a sampled
dataset of candidate allocations, an autoencoder that embeds them into a
low-dimensional continuous space, nearest-neighbour matching back to the
dataset, Gaussian actor-critic policies over embeddings for both sides,
and three update rules (competitive two-player update with a conjugate
gradient inner solver, plain policy gradient, and a fictitious-play
variant that replays historical opponents).
"""

from __future__ import annotations

import dataclasses
import json
import zlib

import numpy as np

from .attacker import HeuristicAttacker
from .copo import CoPOConfig, CoPODiagnostics, copo_deltas
from .engine import GameConfig, run_episode, uniform_cells
from .grid import GridWorld
from .nn import Dense, Network, Sigmoid, Tanh, adam_init, adam_step, mse_loss
from .seeding import stream

Cell = tuple[int, int]

SIDE_DEFENDER = "defender"
SIDE_ATTACKER = "attacker"
SIDES = (SIDE_DEFENDER, SIDE_ATTACKER)

CRITIC_LR = 1e-2
STD_SCALE = 0.5
STD_GATE_FLOOR = 0.05  # keeps 1/std finite when the variance head saturates

DATASET_MAGIC = b"GPAL"
DATASET_VERSION = 1

# Embedding widths for the grid sizes with published values; other sizes
# fall back to a third of the cell count (defender) or a small constant
# tied to the attacker count.
DEFENDER_EMBEDDING_DIMS = {(15, 15): 50, (10, 10): 30}


class AllocationError(ValueError):
    pass


def embedding_dim(side: str, grid: GridWorld, config: GameConfig) -> int:
    if side == SIDE_DEFENDER:
        known = DEFENDER_EMBEDDING_DIMS.get((grid.width, grid.height))
        return known if known is not None else max(4, grid.n_cells // 3)
    if side == SIDE_ATTACKER:
        return 2 if config.n_attackers == 1 else 4
    raise AllocationError(f"unknown side {side!r}")


# ---------------------------------------------------------------------------
# allocations and datasets


@dataclasses.dataclass(frozen=True)
class Allocation:
    """Role-tagged placement of one side's agents.

    For the defender side the first ``n_drones`` cells are drone cells and
    the rest ranger cells, matching the engine's ordering convention.
    """

    side: str
    cells: tuple[Cell, ...]
    n_drones: int = 0

    def __post_init__(self):
        if self.side not in SIDES:
            raise AllocationError(f"unknown side {self.side!r}")
        if not 0 <= self.n_drones <= len(self.cells):
            raise AllocationError("drone count outside the cell list")
        if self.side == SIDE_ATTACKER and self.n_drones != 0:
            raise AllocationError("attacker allocations carry no drones")

    @property
    def drone_cells(self) -> tuple[Cell, ...]:
        return self.cells[: self.n_drones]

    @property
    def ranger_cells(self) -> tuple[Cell, ...]:
        return self.cells[self.n_drones:]


@dataclasses.dataclass(frozen=True)
class AllocationDataset:
    """Sampled candidate allocations for one side, stored as cell indices."""

    side: str
    width: int
    height: int
    n_drones: int
    n_rangers: int
    n_attackers: int
    count: int
    seed: int
    cell_indices: np.ndarray  # (count, cells per record) int64

    def __post_init__(self):
        expected = (self.count, self.cells_per_record)
        if self.cell_indices.shape != expected:
            raise AllocationError(
                f"index table {self.cell_indices.shape}, expected {expected}"
            )
        self.cell_indices.setflags(write=False)

    @property
    def cells_per_record(self) -> int:
        if self.side == SIDE_DEFENDER:
            return self.n_drones + self.n_rangers
        return self.n_attackers

    def allocation(self, i: int) -> Allocation:
        if not 0 <= i < self.count:
            raise AllocationError(f"record {i} outside dataset of {self.count}")
        cells = tuple(
            (int(idx) // self.width, int(idx) % self.width)
            for idx in self.cell_indices[i]
        )
        n_drones = self.n_drones if self.side == SIDE_DEFENDER else 0
        return Allocation(self.side, cells, n_drones)


def build_allocation_dataset(
    grid: GridWorld,
    config: GameConfig,
    side: str,
    count: int = 100_000,
    seed: int = 0,
) -> AllocationDataset:
    """Sample ``count`` uniform allocations for one side.

    Cells are drawn independently, so an allocation may place several
    agents in one cell (the engine accepts that). Deterministic in the
    seed through a side-tagged stream.
    """
    if side not in SIDES:
        raise AllocationError(f"unknown side {side!r}")
    if count < 1:
        raise AllocationError("dataset needs at least one record")
    per_record = (
        config.n_drones + config.n_rangers
        if side == SIDE_DEFENDER
        else config.n_attackers
    )
    if per_record == 0:
        raise AllocationError(f"no {side} agents to allocate")
    rng = stream(seed, f"alloc-dataset-{side}")
    indices = rng.integers(0, grid.n_cells, size=(count, per_record), dtype=np.int64)
    return AllocationDataset(
        side=side,
        width=grid.width,
        height=grid.height,
        n_drones=config.n_drones,
        n_rangers=config.n_rangers,
        n_attackers=config.n_attackers,
        count=count,
        seed=seed,
        cell_indices=indices,
    )


def save_allocations(dataset: AllocationDataset, path) -> None:
    """Serialize a dataset: JSON header + fixed-width uint16 index records."""
    if dataset.width * dataset.height > 65536:
        raise AllocationError("grid too large for 16-bit cell indices")
    meta = json.dumps(
        {
            "side": dataset.side,
            "width": dataset.width,
            "height": dataset.height,
            "n_drones": dataset.n_drones,
            "n_rangers": dataset.n_rangers,
            "n_attackers": dataset.n_attackers,
            "count": dataset.count,
            "seed": dataset.seed,
        }
    ).encode()
    payload = np.ascontiguousarray(dataset.cell_indices, dtype="<u2").tobytes()
    body = (
        DATASET_MAGIC
        + DATASET_VERSION.to_bytes(2, "little")
        + len(meta).to_bytes(4, "little")
        + meta
        + len(payload).to_bytes(8, "little")
        + payload
    )
    crc = zlib.crc32(body).to_bytes(4, "little")
    with open(path, "wb") as fh:
        fh.write(body + crc)


def load_allocations(path) -> AllocationDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(DATASET_MAGIC) + 2 + 4 + 8 + 4:
        raise AllocationError("dataset file truncated")
    body, crc = blob[:-4], blob[-4:]
    if zlib.crc32(body).to_bytes(4, "little") != crc:
        raise AllocationError("dataset checksum mismatch")
    if not body.startswith(DATASET_MAGIC):
        raise AllocationError("not an allocation dataset file")
    cursor = len(DATASET_MAGIC)
    version = int.from_bytes(body[cursor:cursor + 2], "little")
    if version != DATASET_VERSION:
        raise AllocationError(f"unsupported dataset version {version}")
    cursor += 2
    meta_len = int.from_bytes(body[cursor:cursor + 4], "little")
    cursor += 4
    meta = json.loads(body[cursor:cursor + meta_len].decode())
    cursor += meta_len
    payload_len = int.from_bytes(body[cursor:cursor + 8], "little")
    cursor += 8
    payload = body[cursor:cursor + payload_len]
    if len(payload) != payload_len:
        raise AllocationError("dataset payload truncated")
    indices = np.frombuffer(payload, dtype="<u2").astype(np.int64)
    side = meta["side"]
    per_record = (
        meta["n_drones"] + meta["n_rangers"]
        if side == SIDE_DEFENDER
        else meta["n_attackers"]
    )
    return AllocationDataset(
        side=side,
        width=meta["width"],
        height=meta["height"],
        n_drones=meta["n_drones"],
        n_rangers=meta["n_rangers"],
        n_attackers=meta["n_attackers"],
        count=meta["count"],
        seed=meta["seed"],
        cell_indices=indices.reshape(meta["count"], per_record),
    )


def allocation_to_vector(allocation: Allocation, grid: GridWorld) -> np.ndarray:
    """Occupancy-count representation: per-role grids, flattened.

    Defender allocations become a drone grid followed by a ranger grid
    (2*W*H entries); attacker allocations a single grid (W*H). Entries
    count agents, so co-located agents produce values above 1.
    """
    for cell in allocation.cells:
        if not grid.contains(cell):
            raise AllocationError(f"cell {cell} outside grid")
    if allocation.side == SIDE_DEFENDER:
        role_groups = [allocation.drone_cells, allocation.ranger_cells]
    else:
        role_groups = [allocation.cells]
    parts = []
    for cells in role_groups:
        occupancy = np.zeros(grid.n_cells)
        for cell in cells:
            occupancy[grid.cell_index(cell)] += 1.0
        parts.append(occupancy)
    return np.concatenate(parts)


def dataset_vectors(dataset: AllocationDataset, dtype=np.float64) -> np.ndarray:
    """Occupancy vectors for every record, as one (count, dim) matrix."""
    n_cells = dataset.width * dataset.height
    rows = np.arange(dataset.count)
    if dataset.side == SIDE_DEFENDER:
        out = np.zeros((dataset.count, 2 * n_cells), dtype=dtype)
        drone_part = dataset.cell_indices[:, : dataset.n_drones]
        ranger_part = dataset.cell_indices[:, dataset.n_drones:]
        for j in range(drone_part.shape[1]):
            np.add.at(out, (rows, drone_part[:, j]), 1.0)
        for j in range(ranger_part.shape[1]):
            np.add.at(out, (rows, n_cells + ranger_part[:, j]), 1.0)
    else:
        out = np.zeros((dataset.count, n_cells), dtype=dtype)
        for j in range(dataset.cell_indices.shape[1]):
            np.add.at(out, (rows, dataset.cell_indices[:, j]), 1.0)
    return out


# ---------------------------------------------------------------------------
# autoencoder embeddings


@dataclasses.dataclass
class Autoencoder:
    encoder: Network
    decoder: Network
    encoder_params: np.ndarray
    decoder_params: np.ndarray
    k: int
    start_loss: float
    final_loss: float
    heldout_loss: float


def autoencoder_networks(dim: int, k: int) -> tuple[Network, Network]:
    """Encoder dense->tanh down to k, decoder dense back up."""
    encoder = Network((dim,), [Dense(dim, k), Tanh()])
    decoder = Network((k,), [Dense(k, dim)])
    return encoder, decoder


def reconstruction_loss(
    encoder: Network, decoder: Network,
    enc_params: np.ndarray, dec_params: np.ndarray,
    vectors: np.ndarray,
) -> float:
    z, _ = encoder.forward(enc_params, vectors)
    recon, _ = decoder.forward(dec_params, z)
    return mse_loss(recon, vectors)[0]


def train_autoencoder(
    vectors: np.ndarray,
    k: int,
    seed: int = 0,
    epochs: int = 30,
    batch_size: int = 256,
    lr: float = 1e-3,
    holdout_fraction: float = 0.1,
) -> Autoencoder:
    """Fit the two-layer autoencoder by minibatch Adam on squared error.

    Returns the trained pair plus the training-start loss, the final
    training loss, and the loss on a held-out slice.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise AllocationError("training matrix must be (count, dim) and non-empty")
    n, dim = vectors.shape
    if not 1 <= k:
        raise AllocationError("embedding width must be positive")
    rng = stream(seed, "autoencoder")
    order = rng.permutation(n)
    n_hold = int(round(holdout_fraction * n)) if n > 1 else 0
    hold = vectors[order[:n_hold]]
    train = vectors[order[n_hold:]]

    encoder, decoder = autoencoder_networks(dim, k)
    enc_params = encoder.init(rng)
    dec_params = decoder.init(rng)
    enc_adam = adam_init(encoder.n_params, lr)
    dec_adam = adam_init(decoder.n_params, lr)

    start_loss = reconstruction_loss(encoder, decoder, enc_params, dec_params, train)
    n_train = train.shape[0]
    for _ in range(epochs):
        perm = rng.permutation(n_train)
        for lo in range(0, n_train, batch_size):
            batch = train[perm[lo:lo + batch_size]]
            z, enc_cache = encoder.forward(enc_params, batch)
            recon, dec_cache = decoder.forward(dec_params, z)
            _, dloss = mse_loss(recon, batch)
            dec_grad, dz = decoder.backward(dec_params, dec_cache, dloss)
            enc_grad, _ = encoder.backward(enc_params, enc_cache, dz)
            enc_params, enc_adam = adam_step(enc_params, enc_grad, enc_adam)
            dec_params, dec_adam = adam_step(dec_params, dec_grad, dec_adam)

    final_loss = reconstruction_loss(encoder, decoder, enc_params, dec_params, train)
    heldout_loss = (
        reconstruction_loss(encoder, decoder, enc_params, dec_params, hold)
        if n_hold
        else final_loss
    )
    return Autoencoder(
        encoder=encoder,
        decoder=decoder,
        encoder_params=enc_params,
        decoder_params=dec_params,
        k=k,
        start_loss=start_loss,
        final_loss=final_loss,
        heldout_loss=heldout_loss,
    )


def encode(autoencoder: Autoencoder, vectors: np.ndarray) -> np.ndarray:
    """Embed one vector or a batch of vectors."""
    arr = np.asarray(vectors, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None]
    z, _ = autoencoder.encoder.forward(autoencoder.encoder_params, arr)
    return z[0] if single else z


@dataclasses.dataclass
class AllocationSpace:
    """A dataset with its trained embedding table, ready for matching."""

    dataset: AllocationDataset
    autoencoder: Autoencoder
    embeddings: np.ndarray  # (count, k)


def build_allocation_space(
    grid: GridWorld,
    config: GameConfig,
    side: str,
    count: int = 100_000,
    seed: int = 0,
    k: int | None = None,
    epochs: int = 30,
    batch_size: int = 256,
    lr: float = 1e-3,
) -> AllocationSpace:
    dataset = build_allocation_dataset(grid, config, side, count, seed)
    vectors = dataset_vectors(dataset)
    if k is None:
        k = embedding_dim(side, grid, config)
    autoencoder = train_autoencoder(
        vectors, k, seed=seed, epochs=epochs, batch_size=batch_size, lr=lr
    )
    embeddings = encode(autoencoder, vectors)
    return AllocationSpace(dataset=dataset, autoencoder=autoencoder,
                           embeddings=embeddings)


def nearest_index(
    query: np.ndarray, embeddings: np.ndarray, metric: str = "cosine"
) -> int:
    """Index of the best-matching embedding row; ties go to the lowest index.

    Cosine similarity by default; squared euclidean distance behind the
    ``sqdist`` flag. A zero-norm query has no cosine direction and is an
    error; zero-norm table rows simply never win.
    """
    q = np.asarray(query, dtype=np.float64).ravel()
    if embeddings.ndim != 2 or embeddings.shape[1] != q.size:
        raise AllocationError(
            f"query of size {q.size} against table {embeddings.shape}"
        )
    if metric == "cosine":
        q_norm = np.linalg.norm(q)
        if q_norm == 0.0:
            raise AllocationError("zero-norm query has no cosine similarity")
        row_norms = np.linalg.norm(embeddings, axis=1)
        dots = embeddings @ q
        with np.errstate(divide="ignore", invalid="ignore"):
            sims = np.where(row_norms > 0.0, dots / (row_norms * q_norm), -np.inf)
        return int(np.argmax(sims))
    if metric == "sqdist":
        distances = np.sum((embeddings - q) ** 2, axis=1)
        return int(np.argmin(distances))
    raise AllocationError(f"unknown metric {metric!r}")


def nearest_allocation(
    query: np.ndarray, space: AllocationSpace, metric: str = "cosine"
) -> Allocation:
    return space.dataset.allocation(nearest_index(query, space.embeddings, metric))


# ---------------------------------------------------------------------------
# Gaussian allocation policies


@dataclasses.dataclass
class GaussianAllocationPolicy:
    """Actor-critic over the embedding space, conditioned on the density map.

    The actor is one parameter vector holding a shared tanh trunk, a tanh
    mean head, and a sigmoid variance head; the head's output, floored at
    ``STD_GATE_FLOOR`` and scaled by ``std_scale``, is the standard
    deviation. The floor keeps the score finite when the head saturates.
    The critic is a separate tanh network with a linear scalar head.
    """

    k: int
    state_dim: int
    hidden: int
    std_scale: float
    trunk: Network
    mean_head: Network
    var_head: Network
    critic: Network
    params: np.ndarray
    critic_params: np.ndarray

    @property
    def n_params(self) -> int:
        return self.trunk.n_params + self.mean_head.n_params + self.var_head.n_params

    def split_params(self, params: np.ndarray):
        a = self.trunk.n_params
        b = a + self.mean_head.n_params
        if params.shape != (self.n_params,):
            raise AllocationError(
                f"actor vector of {params.shape}, expected ({self.n_params},)"
            )
        return params[:a], params[a:b], params[b:]


def make_allocation_policy(
    state_dim: int,
    k: int,
    rng: np.random.Generator,
    hidden: int = 64,
    std_scale: float = STD_SCALE,
) -> GaussianAllocationPolicy:
    if std_scale <= 0.0:
        raise AllocationError("standard-deviation scale must be positive")
    trunk = Network((state_dim,), [Dense(state_dim, hidden), Tanh()])
    mean_head = Network((hidden,), [Dense(hidden, k), Tanh()])
    var_head = Network((hidden,), [Dense(hidden, k), Sigmoid()])
    critic = Network(
        (state_dim,), [Dense(state_dim, hidden), Tanh(), Dense(hidden, 1)]
    )
    params = np.concatenate([trunk.init(rng), mean_head.init(rng), var_head.init(rng)])
    return GaussianAllocationPolicy(
        k=k,
        state_dim=state_dim,
        hidden=hidden,
        std_scale=std_scale,
        trunk=trunk,
        mean_head=mean_head,
        var_head=var_head,
        critic=critic,
        params=params,
        critic_params=critic.init(rng),
    )


def _state_row(policy: GaussianAllocationPolicy, state: np.ndarray) -> np.ndarray:
    row = np.asarray(state, dtype=np.float64).ravel()
    if row.size != policy.state_dim:
        raise AllocationError(
            f"state of size {row.size}, policy expects {policy.state_dim}"
        )
    return row[None]


def policy_moments(
    policy: GaussianAllocationPolicy, state: np.ndarray, params: np.ndarray = None
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard deviation of the embedding distribution at a state."""
    if params is None:
        params = policy.params
    p_trunk, p_mean, p_var = policy.split_params(params)
    row = _state_row(policy, state)
    h, _ = policy.trunk.forward(p_trunk, row)
    mean, _ = policy.mean_head.forward(p_mean, h)
    gate, _ = policy.var_head.forward(p_var, h)
    std = policy.std_scale * (STD_GATE_FLOOR + (1.0 - STD_GATE_FLOOR) * gate[0])
    return mean[0], std


def log_density_and_score(
    policy: GaussianAllocationPolicy,
    state: np.ndarray,
    embedding: np.ndarray,
    params: np.ndarray = None,
) -> tuple[float, np.ndarray]:
    """Gaussian log density of an embedding and its actor-parameter gradient."""
    if params is None:
        params = policy.params
    p_trunk, p_mean, p_var = policy.split_params(params)
    row = _state_row(policy, state)
    h, trunk_cache = policy.trunk.forward(p_trunk, row)
    mean, mean_cache = policy.mean_head.forward(p_mean, h)
    gate, var_cache = policy.var_head.forward(p_var, h)
    mean = mean[0]
    std = policy.std_scale * (STD_GATE_FLOOR + (1.0 - STD_GATE_FLOOR) * gate[0])
    e = np.asarray(embedding, dtype=np.float64)
    if e.shape != mean.shape:
        raise AllocationError(f"embedding {e.shape}, policy has k={policy.k}")
    diff = e - mean
    logp = float(
        -0.5 * np.sum(diff ** 2 / std ** 2)
        - np.sum(np.log(std))
        - 0.5 * policy.k * np.log(2.0 * np.pi)
    )
    dmean = diff / std ** 2
    dstd = diff ** 2 / std ** 3 - 1.0 / std
    dgate = policy.std_scale * (1.0 - STD_GATE_FLOOR) * dstd
    g_mean, dh_mean = policy.mean_head.backward(p_mean, mean_cache, dmean[None])
    g_var, dh_var = policy.var_head.backward(p_var, var_cache, dgate[None])
    g_trunk, _ = policy.trunk.backward(p_trunk, trunk_cache, dh_mean + dh_var)
    return logp, np.concatenate([g_trunk, g_mean, g_var])


def sample_embedding(
    policy: GaussianAllocationPolicy, state: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw e ~ N(mean(s), diag(std(s)^2)); returns (e, score vector).

    The score is the gradient of log pi(e|s) in the actor parameters,
    cached here for the update estimators.
    """
    mean, std = policy_moments(policy, state)
    e = mean + std * rng.standard_normal(policy.k)
    _, score = log_density_and_score(policy, state, e)
    return e, score


def state_value(
    policy: GaussianAllocationPolicy, state: np.ndarray,
    critic_params: np.ndarray = None,
) -> float:
    if critic_params is None:
        critic_params = policy.critic_params
    out, _ = policy.critic.forward(critic_params, _state_row(policy, state))
    return float(out[0, 0])


def critic_step(
    policy: GaussianAllocationPolicy,
    states: list[np.ndarray],
    targets: list[float],
    lr: float = CRITIC_LR,
) -> np.ndarray:
    """One full-batch gradient-descent step on squared value error."""
    if not states:
        raise AllocationError("critic update needs at least one sample")
    x = np.stack([_state_row(policy, s)[0] for s in states])
    y = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    pred, cache = policy.critic.forward(policy.critic_params, x)
    _, dloss = mse_loss(pred, y)
    grad, _ = policy.critic.backward(policy.critic_params, cache, dloss)
    return policy.critic_params - lr * grad


# ---------------------------------------------------------------------------
# update rules


@dataclasses.dataclass
class CoPOTerms:
    """Monte Carlo estimates feeding the two-player update.

    ``g_d`` ascends the defender payoff; ``g_a`` is the attacker's own
    ascent direction (its payoff is the negation). The bilinear operator
    applies the estimated mixed second-derivative block without ever
    materializing the matrix.
    """

    score_d: np.ndarray  # (n_s, P_d)
    score_a: np.ndarray  # (n_s, P_a)
    advantage: np.ndarray  # (n_s,)
    g_d: np.ndarray
    g_a: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.advantage.size

    def hvp_da(self, v: np.ndarray) -> np.ndarray:
        weighted = (self.score_a @ v) * self.advantage
        return self.score_d.T @ weighted / self.n_samples

    def hvp_ad(self, v: np.ndarray) -> np.ndarray:
        weighted = (self.score_d @ v) * self.advantage
        return self.score_a.T @ weighted / self.n_samples


def estimate_copo_terms(samples: list[tuple]) -> CoPOTerms:
    """Build gradient and curvature estimates from (score_d, score_a, A) tuples.

    A is the defender-payoff advantage R^d - critic(s). The zero-sum model
    fixes the attacker's gradient as the mean of score_a times -A.
    """
    if not samples:
        raise AllocationError("estimator needs at least one sample")
    score_d = np.stack([np.asarray(s[0], dtype=np.float64) for s in samples])
    score_a = np.stack([np.asarray(s[1], dtype=np.float64) for s in samples])
    advantage = np.array([float(s[2]) for s in samples])
    g_d = score_d.T @ advantage / advantage.size
    g_a = score_a.T @ (-advantage) / advantage.size
    return CoPOTerms(
        score_d=score_d, score_a=score_a, advantage=advantage, g_d=g_d, g_a=g_a
    )


def copo_update(
    policy_d: GaussianAllocationPolicy,
    policy_a: GaussianAllocationPolicy,
    terms: CoPOTerms,
    copo_config: CoPOConfig,
) -> tuple[GaussianAllocationPolicy, GaussianAllocationPolicy, CoPODiagnostics]:
    """Apply the competitive update to both actors.

    The inner solver works on gradients of the defender payoff for both
    players, so the attacker's own-ascent estimate is negated on the way
    in; the returned attacker delta already descends the defender payoff.
    """
    delta_d, delta_a, diagnostics = copo_deltas(
        terms.g_d,
        -terms.g_a,
        terms.hvp_da,
        terms.hvp_ad,
        copo_config.alpha,
        copo_config.cg_iters,
        copo_config.cg_tol,
    )
    new_d = dataclasses.replace(policy_d, params=policy_d.params + delta_d)
    new_a = dataclasses.replace(policy_a, params=policy_a.params + delta_a)
    return new_d, new_a, diagnostics


def pg_update(
    policy: GaussianAllocationPolicy,
    samples: list[tuple],
    lr: float,
    critic_lr: float = CRITIC_LR,
) -> GaussianAllocationPolicy:
    """Independent score-function ascent on (state, score, payoff) samples.

    Advantages subtract the current critic value; the critic then takes
    one squared-error step toward the raw payoffs.
    """
    if not samples:
        raise AllocationError("policy gradient needs at least one sample")
    states = [s[0] for s in samples]
    scores = np.stack([np.asarray(s[1], dtype=np.float64) for s in samples])
    payoffs = np.array([float(s[2]) for s in samples])
    advantages = payoffs - np.array([state_value(policy, s) for s in states])
    step = lr * scores.T @ advantages / advantages.size
    new_critic = critic_step(policy, states, list(payoffs), critic_lr)
    return dataclasses.replace(
        policy, params=policy.params + step, critic_params=new_critic
    )


@dataclasses.dataclass
class OpponentMemory:
    """Historical allocation embeddings either side has committed to."""

    defender: list = dataclasses.field(default_factory=list)
    attacker: list = dataclasses.field(default_factory=list)


def optgradfp_update(
    policy_d: GaussianAllocationPolicy,
    policy_a: GaussianAllocationPolicy,
    memory: OpponentMemory,
    payoff,
    state: np.ndarray,
    n_samples: int,
    lr: float,
    rng: np.random.Generator,
) -> tuple[GaussianAllocationPolicy, GaussianAllocationPolicy]:
    """Fictitious-play style update: fresh samples against replayed opponents.

    ``payoff(e_d, e_a)`` returns the defender return of one rollout. Each
    side plays n_samples fresh embeddings against uniform draws from the
    opponent's memory, takes a policy-gradient step, then appends its
    fresh embeddings to its own side of the memory (which therefore grows
    by n_samples per side per call). An empty memory is seeded from the
    current policies first.
    """
    if n_samples < 1:
        raise AllocationError("need at least one sample per update")
    if not memory.defender or not memory.attacker:
        for _ in range(n_samples):
            e_d, _ = sample_embedding(policy_d, state, rng)
            e_a, _ = sample_embedding(policy_a, state, rng)
            memory.defender.append(e_d)
            memory.attacker.append(e_a)

    fresh_d, samples_d = [], []
    for _ in range(n_samples):
        e_d, score_d = sample_embedding(policy_d, state, rng)
        opponent = memory.attacker[int(rng.integers(len(memory.attacker)))]
        samples_d.append((state, score_d, payoff(e_d, opponent)))
        fresh_d.append(e_d)
    fresh_a, samples_a = [], []
    for _ in range(n_samples):
        e_a, score_a = sample_embedding(policy_a, state, rng)
        opponent = memory.defender[int(rng.integers(len(memory.defender)))]
        samples_a.append((state, score_a, -payoff(opponent, e_a)))
        fresh_a.append(e_a)

    new_d = pg_update(policy_d, samples_d, lr)
    new_a = pg_update(policy_a, samples_a, lr)
    memory.defender.extend(fresh_d)
    memory.attacker.extend(fresh_a)
    return new_d, new_a


# ---------------------------------------------------------------------------
# allocation-stage training drivers


@dataclasses.dataclass
class AllocationTrainResult:
    algo: str
    policy_d: GaussianAllocationPolicy
    policy_a: GaussianAllocationPolicy
    curves: list[dict]
    converged_at: int | None


def allocation_episode(
    grid: GridWorld,
    config: GameConfig,
    patrol_policy,
    alloc_d: Allocation,
    alloc_a: Allocation,
    rng: np.random.Generator,
) -> float:
    """One patrolling-stage rollout from fixed allocations; defender return.

    The attacker heuristic starts fresh each episode so the payoff of an
    allocation pair is stationary across training.
    """
    attacker = HeuristicAttacker()
    attacker.begin_episode(grid, list(alloc_d.cells))
    record = run_episode(
        grid, config, patrol_policy, attacker,
        list(alloc_d.cells), list(alloc_a.cells), rng,
    )
    return record.defender_return


def make_payoff(grid, config, patrol_policy, space_d, space_a, rng, metric="cosine"):
    """Embedding-level payoff oracle used by the baseline trainers."""

    def payoff(e_d, e_a):
        alloc_d = nearest_allocation(e_d, space_d, metric)
        alloc_a = nearest_allocation(e_a, space_a, metric)
        return allocation_episode(grid, config, patrol_policy, alloc_d, alloc_a, rng)

    return payoff


def _init_policies(grid, config, space_d, space_a, seed, hidden, std_scale):
    rng_d = stream(seed, "alloc-policy-defender")
    rng_a = stream(seed, "alloc-policy-attacker")
    policy_d = make_allocation_policy(
        grid.n_cells, space_d.autoencoder.k, rng_d, hidden, std_scale
    )
    policy_a = make_allocation_policy(
        grid.n_cells, space_a.autoencoder.k, rng_a, hidden, std_scale
    )
    return policy_d, policy_a


def _plateaued(history: list[float], window: int, tol: float) -> bool:
    if len(history) < 2 * window:
        return False
    recent = float(np.mean(history[-window:]))
    previous = float(np.mean(history[-2 * window:-window]))
    return abs(recent - previous) < tol * max(1.0, abs(previous))


def combsgpo(
    grid: GridWorld,
    config: GameConfig,
    patrol_policy,
    space_d: AllocationSpace,
    space_a: AllocationSpace,
    copo_config: CoPOConfig,
    iters: int,
    seed: int = 0,
    hidden: int = 64,
    std_scale: float = STD_SCALE,
    metric: str = "cosine",
    plateau_window: int = 50,
    plateau_tol: float = 0.01,
    stop_on_plateau: bool = True,
) -> AllocationTrainResult:
    """Competitive self-play over allocation embeddings.

    Per iteration: draw n_samples embedding pairs, match each to dataset
    allocations, roll out the patrolling stage under the frozen patrol
    policy, and apply the competitive update to both actors plus one
    critic step each. Convergence is a moving-average plateau of the mean
    defender return (window ``plateau_window``, relative change below
    ``plateau_tol``).
    """
    policy_d, policy_a = _init_policies(
        grid, config, space_d, space_a, seed, hidden, std_scale
    )
    sample_rng = stream(seed, "alloc-sample")
    episode_rng = stream(seed, "alloc-episode")
    state = grid.density
    curves: list[dict] = []
    means: list[float] = []
    converged_at = None
    for iteration in range(iters):
        samples, returns_d, returns_a = [], [], []
        for _ in range(copo_config.n_samples):
            e_d, score_d = sample_embedding(policy_d, state, sample_rng)
            e_a, score_a = sample_embedding(policy_a, state, sample_rng)
            alloc_d = nearest_allocation(e_d, space_d, metric)
            alloc_a = nearest_allocation(e_a, space_a, metric)
            r_d = allocation_episode(
                grid, config, patrol_policy, alloc_d, alloc_a, episode_rng
            )
            returns_d.append(r_d)
            returns_a.append(-r_d)
            samples.append((score_d, score_a, r_d - state_value(policy_d, state)))
        terms = estimate_copo_terms(samples)
        policy_d, policy_a, diagnostics = copo_update(
            policy_d, policy_a, terms, copo_config
        )
        policy_d = dataclasses.replace(
            policy_d,
            critic_params=critic_step(
                policy_d, [state] * len(returns_d), returns_d
            ),
        )
        policy_a = dataclasses.replace(
            policy_a,
            critic_params=critic_step(
                policy_a, [state] * len(returns_a), returns_a
            ),
        )
        mean_rd = float(np.mean(returns_d))
        means.append(mean_rd)
        curves.append(
            {
                "iteration": iteration,
                "mean_rd": mean_rd,
                "mean_ra": float(np.mean(returns_a)),
                "g_d_norm": float(np.linalg.norm(terms.g_d)),
                "g_a_norm": float(np.linalg.norm(terms.g_a)),
                "residual_d": diagnostics.residual_d,
                "residual_a": diagnostics.residual_a,
                "fallback": diagnostics.fallback,
            }
        )
        if converged_at is None and _plateaued(means, plateau_window, plateau_tol):
            converged_at = iteration
        if converged_at is not None and stop_on_plateau:
            break
    return AllocationTrainResult(
        algo="combsgpo",
        policy_d=policy_d,
        policy_a=policy_a,
        curves=curves,
        converged_at=converged_at,
    )


def pg_selfplay(
    grid: GridWorld,
    config: GameConfig,
    patrol_policy,
    space_d: AllocationSpace,
    space_a: AllocationSpace,
    iters: int,
    lr: float,
    n_samples: int = 10,
    seed: int = 0,
    hidden: int = 64,
    std_scale: float = STD_SCALE,
    metric: str = "cosine",
    plateau_window: int = 50,
    plateau_tol: float = 0.01,
    stop_on_plateau: bool = False,
) -> AllocationTrainResult:
    """Both sides independently ascend their own payoff by policy gradient."""
    policy_d, policy_a = _init_policies(
        grid, config, space_d, space_a, seed, hidden, std_scale
    )
    sample_rng = stream(seed, "alloc-sample")
    episode_rng = stream(seed, "alloc-episode")
    state = grid.density
    curves: list[dict] = []
    means: list[float] = []
    converged_at = None
    for iteration in range(iters):
        samples_d, samples_a, returns_d = [], [], []
        for _ in range(n_samples):
            e_d, score_d = sample_embedding(policy_d, state, sample_rng)
            e_a, score_a = sample_embedding(policy_a, state, sample_rng)
            alloc_d = nearest_allocation(e_d, space_d, metric)
            alloc_a = nearest_allocation(e_a, space_a, metric)
            r_d = allocation_episode(
                grid, config, patrol_policy, alloc_d, alloc_a, episode_rng
            )
            returns_d.append(r_d)
            samples_d.append((state, score_d, r_d))
            samples_a.append((state, score_a, -r_d))
        step_d = lr * np.mean(
            [s[1] * (s[2] - state_value(policy_d, state)) for s in samples_d], axis=0
        )
        step_a = lr * np.mean(
            [s[1] * (s[2] - state_value(policy_a, state)) for s in samples_a], axis=0
        )
        policy_d = pg_update(policy_d, samples_d, lr)
        policy_a = pg_update(policy_a, samples_a, lr)
        curves.append(
            {
                "iteration": iteration,
                "mean_rd": float(np.mean(returns_d)),
                "mean_ra": float(-np.mean(returns_d)),
                "g_d_norm": float(np.linalg.norm(step_d) / lr),
                "g_a_norm": float(np.linalg.norm(step_a) / lr),
                "residual_d": 0.0,
                "residual_a": 0.0,
                "fallback": False,
            }
        )
        means.append(float(np.mean(returns_d)))
        if converged_at is None and _plateaued(means, plateau_window, plateau_tol):
            converged_at = iteration
        if converged_at is not None and stop_on_plateau:
            break
    return AllocationTrainResult(
        algo="pg",
        policy_d=policy_d,
        policy_a=policy_a,
        curves=curves,
        converged_at=converged_at,
    )


def optgradfp(
    grid: GridWorld,
    config: GameConfig,
    patrol_policy,
    space_d: AllocationSpace,
    space_a: AllocationSpace,
    iters: int,
    lr: float,
    n_samples: int = 10,
    seed: int = 0,
    hidden: int = 64,
    std_scale: float = STD_SCALE,
    metric: str = "cosine",
    plateau_window: int = 50,
    plateau_tol: float = 0.01,
    stop_on_plateau: bool = False,
) -> AllocationTrainResult:
    """Fictitious-play baseline: gradient steps against historical opponents."""
    policy_d, policy_a = _init_policies(
        grid, config, space_d, space_a, seed, hidden, std_scale
    )
    sample_rng = stream(seed, "alloc-sample")
    episode_rng = stream(seed, "alloc-episode")
    state = grid.density
    payoff = make_payoff(
        grid, config, patrol_policy, space_d, space_a, episode_rng, metric
    )
    memory = OpponentMemory()
    curves: list[dict] = []
    means: list[float] = []
    converged_at = None
    for iteration in range(iters):
        policy_d, policy_a = optgradfp_update(
            policy_d, policy_a, memory, payoff, state, n_samples, lr, sample_rng
        )
        # probe the current pair for the learning curve
        probe_d, _ = sample_embedding(policy_d, state, sample_rng)
        probe_a, _ = sample_embedding(policy_a, state, sample_rng)
        r_d = payoff(probe_d, probe_a)
        curves.append(
            {
                "iteration": iteration,
                "mean_rd": r_d,
                "mean_ra": -r_d,
                "g_d_norm": 0.0,
                "g_a_norm": 0.0,
                "residual_d": 0.0,
                "residual_a": 0.0,
                "fallback": False,
            }
        )
        means.append(r_d)
        if converged_at is None and _plateaued(means, plateau_window, plateau_tol):
            converged_at = iteration
        if converged_at is not None and stop_on_plateau:
            break
    return AllocationTrainResult(
        algo="optgradfp",
        policy_d=policy_d,
        policy_a=policy_a,
        curves=curves,
        converged_at=converged_at,
    )


def sampled_allocation(
    policy: GaussianAllocationPolicy,
    space: AllocationSpace,
    state: np.ndarray,
    rng: np.random.Generator,
    metric: str = "cosine",
) -> Allocation:
    """Draw an embedding from the policy and match it to the dataset."""
    e, _ = sample_embedding(policy, state, rng)
    return nearest_allocation(e, space, metric)


def random_allocation(
    grid: GridWorld, config: GameConfig, side: str, rng: np.random.Generator
) -> Allocation:
    """Uniform allocation baseline for one side."""
    if side == SIDE_DEFENDER:
        n = config.n_drones + config.n_rangers
        n_drones = config.n_drones
    elif side == SIDE_ATTACKER:
        n = config.n_attackers
        n_drones = 0
    else:
        raise AllocationError(f"unknown side {side!r}")
    cells = tuple(uniform_cells(grid, n, rng))
    return Allocation(side, cells, n_drones)
