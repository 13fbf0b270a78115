"""Experiment harness: evaluation, attack maps, sweeps, timing, and traces.

Everything here sits above the trainers.  The harness owns run metadata
(run records, metric CSVs, checkpoints) and the measurement protocols:
Monte Carlo evaluation of a policy bundle, attack-frequency heatmaps,
uncertainty sweeps that retrain per noise level, wall-clock timing of the
allocation trainers, and episode traces that can be re-verified offline.

Determinism contract: every randomized routine draws from named streams
off an explicit seed, so a fixed (config, seed) pair reproduces metric
files byte for byte.  Wall-clock figures are kept out of metric rows for
that reason.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime
import json
import time

import numpy as np

from .allocation import (
    SIDE_ATTACKER,
    SIDE_DEFENDER,
    Allocation,
    AllocationSpace,
    AllocationTrainResult,
    Autoencoder,
    GaussianAllocationPolicy,
    autoencoder_networks,
    build_allocation_space,
    combsgpo,
    dataset_vectors,
    encode,
    optgradfp,
    pg_selfplay,
    random_allocation,
    sampled_allocation,
)
from .attacker import HeuristicAttacker
from .config import ConfigError, ExperimentConfig
from .copo import CoPOConfig
from .engine import EpisodeRecord, GameConfig, reward_accounting, run_episode
from .grid import GridWorld
from .nn import LayoutEntry, load_params, save_params
from .patrol import DDQNDefenderPolicy, DDQNPair, PatrolResult, train_patrol
from .seeding import stream


class HarnessError(RuntimeError):
    """Raised for invalid harness arguments or a failed trace verification."""


TRACE_VERSION = 1
DEFAULT_SWEEP_LEVELS = ((0.0, 0.0), (0.25, 0.25), (0.75, 0.75))


# ---------------------------------------------------------------------------
# allocation samplers

def policy_sampler(policy, space, grid, metric="cosine"):
    """Sampler drawing allocations from a trained embedding policy."""
    state = grid.density

    def sample(rng):
        return sampled_allocation(policy, space, state, rng, metric)

    return sample


def random_sampler(grid, config, side):
    """Sampler drawing uniform allocations for one side."""

    def sample(rng):
        return random_allocation(grid, config, side, rng)

    return sample


def fixed_sampler(allocation: Allocation):
    """Sampler that always returns the same allocation."""

    def sample(rng):
        return allocation

    return sample


def _rollout(grid, config, patrol_policy, defender_sampler, attacker_sampler, rng):
    """One full patrolling episode from freshly sampled allocations."""
    alloc_d = defender_sampler(rng)
    alloc_a = attacker_sampler(rng)
    attacker = HeuristicAttacker()
    attacker.begin_episode(grid, list(alloc_d.cells))
    return run_episode(
        grid, config, patrol_policy, attacker,
        list(alloc_d.cells), list(alloc_a.cells), rng,
    )


# ---------------------------------------------------------------------------
# evaluation

@dataclasses.dataclass
class EvalReport:
    """Monte Carlo estimate of the defender's episode return."""

    mean: float
    std: float
    n_episodes: int
    rows: list[dict]
    captures: int
    attacks: int
    fled: int
    detections: int

    @property
    def returns(self) -> np.ndarray:
        return np.array([row["return"] for row in self.rows], dtype=np.float64)

    @property
    def se(self) -> float:
        return self.std / np.sqrt(self.n_episodes) if self.n_episodes else 0.0


def evaluate(
    grid: GridWorld,
    config: GameConfig,
    patrol_policy,
    defender_sampler,
    attacker_sampler,
    n_episodes: int = 150,
    seed: int = 0,
    record_hook=None,
) -> EvalReport:
    """Roll out fresh allocation draws and report mean and spread of R^d.

    ``record_hook(episode_index, record)`` is called with every finished
    episode, so callers can export traces without re-simulating.  The
    reported mean is the arithmetic mean of the per-episode rows; std uses
    the n-1 denominator.
    """
    if n_episodes < 1:
        raise HarnessError("n_episodes must be >= 1")
    rng = stream(seed, "eval")
    rows: list[dict] = []
    captures = attacks = fled = detections = 0
    for episode in range(n_episodes):
        record = _rollout(
            grid, config, patrol_policy, defender_sampler, attacker_sampler, rng
        )
        ep_captures = record.count_events("capture")
        ep_attacks = record.count_events("attack")
        ep_fled = record.count_events("flee")
        ep_detections = record.count_events("detection")
        captures += ep_captures
        attacks += ep_attacks
        fled += ep_fled
        detections += ep_detections
        rows.append(
            {
                "episode": episode,
                "return": record.defender_return,
                "length": record.length,
                "captures": ep_captures,
                "attacks": ep_attacks,
                "fled": ep_fled,
                "detections": ep_detections,
            }
        )
        if record_hook is not None:
            record_hook(episode, record)
    returns = [row["return"] for row in rows]
    mean = float(np.mean(returns))
    std = float(np.std(returns, ddof=1)) if n_episodes > 1 else 0.0
    return EvalReport(
        mean=mean,
        std=std,
        n_episodes=n_episodes,
        rows=rows,
        captures=captures,
        attacks=attacks,
        fled=fled,
        detections=detections,
    )


def pooled_se(report_a: EvalReport, report_b: EvalReport) -> float:
    """Standard error of the difference between two report means."""
    return float(
        np.sqrt(
            report_a.std ** 2 / report_a.n_episodes
            + report_b.std ** 2 / report_b.n_episodes
        )
    )


# ---------------------------------------------------------------------------
# attack heatmap

@dataclasses.dataclass
class HeatmapResult:
    """Per-cell attack counts accumulated over simulated games."""

    counts: np.ndarray  # (height, width) int64
    n_samples: int
    n_attacks: int


def attack_heatmap(
    grid: GridWorld,
    config: GameConfig,
    patrol_policy,
    defender_sampler,
    attacker_sampler,
    n_samples: int = 100,
    seed: int = 0,
) -> HeatmapResult:
    """Count where attacks land across ``n_samples`` sampled games.

    Every attack event increments its cell, so the counts sum to the total
    number of attack events across all samples.
    """
    if n_samples < 1:
        raise HarnessError("n_samples must be >= 1")
    rng = stream(seed, "heatmap")
    counts = np.zeros((grid.height, grid.width), dtype=np.int64)
    n_attacks = 0
    for _ in range(n_samples):
        record = _rollout(
            grid, config, patrol_policy, defender_sampler, attacker_sampler, rng
        )
        for outcome in record.outcomes:
            for event in outcome.events:
                if event["kind"] == "attack":
                    r, c = event["cell"]
                    counts[r, c] += 1
                    n_attacks += 1
    return HeatmapResult(counts=counts, n_samples=n_samples, n_attacks=n_attacks)


def write_heatmap_csv(result: HeatmapResult, path) -> None:
    lines = [",".join(str(int(v)) for v in row) for row in result.counts]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def render_heatmap(result: HeatmapResult, grid: GridWorld, path) -> None:
    """Side-by-side density and attack-count panels, written as an image."""
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4.2))
    im0 = axes[0].imshow(grid.density, cmap="Greens", vmin=0.0, vmax=1.0)
    axes[0].set_title("animal density")
    fig.colorbar(im0, ax=axes[0], fraction=0.046)
    im1 = axes[1].imshow(result.counts, cmap="Reds")
    axes[1].set_title(f"attacks over {result.n_samples} games")
    fig.colorbar(im1, ax=axes[1], fraction=0.046)
    for ax in axes:
        ax.set_xticks(range(grid.width))
        ax.set_yticks(range(grid.height))
        ax.tick_params(labelsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# episode traces

def export_trace(record: EpisodeRecord, grid: GridWorld, config: GameConfig, path) -> int:
    """Write one episode as JSON lines: a header, then one line per step.

    The header embeds the full-precision density map and game parameters,
    so a trace is self-contained: the verifier recomputes every step
    reward from the logged events alone.  Returns the line count, which is
    always episode length plus one.
    """
    header = {
        "kind": "header",
        "version": TRACE_VERSION,
        "width": grid.width,
        "height": grid.height,
        "density": [[float(v) for v in row] for row in grid.density],
        "game": dataclasses.asdict(config),
        "defender_allocation": [list(c) for c in record.defender_allocation],
        "attacker_allocation": [list(c) for c in record.attacker_allocation],
        "length": record.length,
        "defender_return": record.defender_return,
    }
    lines = [json.dumps(header)]
    lines.extend(json.dumps(step) for step in record.steps)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return len(lines)


def replay_trace(path) -> dict:
    """Re-verify a trace: recompute each step's reward from its events.

    Raises HarnessError when any recomputed reward differs from the logged
    one, when step indices are not contiguous, or when the header's length
    and return disagree with the step lines.
    """
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("kind") != "header":
        raise HarnessError("trace has no header line")
    header = lines[0]
    if header.get("version") != TRACE_VERSION:
        raise HarnessError(f"unsupported trace version {header.get('version')}")
    config = GameConfig(**header["game"])
    grid = GridWorld(
        width=header["width"],
        height=header["height"],
        density=np.array(header["density"], dtype=np.float64),
    )
    steps = lines[1:]
    total = 0.0
    captures = attacks = fled = 0
    for i, step in enumerate(steps, start=1):
        if step.get("t") != i:
            raise HarnessError(f"step index {step.get('t')} at line {i + 1}")
        events = [dict(e, cell=tuple(e["cell"])) for e in step["events"]]
        expected = reward_accounting(events, config, grid)
        if expected != step["reward"]:
            raise HarnessError(
                f"reward mismatch at t={i}: logged {step['reward']}, "
                f"recomputed {expected}"
            )
        total += step["reward"]
        for event in events:
            if event["kind"] == "capture":
                captures += 1
            elif event["kind"] == "attack":
                attacks += 1
            elif event["kind"] == "flee":
                fled += 1
    if header["length"] != len(steps):
        raise HarnessError(
            f"header length {header['length']} but {len(steps)} step lines"
        )
    if total != header["defender_return"]:
        raise HarnessError(
            f"header return {header['defender_return']} but steps sum to {total}"
        )
    return {
        "length": len(steps),
        "defender_return": total,
        "captures": captures,
        "attacks": attacks,
        "fled": fled,
    }


# ---------------------------------------------------------------------------
# metric CSV files

def write_rows_csv(rows: list[dict], path, fieldnames: list[str] | None = None) -> None:
    """Write dict rows with a fixed column order; None becomes empty."""
    if fieldnames is None:
        if not rows:
            raise HarnessError("cannot infer fieldnames from zero rows")
        fieldnames = list(rows[0])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n", restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fieldnames})


def read_rows_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(row) for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# run records and checkpoints

@dataclasses.dataclass
class RunRecord:
    """Provenance of one run: id, config, and where its files live."""

    run_id: str
    config_hash: str
    created_at: str
    config_text: str
    metrics: dict = dataclasses.field(default_factory=dict)
    checkpoints: dict = dataclasses.field(default_factory=dict)
    extras: dict = dataclasses.field(default_factory=dict)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RunRecord":
        with open(path) as fh:
            data = json.load(fh)
        return cls(**data)


def new_run_record(config: ExperimentConfig) -> RunRecord:
    config_hash = config.config_hash()
    now = datetime.datetime.now(datetime.timezone.utc)
    return RunRecord(
        run_id=f"{config_hash[:12]}-{now.strftime('%Y%m%d%H%M%S')}",
        config_hash=config_hash,
        created_at=now.isoformat(),
        config_text=config.to_text(),
    )


def save_patrol_checkpoint(path, pair: DDQNPair) -> None:
    save_params(path, pair.online, pair.network.layout)


def load_patrol_checkpoint(path, pair: DDQNPair) -> DDQNPair:
    """Load online weights into a freshly built pair; target starts synced."""
    params, layout = load_params(path)
    if params.size != pair.network.n_params:
        raise HarnessError(
            f"checkpoint has {params.size} params, network expects "
            f"{pair.network.n_params}"
        )
    return dataclasses.replace(pair, online=params.copy(), target=params.copy())


def save_policy_checkpoint(path, policy: GaussianAllocationPolicy) -> None:
    params = np.concatenate([policy.params, policy.critic_params])
    layout = [
        LayoutEntry("actor", 0, policy.params.size),
        LayoutEntry("critic", policy.params.size, policy.critic_params.size),
    ]
    save_params(path, params, layout)


def load_policy_checkpoint(path, template: GaussianAllocationPolicy) -> GaussianAllocationPolicy:
    params, layout = load_params(path)
    entries = {e.name: e for e in layout}
    if set(entries) != {"actor", "critic"}:
        raise HarnessError("not an allocation policy checkpoint")
    actor = params[entries["actor"].offset:entries["actor"].offset + entries["actor"].length]
    critic = params[entries["critic"].offset:entries["critic"].offset + entries["critic"].length]
    if actor.size != template.params.size or critic.size != template.critic_params.size:
        raise HarnessError("checkpoint does not match the policy architecture")
    return dataclasses.replace(template, params=actor.copy(), critic_params=critic.copy())


def save_autoencoder_checkpoint(path, autoencoder: Autoencoder) -> None:
    params = np.concatenate([autoencoder.encoder_params, autoencoder.decoder_params])
    layout = [
        LayoutEntry("encoder", 0, autoencoder.encoder_params.size),
        LayoutEntry("decoder", autoencoder.encoder_params.size,
                    autoencoder.decoder_params.size),
    ]
    save_params(path, params, layout)


def load_autoencoder_checkpoint(path, dim: int, k: int) -> Autoencoder:
    encoder, decoder = autoencoder_networks(dim, k)
    params, layout = load_params(path)
    entries = {e.name: e for e in layout}
    if set(entries) != {"encoder", "decoder"}:
        raise HarnessError("not an autoencoder checkpoint")
    enc = params[entries["encoder"].offset:entries["encoder"].offset + entries["encoder"].length]
    dec = params[entries["decoder"].offset:entries["decoder"].offset + entries["decoder"].length]
    if enc.size != encoder.n_params or dec.size != decoder.n_params:
        raise HarnessError("checkpoint does not match the autoencoder architecture")
    # training-history losses are not stored in the checkpoint
    return Autoencoder(
        encoder=encoder,
        decoder=decoder,
        encoder_params=enc.copy(),
        decoder_params=dec.copy(),
        k=k,
        start_loss=float("nan"),
        final_loss=float("nan"),
        heldout_loss=float("nan"),
    )


# ---------------------------------------------------------------------------
# pipeline stages

def build_spaces(config: ExperimentConfig, grid: GridWorld):
    """Datasets plus trained embeddings for both sides, from one config."""
    game = config.game_config()
    alloc = config.values["allocation"]
    spaces = []
    for side, k_key in ((SIDE_DEFENDER, "defender_k"), (SIDE_ATTACKER, "attacker_k")):
        k = alloc[k_key] or None  # 0 picks the side's default dimension
        spaces.append(
            build_allocation_space(
                grid, game, side,
                count=alloc["dataset_size"],
                seed=config.seed,
                k=k,
                epochs=alloc["autoencoder_epochs"],
                batch_size=alloc["autoencoder_batch"],
                lr=alloc["autoencoder_lr"],
            )
        )
    return spaces[0], spaces[1]


def train_allocation(
    config: ExperimentConfig,
    grid: GridWorld,
    patrol_policy,
    space_d: AllocationSpace,
    space_a: AllocationSpace,
    algo: str | None = None,
    seed: int | None = None,
    stop_on_plateau: bool | None = None,
) -> AllocationTrainResult | None:
    """Run the configured allocation trainer; None for the random baseline."""
    alloc = config.values["allocation"]
    algo = alloc["algo"] if algo is None else algo
    seed = config.seed if seed is None else seed
    stop = alloc["stop_on_plateau"] if stop_on_plateau is None else stop_on_plateau
    game = config.game_config()
    common = dict(
        iters=alloc["iters"],
        seed=seed,
        hidden=alloc["hidden"],
        std_scale=alloc["std_scale"],
        metric=alloc["metric"],
        plateau_window=alloc["plateau_window"],
        plateau_tol=alloc["plateau_tol"],
        stop_on_plateau=stop,
    )
    if algo == "random":
        return None
    if algo == "combsgpo":
        copo_config = CoPOConfig(
            alpha=alloc["alpha"],
            cg_iters=alloc["cg_iters"],
            cg_tol=alloc["cg_tol"],
            n_samples=alloc["n_samples"],
        )
        return combsgpo(
            grid, game, patrol_policy, space_d, space_a, copo_config, **common
        )
    if algo == "pg":
        return pg_selfplay(
            grid, game, patrol_policy, space_d, space_a,
            lr=alloc["lr"], n_samples=alloc["n_samples"], **common,
        )
    if algo == "optgradfp":
        return optgradfp(
            grid, game, patrol_policy, space_d, space_a,
            lr=alloc["lr"], n_samples=alloc["n_samples"], **common,
        )
    raise ConfigError(f"unknown allocation algorithm {algo!r}")


def make_samplers(config, grid, alloc_result, space_d, space_a):
    """Allocation samplers for both sides from a training result."""
    game = config.game_config()
    metric = config.get("allocation", "metric")
    if alloc_result is None:
        return (
            random_sampler(grid, game, SIDE_DEFENDER),
            random_sampler(grid, game, SIDE_ATTACKER),
        )
    return (
        policy_sampler(alloc_result.policy_d, space_d, grid, metric),
        policy_sampler(alloc_result.policy_a, space_a, grid, metric),
    )


@dataclasses.dataclass
class PipelineResult:
    """Everything produced by one end-to-end run."""

    config: ExperimentConfig
    grid: GridWorld
    patrol: PatrolResult
    patrol_policy: DDQNDefenderPolicy
    space_d: AllocationSpace
    space_a: AllocationSpace
    alloc: AllocationTrainResult | None
    report: EvalReport
    seconds: dict


def run_pipeline(config: ExperimentConfig) -> PipelineResult:
    """Train patrol, build spaces, train allocation, evaluate."""
    seconds: dict[str, float] = {}
    t_total = time.perf_counter()
    grid = config.make_grid()
    game = config.game_config()

    t0 = time.perf_counter()
    patrol = train_patrol(grid, game, config.patrol_config())
    seconds["patrol"] = time.perf_counter() - t0
    patrol_policy = DDQNDefenderPolicy(
        patrol.drone, patrol.ranger, eps=0.0,
        density_mode=config.get("patrol", "density_mode"),
    )

    t0 = time.perf_counter()
    space_d, space_a = build_spaces(config, grid)
    seconds["spaces"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    alloc = train_allocation(config, grid, patrol_policy, space_d, space_a)
    seconds["allocation"] = time.perf_counter() - t0

    defender_sampler, attacker_sampler = make_samplers(
        config, grid, alloc, space_d, space_a
    )
    t0 = time.perf_counter()
    report = evaluate(
        grid, game, patrol_policy, defender_sampler, attacker_sampler,
        n_episodes=config.get("eval", "episodes"), seed=config.seed,
    )
    seconds["eval"] = time.perf_counter() - t0
    seconds["total"] = time.perf_counter() - t_total
    return PipelineResult(
        config=config,
        grid=grid,
        patrol=patrol,
        patrol_policy=patrol_policy,
        space_d=space_d,
        space_a=space_a,
        alloc=alloc,
        report=report,
        seconds=seconds,
    )


# ---------------------------------------------------------------------------
# sweeps and timing

def uncertainty_sweep(config: ExperimentConfig, levels=None):
    """Retrain and evaluate at each (beta, kappa) level.

    Returns (rows, results): metric rows free of wall-clock noise, and the
    full per-level pipeline results for callers that need them.
    """
    if levels is None:
        levels = DEFAULT_SWEEP_LEVELS
    rows: list[dict] = []
    results: list[PipelineResult] = []
    for beta, kappa in levels:
        level_config = config.replace(**{
            "game.beta": float(beta), "game.kappa": float(kappa),
        })
        result = run_pipeline(level_config)
        rows.append(
            {
                "beta": float(beta),
                "kappa": float(kappa),
                "mean_return": result.report.mean,
                "std_return": result.report.std,
                "n_episodes": result.report.n_episodes,
                "captures": result.report.captures,
                "attacks": result.report.attacks,
                "detections": result.report.detections,
            }
        )
        results.append(result)
    return rows, results


def timing_report(
    config: ExperimentConfig,
    algorithms=("combsgpo", "pg", "optgradfp"),
    n_runs: int = 5,
):
    """Wall-clock of each allocation trainer until it declares convergence.

    The patrol policy and embedding spaces are trained once and shared, so
    the timings isolate the allocation stage.  Each run gets a distinct
    seed; trainers stop at their plateau criterion (or the iteration
    budget when no plateau appears).
    """
    if n_runs < 1:
        raise HarnessError("n_runs must be >= 1")
    grid = config.make_grid()
    game = config.game_config()
    patrol = train_patrol(grid, game, config.patrol_config())
    patrol_policy = DDQNDefenderPolicy(
        patrol.drone, patrol.ranger, eps=0.0,
        density_mode=config.get("patrol", "density_mode"),
    )
    space_d, space_a = build_spaces(config, grid)
    rows: list[dict] = []
    for algo in algorithms:
        if algo == "random":
            raise HarnessError("the random baseline has no training loop to time")
        times, iters_done, plateaued = [], [], 0
        for run in range(n_runs):
            t0 = time.perf_counter()
            result = train_allocation(
                config, grid, patrol_policy, space_d, space_a,
                algo=algo, seed=config.seed + run, stop_on_plateau=True,
            )
            times.append(time.perf_counter() - t0)
            iters_done.append(len(result.curves))
            plateaued += int(result.converged_at is not None)
        rows.append(
            {
                "algo": algo,
                "runs": n_runs,
                "mean_seconds": float(np.mean(times)),
                "std_seconds": float(np.std(times, ddof=1)) if n_runs > 1 else 0.0,
                "mean_iterations": float(np.mean(iters_done)),
                "plateaued_runs": plateaued,
            }
        )
    return rows
