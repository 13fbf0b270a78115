"""Command-line entry points for the full experiment workflow.

Every subcommand reads an experiment config (from a file, a named profile,
or inline ``--set section.key=value`` overrides) and writes its outputs
into plain files: density CSVs, allocation datasets, checkpoints in the
package's own format, metric CSVs, JSONL traces, and a ``run.json``
provenance record per run directory.

A training run directory is self-contained: ``evaluate``, ``heatmap`` and
``replay`` work from the files alone, with no live trainer state.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .allocation import (
    SIDE_ATTACKER,
    SIDE_DEFENDER,
    AllocationError,
    AllocationSpace,
    build_allocation_dataset,
    dataset_vectors,
    encode,
    load_allocations,
    make_allocation_policy,
    save_allocations,
)
from .config import ConfigError, ExperimentConfig, parse_assignment, profile
from .engine import GameError, N_DRONE_ACTIONS, N_MOVES
from .grid import GridConfigError, random_density
from .harness import (
    HarnessError,
    RunRecord,
    attack_heatmap,
    build_spaces,
    evaluate,
    export_trace,
    load_autoencoder_checkpoint,
    load_patrol_checkpoint,
    load_policy_checkpoint,
    new_run_record,
    policy_sampler,
    random_sampler,
    render_heatmap,
    replay_trace,
    save_autoencoder_checkpoint,
    save_patrol_checkpoint,
    save_policy_checkpoint,
    timing_report,
    train_allocation,
    uncertainty_sweep,
    write_heatmap_csv,
    write_rows_csv,
)
from .nn import CheckpointError
from .patrol import DDQNDefenderPolicy, make_ddqn_pair, train_patrol
from .seeding import stream

PATROL_FIELDS = [
    "episode", "return", "length", "epsilon", "captures",
    "drone_fill", "ranger_fill", "loss",
]
CURVE_FIELDS = [
    "iteration", "mean_rd", "mean_ra", "g_d_norm", "g_a_norm",
    "residual_d", "residual_a", "fallback",
]
EVAL_FIELDS = ["episode", "return", "length", "captures", "attacks", "fled", "detections"]
SWEEP_FIELDS = [
    "beta", "kappa", "mean_return", "std_return", "n_episodes",
    "captures", "attacks", "detections",
]
TIMING_FIELDS = [
    "algo", "runs", "mean_seconds", "std_seconds", "mean_iterations",
    "plateaued_runs",
]

_ERRORS = (
    ConfigError, HarnessError, AllocationError, GameError, GridConfigError,
    CheckpointError, FileNotFoundError,
)


def _resolve_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        config = ExperimentConfig.from_file(args.config)
    else:
        config = profile(args.profile)
    for item in getattr(args, "set", None) or []:
        dotted, value = parse_assignment(item)
        config = config.replace(**{dotted: value})
    return config


def _add_config_options(parser):
    parser.add_argument("--config", help="experiment config file")
    parser.add_argument(
        "--profile", default="desk", choices=("desk", "full"),
        help="builtin profile used when no --config is given",
    )
    parser.add_argument(
        "--set", action="append", metavar="SECTION.KEY=VALUE",
        help="override one config field (repeatable)",
    )


def _load_patrol_policy(grid, config: ExperimentConfig, ckpt_dir: Path):
    game = config.game_config()
    pt = config.values["patrol"]
    rng = stream(config.seed, "patrol-init")
    drone = make_ddqn_pair(grid, N_DRONE_ACTIONS, pt["drone_sync"], pt["lr"], rng, game.gamma)
    ranger = make_ddqn_pair(grid, N_MOVES, pt["ranger_sync"], pt["lr"], rng, game.gamma)
    drone = load_patrol_checkpoint(ckpt_dir / "drone.ckpt", drone)
    ranger = load_patrol_checkpoint(ckpt_dir / "ranger.ckpt", ranger)
    return DDQNDefenderPolicy(drone, ranger, eps=0.0, density_mode=pt["density_mode"])


def _load_space(run_dir: Path, side: str, k: int) -> AllocationSpace:
    dataset = load_allocations(run_dir / f"dataset_{side}.bin")
    vectors = dataset_vectors(dataset)
    autoencoder = load_autoencoder_checkpoint(
        run_dir / f"autoencoder_{side}.ckpt", dim=vectors.shape[1], k=k
    )
    return AllocationSpace(
        dataset=dataset,
        autoencoder=autoencoder,
        embeddings=encode(autoencoder, vectors),
    )


def _load_run_bundle(run_dir: Path):
    """Reconstruct (config, grid, patrol policy, samplers) from a run dir."""
    record = RunRecord.load(run_dir / "run.json")
    config = ExperimentConfig.from_file(run_dir / "config.ini")
    grid = config.make_grid()
    patrol_policy = _load_patrol_policy(grid, config, run_dir)
    extras = record.extras
    if extras.get("algo") == "random":
        game = config.game_config()
        samplers = (
            random_sampler(grid, game, SIDE_DEFENDER),
            random_sampler(grid, game, SIDE_ATTACKER),
        )
        return config, grid, patrol_policy, samplers
    metric = config.get("allocation", "metric")
    hidden = config.get("allocation", "hidden")
    std_scale = config.get("allocation", "std_scale")
    samplers = []
    for side, k_key in ((SIDE_DEFENDER, "k_defender"), (SIDE_ATTACKER, "k_attacker")):
        k = extras[k_key]
        space = _load_space(run_dir, side, k)
        template = make_allocation_policy(
            grid.n_cells, k, np.random.default_rng(0), hidden, std_scale
        )
        policy = load_policy_checkpoint(run_dir / f"policy_{side}.ckpt", template)
        samplers.append(policy_sampler(policy, space, grid, metric))
    return config, grid, patrol_policy, tuple(samplers)


def cmd_gen_grid(args) -> int:
    grid = random_density(args.width, args.height, seed=args.seed)
    text = grid.density_csv()
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out} ({args.height}x{args.width})")
    else:
        sys.stdout.write(text)
    return 0


def cmd_gen_dataset(args) -> int:
    config = _resolve_config(args)
    grid = config.make_grid()
    game = config.game_config()
    count = args.count if args.count is not None else config.get("allocation", "dataset_size")
    seed = args.seed if args.seed is not None else config.seed
    dataset = build_allocation_dataset(grid, game, args.side, count=count, seed=seed)
    save_allocations(dataset, args.out)
    print(f"wrote {args.out}: {count} {args.side} allocations "
          f"({dataset.cells_per_record} cells each)")
    return 0


def cmd_train_patrol(args) -> int:
    config = _resolve_config(args)
    grid = config.make_grid()
    game = config.game_config()
    result = train_patrol(grid, game, config.patrol_config())
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.to_file(out / "config.ini")
    write_rows_csv(result.metrics, out / "patrol_metrics.csv", PATROL_FIELDS)
    save_patrol_checkpoint(out / "drone.ckpt", result.drone)
    save_patrol_checkpoint(out / "ranger.ckpt", result.ranger)
    record = new_run_record(config)
    record.metrics["patrol"] = "patrol_metrics.csv"
    record.checkpoints.update({"drone": "drone.ckpt", "ranger": "ranger.ckpt"})
    record.extras["stage"] = "patrol"
    record.save(out / "run.json")
    if result.metrics:
        tail = result.metrics[-min(50, len(result.metrics)):]
        mean_tail = float(np.mean([row["return"] for row in tail]))
        print(f"trained {len(result.metrics)} episodes; "
              f"mean return over last {len(tail)}: {mean_tail:.3f}")
    print(f"run directory: {out}")
    return 0


def cmd_train_alloc(args) -> int:
    config = _resolve_config(args)
    if args.algo:
        config = config.replace(**{"allocation.algo": args.algo})
    algo = config.get("allocation", "algo")
    grid = config.make_grid()
    game = config.game_config()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if args.patrol_dir:
        patrol_policy = _load_patrol_policy(grid, config, Path(args.patrol_dir))
        drone_pair, ranger_pair = patrol_policy.drone_net, patrol_policy.ranger_net
    else:
        patrol = train_patrol(grid, game, config.patrol_config())
        drone_pair, ranger_pair = patrol.drone, patrol.ranger
        patrol_policy = DDQNDefenderPolicy(
            drone_pair, ranger_pair, eps=0.0,
            density_mode=config.get("patrol", "density_mode"),
        )
    # the run directory is self-contained: patrol weights travel with it
    save_patrol_checkpoint(out / "drone.ckpt", drone_pair)
    save_patrol_checkpoint(out / "ranger.ckpt", ranger_pair)

    record = new_run_record(config)
    record.extras["stage"] = "allocation"
    record.extras["algo"] = algo
    record.checkpoints.update({"drone": "drone.ckpt", "ranger": "ranger.ckpt"})

    if algo == "random":
        config.to_file(out / "config.ini")
        record.save(out / "run.json")
        print(f"random baseline prepared (nothing to train); run directory: {out}")
        return 0

    space_d, space_a = build_spaces(config, grid)
    result = train_allocation(config, grid, patrol_policy, space_d, space_a)
    for side, space in ((SIDE_DEFENDER, space_d), (SIDE_ATTACKER, space_a)):
        save_allocations(space.dataset, out / f"dataset_{side}.bin")
        save_autoencoder_checkpoint(out / f"autoencoder_{side}.ckpt", space.autoencoder)
    save_policy_checkpoint(out / "policy_defender.ckpt", result.policy_d)
    save_policy_checkpoint(out / "policy_attacker.ckpt", result.policy_a)
    write_rows_csv(result.curves, out / "alloc_curves.csv", CURVE_FIELDS)
    config.to_file(out / "config.ini")
    record.metrics["curves"] = "alloc_curves.csv"
    record.checkpoints.update({
        "policy_defender": "policy_defender.ckpt",
        "policy_attacker": "policy_attacker.ckpt",
        "autoencoder_defender": "autoencoder_defender.ckpt",
        "autoencoder_attacker": "autoencoder_attacker.ckpt",
    })
    record.extras.update({
        "k_defender": space_d.autoencoder.k,
        "k_attacker": space_a.autoencoder.k,
        "converged_at": result.converged_at,
    })
    record.save(out / "run.json")
    last = result.curves[-1] if result.curves else {}
    print(f"{algo}: {len(result.curves)} iterations, "
          f"converged_at={result.converged_at}, "
          f"final mean R^d={last.get('mean_rd', float('nan')):.3f}")
    print(f"run directory: {out}")
    return 0


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir)
    config, grid, patrol_policy, samplers = _load_run_bundle(run_dir)
    n_episodes = args.episodes if args.episodes is not None else config.get("eval", "episodes")
    seed = args.seed if args.seed is not None else config.seed
    game = config.game_config()

    record_hook = None
    if args.traces_dir:
        traces = Path(args.traces_dir)
        traces.mkdir(parents=True, exist_ok=True)

        def record_hook(episode, record):
            export_trace(record, grid, game, traces / f"episode_{episode:04d}.jsonl")

    report = evaluate(
        grid, game, patrol_policy, samplers[0], samplers[1],
        n_episodes=n_episodes, seed=seed, record_hook=record_hook,
    )
    out = Path(args.out) if args.out else run_dir / "eval.csv"
    write_rows_csv(report.rows, out, EVAL_FIELDS)
    print(f"mean defender return {report.mean:.4f} +/- {report.std:.4f} "
          f"over {report.n_episodes} episodes "
          f"(captures {report.captures}, attacks {report.attacks}, fled {report.fled})")
    print(f"wrote {out}")
    return 0


def cmd_heatmap(args) -> int:
    run_dir = Path(args.run_dir)
    config, grid, patrol_policy, samplers = _load_run_bundle(run_dir)
    n_samples = args.samples if args.samples is not None else config.get("eval", "heatmap_samples")
    seed = args.seed if args.seed is not None else config.seed
    result = attack_heatmap(
        grid, config.game_config(), patrol_policy, samplers[0], samplers[1],
        n_samples=n_samples, seed=seed,
    )
    out_csv = Path(args.out_csv) if args.out_csv else run_dir / "heatmap.csv"
    out_png = Path(args.out_png) if args.out_png else run_dir / "heatmap.png"
    write_heatmap_csv(result, out_csv)
    render_heatmap(result, grid, out_png)
    print(f"{result.n_attacks} attacks over {result.n_samples} games")
    print(f"wrote {out_csv} and {out_png}")
    return 0


def cmd_sweep(args) -> int:
    config = _resolve_config(args)
    levels = None
    if args.levels:
        levels = []
        for chunk in args.levels.split(";"):
            beta, _, kappa = chunk.partition(",")
            levels.append((float(beta), float(kappa)))
    rows, results = uncertainty_sweep(config, levels)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.to_file(out / "config.ini")
    write_rows_csv(rows, out / "sweep.csv", SWEEP_FIELDS)
    for row, result in zip(rows, results):
        tag = f"b{row['beta']:g}_k{row['kappa']:g}".replace(".", "p")
        write_rows_csv(result.report.rows, out / f"eval_{tag}.csv", EVAL_FIELDS)
    record = new_run_record(config)
    record.metrics["sweep"] = "sweep.csv"
    record.extras["stage"] = "sweep"
    record.save(out / "run.json")
    for row in rows:
        print(f"beta={row['beta']:g} kappa={row['kappa']:g}: "
              f"mean R^d {row['mean_return']:.4f} +/- {row['std_return']:.4f}")
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def cmd_timing(args) -> int:
    config = _resolve_config(args)
    algorithms = tuple(a.strip() for a in args.algos.split(",") if a.strip())
    rows = timing_report(config, algorithms=algorithms, n_runs=args.runs)
    write_rows_csv(rows, args.out, TIMING_FIELDS)
    for row in rows:
        print(f"{row['algo']}: {row['mean_seconds']:.2f}s "
              f"+/- {row['std_seconds']:.2f}s over {row['runs']} runs "
              f"({row['mean_iterations']:.1f} iterations, "
              f"{row['plateaued_runs']} plateaued)")
    print(f"wrote {args.out}")
    return 0


def cmd_replay(args) -> int:
    summary = replay_trace(args.trace)
    print(json.dumps(summary, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="greenpatrol",
        description="two-stage patrol game: datasets, training, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-grid", help="write a random density map as CSV")
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--height", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output CSV path (default: stdout)")
    p.set_defaults(func=cmd_gen_grid)

    p = sub.add_parser("gen-dataset", help="sample an allocation dataset")
    _add_config_options(p)
    p.add_argument("--side", required=True, choices=(SIDE_DEFENDER, SIDE_ATTACKER))
    p.add_argument("--count", type=int, help="override allocation.dataset_size")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train-patrol", help="train the patrolling networks")
    _add_config_options(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train_patrol)

    p = sub.add_parser("train-alloc", help="train the allocation stage")
    _add_config_options(p)
    p.add_argument("--algo", choices=("combsgpo", "pg", "optgradfp", "random"),
                   help="override allocation.algo")
    p.add_argument("--patrol-dir", help="reuse patrol checkpoints from this run")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train_alloc)

    p = sub.add_parser("evaluate", help="evaluate a trained run directory")
    p.add_argument("run_dir")
    p.add_argument("--episodes", type=int, help="override eval.episodes")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--out", help="per-episode CSV (default: RUN_DIR/eval.csv)")
    p.add_argument("--traces-dir", help="also export one JSONL trace per episode")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("heatmap", help="attack-frequency map from sampled games")
    p.add_argument("run_dir")
    p.add_argument("--samples", type=int, help="override eval.heatmap_samples")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--out-csv")
    p.add_argument("--out-png")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("sweep", help="retrain and evaluate across uncertainty levels")
    _add_config_options(p)
    p.add_argument("--levels", help='semicolon-separated "beta,kappa" pairs')
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("timing", help="wall-clock comparison of allocation trainers")
    _add_config_options(p)
    p.add_argument("--algos", default="combsgpo,pg")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_timing)

    p = sub.add_parser("replay", help="verify a trace file and print its summary")
    p.add_argument("trace")
    p.set_defaults(func=cmd_replay)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
