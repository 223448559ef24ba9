"""Command line harness.

Subcommands: ``demo`` (script a demo file), ``calibrate`` (threshold
report), ``train`` (one run), ``sweep`` (grid of independent runs across
processes), ``eval`` (checkpoint evaluation), ``tcc-eval`` (progress-probe
report for the learned encoder), ``plot`` (learning curves).

Environment variables: ``HINDSIGHT_OUT_DIR`` overrides the output
directory, ``HINDSIGHT_WORKERS`` caps sweep parallelism.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .encoders import Encoder, export_embeddings_csv, knn_progress_eval, train_tcc
from .env import ReachEnv, generate_demos, load_demos, save_demos
from .nets import DenseNet
from .relabel import StrategySpec
from .rewards import calibrate_epsilon
from .training import (
    ActorPolicy,
    evaluate,
    load_goal_db,
    read_metrics_csv,
    run_bc_baseline,
    train,
)

log = logging.getLogger("hindsight")


def _out_dir(path: str) -> Path:
    override = os.environ.get("HINDSIGHT_OUT_DIR")
    if override:
        return Path(override) / Path(path).name
    return Path(path)


def _parse_int_list(text: str) -> list[int]:
    """'0-4' or '0,2,7' (or a mix) -> sorted unique ints."""
    values: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            values.extend(range(int(lo), int(hi) + 1))
        elif part:
            values.append(int(part))
    return sorted(set(values))


def cmd_demo(args: argparse.Namespace) -> int:
    env = ReachEnv(horizon=args.horizon)
    demos = generate_demos(env, args.n_demos, args.sigma, args.seed,
                           env_seed_base=args.env_seed_base)
    out = _out_dir(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_demos(demos, out)
    lengths = [len(d) for d in demos]
    log.info("wrote %d demos to %s (lengths %d..%d)", len(demos), out,
             min(lengths), max(lengths))
    return 0


def _encoder_from_args(kind: str, demos, seed: int, epochs: int) -> Encoder:
    if kind == "tcc":
        encoder, _ = train_tcc(demos, epochs=epochs, seed=seed)
        return encoder
    return Encoder(kind)


def cmd_calibrate(args: argparse.Namespace) -> int:
    demos = load_demos(args.demos)
    encoder = _encoder_from_args(args.encoder, demos, args.seed, args.tcc_epochs)
    encoded = [np.atleast_2d(encoder.encode(d.states)) for d in demos]
    spec = calibrate_epsilon(encoded, m=args.m, k=args.k)
    text = spec.to_json()
    if args.out:
        out = _out_dir(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")
        log.info("calibration written to %s", out)
    print(text)
    return 0


def _apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = str(_out_dir(args.out))
    elif os.environ.get("HINDSIGHT_OUT_DIR"):
        cfg.out_dir = str(_out_dir(cfg.out_dir))
    if args.steps is not None:
        cfg.total_env_steps = args.steps
    if args.n_demos is not None:
        cfg.n_demos = args.n_demos
    if args.strategy is not None:
        cfg.strategies = [StrategySpec(args.strategy, k_samples=cfg.strategies[0].k_samples,
                                       relabel_demos=cfg.strategies[0].relabel_demos)]
    if args.goal_db_mode is not None:
        cfg.goal_db_mode = args.goal_db_mode
    if args.encoder is not None:
        cfg.encoder = args.encoder
    return cfg


def cmd_train(args: argparse.Namespace) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = _apply_overrides(cfg, args)
    runner = run_bc_baseline if args.bc_baseline else train
    result = runner(cfg)
    final = result.metrics[-1] if result.metrics else None
    log.info("run finished: %s", result.out_dir)
    if final:
        log.info("final eval success rate %.3f at %d env steps",
                 final.success_rate, final.env_steps)
    return 0


def _sweep_worker(payload: dict) -> tuple[str, float]:
    cfg = ExperimentConfig.from_dict(payload["config"])
    result = run_bc_baseline(cfg) if payload["bc"] else train(cfg)
    final = result.metrics[-1].success_rate if result.metrics else float("nan")
    return cfg.out_dir, final


def sweep_jobs(
    base: ExperimentConfig,
    strategies: list[str],
    seeds: list[int],
    n_demos_list: list[int],
    goal_db_modes: list[str],
    out_root: Path,
) -> list[dict]:
    """Materialize the run grid; 'bc' is accepted as a baseline pseudo-strategy."""
    jobs = []
    for strategy in strategies:
        for mode in goal_db_modes:
            for n_demos in n_demos_list:
                for seed in seeds:
                    cfg = ExperimentConfig.from_dict(base.to_dict())
                    cfg.seed = seed
                    cfg.n_demos = n_demos
                    is_bc = strategy == "bc"
                    if not is_bc:
                        cfg.strategies = [
                            StrategySpec(strategy,
                                         k_samples=base.strategies[0].k_samples,
                                         relabel_demos=base.strategies[0].relabel_demos)
                        ]
                        cfg.goal_db_mode = mode
                    label = f"{strategy}-{mode}-d{n_demos}" if not is_bc else f"bc-d{n_demos}"
                    cfg.out_dir = str(out_root / label / f"seed{seed}")
                    jobs.append({"config": cfg.to_dict(), "bc": is_bc, "label": label})
    return jobs


def cmd_sweep(args: argparse.Namespace) -> int:
    base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.steps is not None:
        base.total_env_steps = args.steps
    out_root = _out_dir(args.out)
    jobs = sweep_jobs(
        base,
        strategies=[s.strip() for s in args.strategies.split(",") if s.strip()],
        seeds=_parse_int_list(args.seeds),
        n_demos_list=_parse_int_list(args.n_demos),
        goal_db_modes=[m.strip() for m in args.goal_db_modes.split(",") if m.strip()],
        out_root=out_root,
    )
    workers = args.workers or int(os.environ.get("HINDSIGHT_WORKERS", os.cpu_count() or 1))
    log.info("sweep: %d runs on %d workers under %s", len(jobs), workers, out_root)
    if workers <= 1:
        results = [_sweep_worker(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    for out_dir, final in results:
        log.info("  %s -> final success %.3f", out_dir, final)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .agent import GoalAgent

    ckpt = Path(args.checkpoint)
    agent = GoalAgent.load(ckpt)
    encoder = Encoder.load(ckpt / "encoder.json")
    goal_db = load_goal_db(ckpt / "goal_db.npz")
    env = ReachEnv(horizon=args.horizon)
    rng = np.random.default_rng(args.seed)
    success, per_step, mean_len = evaluate(
        ActorPolicy(agent), encoder, env, args.episodes, goal_db, rng
    )
    report = {
        "success_rate": success,
        "per_step_reward": per_step,
        "mean_episode_length": mean_len,
        "episodes": args.episodes,
    }
    print(json.dumps(report, indent=2))
    return 0


def cmd_tcc_eval(args: argparse.Namespace) -> int:
    env = ReachEnv(horizon=args.horizon)
    train_demos = generate_demos(env, args.train_demos, args.sigma, args.seed)
    test_demos = generate_demos(env, args.test_demos, args.sigma, args.seed + 1,
                                env_seed_base=50_000)
    encoder, history = train_tcc(train_demos, epochs=args.epochs, seed=args.seed)
    train_acc, test_acc = knn_progress_eval(encoder, train_demos, test_demos,
                                            buckets=args.buckets, k=args.k)
    baseline = Encoder("tcc", net=DenseNet.create(
        [train_demos[0].states.shape[1], 64, 64, encoder.dim], seed=args.seed + 7
    ))
    base_train, base_test = knn_progress_eval(baseline, train_demos, test_demos,
                                              buckets=args.buckets, k=args.k)
    report = {
        "buckets": args.buckets,
        "k": args.k,
        "tcc": {"train_accuracy": train_acc, "test_accuracy": test_acc,
                "final_loss": history[-1], "initial_loss": history[0]},
        "untrained": {"train_accuracy": base_train, "test_accuracy": base_test},
    }
    if args.out:
        out = _out_dir(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    if args.embeddings_csv:
        encoded_path = _out_dir(args.embeddings_csv)
        encoded_path.parent.mkdir(parents=True, exist_ok=True)
        export_embeddings_csv(encoder, test_demos, encoded_path)
    print(json.dumps(report, indent=2))
    return 0


def _run_label(run_dir: Path) -> str:
    if run_dir.name.startswith("seed") and run_dir.name[4:].isdigit():
        return run_dir.parent.name
    return run_dir.name


def cmd_plot(args: argparse.Namespace) -> int:
    from .plots import emit_plots

    runs = []
    for pattern in args.runs:
        base = Path(pattern)
        if (base / "metrics.csv").exists():
            found = [base / "metrics.csv"]
        elif base.is_dir():
            found = sorted(base.rglob("metrics.csv"))
        else:
            found = []
        for metrics_file in found:
            runs.append((_run_label(metrics_file.parent), read_metrics_csv(metrics_file)))
    if not runs:
        log.error("no metrics.csv found under %s", args.runs)
        return 1
    charts = emit_plots(runs, _out_dir(args.out))
    for chart in charts:
        log.info("wrote %s", chart)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hindsight",
        description="Demonstration-driven goal-conditioned RL on the waypoint-reach task",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("demo", help="generate a demonstration file")
    p.add_argument("--out", default="demos.jsonl")
    p.add_argument("--n-demos", type=int, default=10)
    p.add_argument("--sigma", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=int, default=150)
    p.add_argument("--env-seed-base", type=int, default=10_000)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("calibrate", help="epsilon calibration report from a demo file")
    p.add_argument("--demos", required=True)
    p.add_argument("--encoder", default="engineered",
                   choices=["engineered", "identity", "tcc"])
    p.add_argument("--m", type=int, default=10)
    p.add_argument("--k", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tcc-epochs", type=int, default=300)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", help="single training run")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--n-demos", type=int, default=None)
    p.add_argument("--strategy", default=None)
    p.add_argument("--goal-db-mode", default=None)
    p.add_argument("--encoder", default=None)
    p.add_argument("--bc-baseline", action="store_true",
                   help="train the pure behaviour-cloning baseline instead")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid of independent runs")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="sweep")
    p.add_argument("--strategies", default="task",
                   help="comma list; 'bc' runs the imitation baseline")
    p.add_argument("--seeds", default="0-4")
    p.add_argument("--n-demos", default="10")
    p.add_argument("--goal-db-modes", default="growing")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=int, default=150)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tcc-eval", help="progress-probe report for the learned encoder")
    p.add_argument("--train-demos", type=int, default=50)
    p.add_argument("--test-demos", type=int, default=20)
    p.add_argument("--sigma", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=int, default=150)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--buckets", type=int, default=10)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", default=None)
    p.add_argument("--embeddings-csv", default=None)
    p.set_defaults(func=cmd_tcc_eval)

    p = sub.add_parser("plot", help="render learning curves from run directories")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", default="plots")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="[%(name)s] %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
