"""End-to-end training loop, evaluation, and the pure-imitation baseline.

The loop follows the same recipe everywhere: load or script demonstrations,
optionally fit the encoder offline and freeze it, calibrate the latent
reward threshold, seed the replay buffer with demo originals plus their
relabellings, seed the goal database with demo finals, then alternate
goal-conditioned rollouts, relabelling, and agent updates. Every random
draw comes from named streams spawned off the config seed, so a config
fully determines the metrics table.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .agent import GoalAgent, TrainWeights
from .config import ExperimentConfig
from .encoders import Encoder, train_tcc
from .env import (
    Action,
    ReachEnv,
    Trajectory,
    generate_demos,
    load_demos,
    state_vector,
)
from .relabel import (
    EncodedTrajectory,
    GoalDatabase,
    RelabelledTransition,
    encode_trajectory,
    generate_samples,
)
from .replay import ReplayBuffer
from .rewards import calibrate_epsilon, write_calibration_report

METRIC_COLUMNS = ("env_steps", "success_rate", "per_step_reward", "bc_weight", "goal_db_size")


@dataclass
class MetricsRow:
    env_steps: int
    success_rate: float
    per_step_reward: float  # mean train-time env reward per env step since last eval
    bc_weight: float
    goal_db_size: int
    wall_time: float  # seconds since run start; serialized to the sidecar, not the CSV

    def csv_values(self) -> list[str]:
        return [
            str(self.env_steps),
            repr(self.success_rate),
            "" if math.isnan(self.per_step_reward) else repr(self.per_step_reward),
            repr(self.bc_weight),
            str(self.goal_db_size),
        ]


def write_metrics_csv(rows: list[MetricsRow], path) -> None:
    """Deterministic CSV: identical configs produce byte-identical files."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow(row.csv_values())


def read_metrics_csv(path) -> list[MetricsRow]:
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(
                MetricsRow(
                    env_steps=int(rec["env_steps"]),
                    success_rate=float(rec["success_rate"]),
                    per_step_reward=(
                        float(rec["per_step_reward"]) if rec["per_step_reward"] else math.nan
                    ),
                    bc_weight=float(rec["bc_weight"]),
                    goal_db_size=int(rec["goal_db_size"]),
                    wall_time=math.nan,
                )
            )
    return rows


@dataclass
class TrainResult:
    config: ExperimentConfig
    metrics: list[MetricsRow]
    out_dir: Path
    checkpoint_dir: Path | None


def policy_state(encoder: Encoder, raw_state: np.ndarray) -> np.ndarray:
    """Policy observation: raw state concatenated with its embedding."""
    return np.concatenate([raw_state, np.atleast_1d(encoder.encode(raw_state))])


class ActorPolicy:
    """Adapts a trained agent to the evaluate() policy protocol."""

    def __init__(self, agent: GoalAgent, explore_rng: np.random.Generator | None = None):
        self.agent = agent
        self.explore_rng = explore_rng

    def __call__(self, raw_state, z_state, z_goal):
        state = np.concatenate([raw_state, z_state])
        return self.agent.act(state, z_goal, explore_rng=self.explore_rng)


class ScriptedPolicy:
    """The demo controller exposed as a policy (ignores the latent goal)."""

    def __init__(self, env: ReachEnv):
        self.env = env

    def __call__(self, raw_state, z_state, z_goal):
        pos = raw_state[0:2]
        waypoints = raw_state[2:6].reshape(2, 2)
        target = raw_state[6:8]
        mask = raw_state[8:10] > 0.5
        if not mask[0]:
            subgoal, is_waypoint = waypoints[0], True
        elif not mask[1]:
            subgoal, is_waypoint = waypoints[1], True
        else:
            subgoal, is_waypoint = target, False
        velocity = subgoal - pos
        predicted = self.env.integrate(pos, velocity)
        stamp = int(is_waypoint and np.linalg.norm(predicted - subgoal) < self.env.radius)
        return velocity, stamp


class RandomPolicy:
    def __init__(self, rng: np.random.Generator, max_speed: float = 0.05):
        self.rng = rng
        self.max_speed = max_speed

    def __call__(self, raw_state, z_state, z_goal):
        return self.rng.uniform(-self.max_speed, self.max_speed, 2), int(self.rng.integers(2))


def evaluate(
    policy,
    encoder: Encoder,
    env: ReachEnv,
    n_episodes: int,
    goal_db: GoalDatabase,
    rng: np.random.Generator,
) -> tuple[float, float, float]:
    """Run goal-conditioned episodes; returns (success rate, per-step reward,
    mean episode length). Never touches the replay buffer or goal database."""
    if len(goal_db) == 0:
        raise ValueError("evaluation needs a non-empty goal source")
    successes = 0
    total_reward = 0.0
    total_steps = 0
    for _ in range(n_episodes):
        z_goal, _ = goal_db.sample(rng)
        state = env.reset(int(rng.integers(2**31)))
        done = False
        while not done:
            raw = state_vector(state)
            velocity, stamp = policy(raw, encoder.encode(raw), z_goal)
            state, reward, done = env.step(state, Action(velocity=velocity, stamp=stamp))
            total_reward += reward
            total_steps += 1
        successes += int(reward == 1)
    return successes / n_episodes, total_reward / total_steps, total_steps / n_episodes


def _load_or_generate_demos(cfg: ExperimentConfig, env: ReachEnv, demo_rng) -> list[Trajectory]:
    if cfg.demo_file:
        demos = load_demos(cfg.demo_file)
        if len(demos) < cfg.n_demos:
            raise ValueError(
                f"demo file has {len(demos)} trajectories, config needs {cfg.n_demos}"
            )
        return demos[: cfg.n_demos]
    return generate_demos(env, cfg.n_demos, cfg.demo_sigma, demo_rng,
                          env_seed_base=cfg.demo_env_seed_base)


def build_encoder(cfg: ExperimentConfig, demos: list[Trajectory], seed: int) -> Encoder:
    """Offline encoder construction; frozen for the rest of the run."""
    if cfg.encoder == "engineered":
        return Encoder("engineered", noise_sigma=cfg.encoder_noise_sigma, noise_seed=seed)
    if cfg.encoder == "identity":
        return Encoder("identity", noise_sigma=cfg.encoder_noise_sigma, noise_seed=seed)
    encoder, _ = train_tcc(
        demos,
        epochs=cfg.tcc_epochs,
        batch_size=cfg.tcc_batch_size,
        seed=seed,
        dim=cfg.tcc_dim,
        hidden=tuple(cfg.hidden),
    )
    encoder.noise_sigma = cfg.encoder_noise_sigma
    encoder.noise_seed = seed
    encoder.reseed_noise()
    return encoder


def _add_original_transitions(
    buffer: ReplayBuffer,
    encoded: EncodedTrajectory,
    goal: np.ndarray,
    demo: bool,
    protected: bool,
) -> None:
    ps = np.concatenate([encoded.raw_states, encoded.embeddings], axis=1)
    n = encoded.n_transitions
    dones = np.zeros(n, dtype=bool)
    dones[-1] = True
    buffer.add_many(
        state=ps[:-1],
        a_cont=encoded.actions[:, :2],
        a_stamp=encoded.actions[:, 2].astype(np.int8),
        next_state=ps[1:],
        goal=np.tile(goal, (n, 1)),
        reward=encoded.rewards,
        done=dones,
        demo=demo,
        success=encoded.success,
        t=np.arange(1, n + 1),
        horizon=np.full(n, n),
        protected=protected,
    )


def _add_relabelled_transitions(
    buffer: ReplayBuffer,
    encoded: EncodedTrajectory,
    transitions: list[RelabelledTransition],
) -> None:
    if not transitions:
        return
    ts = np.array([tr.origin[1] for tr in transitions])
    ps = np.concatenate([encoded.raw_states, encoded.embeddings], axis=1)
    n = len(transitions)
    buffer.add_many(
        state=ps[ts],
        a_cont=encoded.actions[ts, :2],
        a_stamp=encoded.actions[ts, 2].astype(np.int8),
        next_state=ps[ts + 1],
        goal=np.stack([tr.z_goal for tr in transitions]),
        reward=np.array([float(tr.reward) for tr in transitions]),
        done=np.zeros(n, dtype=bool),
        demo=False,
        success=encoded.success,
        t=ts + 1,
        horizon=np.full(n, encoded.n_transitions),
        protected=False,
    )


def train(cfg: ExperimentConfig) -> TrainResult:
    """Full training run; writes metrics, calibration, checkpoint, sidecars."""
    cfg.validate()
    t_start = time.perf_counter()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.yaml")

    root = np.random.SeedSequence(cfg.seed)
    (ss_demo, ss_encoder, ss_agent, ss_env, ss_goal, ss_relabel,
     ss_batch, ss_gumbel, ss_explore, ss_eval) = root.spawn(10)
    demo_rng = np.random.default_rng(ss_demo)
    env_rng = np.random.default_rng(ss_env)
    goal_rng = np.random.default_rng(ss_goal)
    relabel_rng = np.random.default_rng(ss_relabel)
    batch_rng = np.random.default_rng(ss_batch)
    gumbel_rng = np.random.default_rng(ss_gumbel)
    explore_rng = np.random.default_rng(ss_explore)
    eval_rng = np.random.default_rng(ss_eval)

    env = ReachEnv(horizon=cfg.horizon)
    demos = _load_or_generate_demos(cfg, env, demo_rng)
    encoder = build_encoder(cfg, demos, seed=int(ss_encoder.generate_state(1)[0] % 2**31))
    encoded_demos = [
        encode_trajectory(encoder, demo, traj_id=-(i + 1)) for i, demo in enumerate(demos)
    ]

    eps = calibrate_epsilon([d.embeddings for d in encoded_demos], m=cfg.eps_m, k=cfg.eps_k)
    write_calibration_report(eps, out_dir / "calibration.json")

    state_dim = demos[0].states.shape[1] + encoder.dim
    agent = GoalAgent(
        state_dim=state_dim,
        goal_dim=encoder.dim,
        weights=TrainWeights(
            bc_lambda0=cfg.bc_lambda0,
            bc_anneal_steps=cfg.bc_anneal_steps,
            progress_mode=cfg.progress_mode,
            omega=cfg.omega,
            gamma=cfg.gamma,
            gumbel_tau=cfg.gumbel_tau,
        ),
        hidden=tuple(cfg.hidden),
        lr=cfg.lr,
        polyak_tau=cfg.polyak_tau,
        weight_decay=cfg.weight_decay,
        max_speed=env.max_speed,
        explore_sigma=cfg.explore_sigma,
        seed=int(ss_agent.generate_state(1)[0] % 2**31),
    )

    buffer = ReplayBuffer(cfg.replay_capacity, state_dim, encoder.dim)
    for encoded in encoded_demos:
        _add_original_transitions(
            buffer, encoded, goal=encoded.embeddings[-1], demo=True, protected=True
        )
    demo_strategies = [s for s in cfg.strategies if s.relabel_demos]
    for encoded in encoded_demos:
        if demo_strategies:
            relabelled = generate_samples(encoded, encoded_demos, demo_strategies, eps,
                                          relabel_rng)
            _add_relabelled_transitions(buffer, encoded, relabelled)

    goal_db = GoalDatabase.from_demos(encoded_demos, cfg.goal_db_mode)

    metrics: list[MetricsRow] = []
    env_steps = 0
    next_eval = cfg.eval_interval
    reward_window = 0.0
    steps_window = 0
    update_budget = 0.0
    episode_id = 0

    def emit_row() -> None:
        nonlocal reward_window, steps_window
        success_rate, _, _ = evaluate(
            ActorPolicy(agent), encoder, env, cfg.eval_episodes, goal_db, eval_rng
        )
        per_step = reward_window / steps_window if steps_window else math.nan
        metrics.append(
            MetricsRow(
                env_steps=env_steps,
                success_rate=success_rate,
                per_step_reward=per_step,
                bc_weight=agent.weights.bc_weight(agent.update_count),
                goal_db_size=len(goal_db),
                wall_time=time.perf_counter() - t_start,
            )
        )
        reward_window = 0.0
        steps_window = 0

    while env_steps < cfg.total_env_steps:
        z_goal, _ = goal_db.sample(goal_rng)
        state = env.reset(int(env_rng.integers(2**31)))
        states = [state_vector(state)]
        actions, rewards = [], []
        done = False
        reward = 0
        while not done:
            ps = policy_state(encoder, states[-1])
            velocity, stamp = agent.act(ps, z_goal, explore_rng=explore_rng)
            state, reward, done = env.step(state, Action(velocity=velocity, stamp=stamp))
            states.append(state_vector(state))
            actions.append([velocity[0], velocity[1], float(stamp)])
            rewards.append(float(reward))
        traj = Trajectory(
            states=np.asarray(states),
            actions=np.asarray(actions),
            rewards=np.asarray(rewards),
            success=bool(reward == 1),
            goal_embedding=z_goal,
        )
        env_steps += len(traj)
        reward_window += traj.rewards.sum()
        steps_window += len(traj)

        if traj.success:
            goal_db.add_success(traj.states[-1], encoder)
        encoded = encode_trajectory(encoder, traj, traj_id=episode_id)
        _add_original_transitions(buffer, encoded, goal=z_goal, demo=False, protected=False)
        relabelled = generate_samples(encoded, encoded_demos, cfg.strategies, eps, relabel_rng)
        _add_relabelled_transitions(buffer, encoded, relabelled)
        episode_id += 1

        update_budget += len(traj) * cfg.updates_per_step
        while update_budget >= 1.0:
            agent.update(buffer.sample(cfg.batch_size, batch_rng), gumbel_rng)
            update_budget -= 1.0

        if env_steps >= next_eval or env_steps >= cfg.total_env_steps:
            emit_row()
            while next_eval <= env_steps:
                next_eval += cfg.eval_interval

    if not metrics and cfg.total_env_steps == 0:
        emit_row()

    write_metrics_csv(metrics, out_dir / "metrics.csv")
    checkpoint_dir = out_dir / "checkpoint"
    agent.save(checkpoint_dir)
    encoder.save(checkpoint_dir / "encoder.json")
    np.savez(
        checkpoint_dir / "goal_db.npz",
        embeddings=np.stack(goal_db.embeddings),
        raw_states=np.stack(goal_db.raw_states),
        sources=np.array(goal_db.sources),
        growth_mode=goal_db.growth_mode,
    )
    _write_run_info(out_dir, metrics, t_start, buffer, goal_db)
    return TrainResult(config=cfg, metrics=metrics, out_dir=out_dir,
                       checkpoint_dir=checkpoint_dir)


def _write_run_info(out_dir: Path, metrics: list[MetricsRow], t_start: float,
                    buffer: ReplayBuffer, goal_db: GoalDatabase) -> None:
    info = {
        "total_wall_time": time.perf_counter() - t_start,
        "wall_times": [row.wall_time for row in metrics],
        "replay_size": len(buffer),
        "goal_db_size": len(goal_db),
    }
    (out_dir / "run_info.json").write_text(json.dumps(info, indent=2), encoding="utf-8")


def load_goal_db(path) -> GoalDatabase:
    blob = np.load(path, allow_pickle=False)
    db = GoalDatabase(str(blob["growth_mode"]))
    for emb, raw, src in zip(blob["embeddings"], blob["raw_states"], blob["sources"]):
        db._append(emb, raw, str(src))
    return db


def run_bc_baseline(cfg: ExperimentConfig) -> TrainResult:
    """Pure behaviour cloning on the demo transitions, evaluated like RL runs.

    There is no environment interaction: the env_steps column counts actor
    updates so tables stay comparable, and the train-time per-step-reward
    column is empty.
    """
    cfg.validate()
    t_start = time.perf_counter()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.yaml")

    root = np.random.SeedSequence(cfg.seed)
    ss_demo, ss_encoder, ss_agent, ss_batch, ss_eval = root.spawn(5)
    demo_rng = np.random.default_rng(ss_demo)
    batch_rng = np.random.default_rng(ss_batch)
    eval_rng = np.random.default_rng(ss_eval)

    env = ReachEnv(horizon=cfg.horizon)
    demos = _load_or_generate_demos(cfg, env, demo_rng)
    encoder = build_encoder(cfg, demos, seed=int(ss_encoder.generate_state(1)[0] % 2**31))
    encoded_demos = [
        encode_trajectory(encoder, demo, traj_id=-(i + 1)) for i, demo in enumerate(demos)
    ]
    eps = calibrate_epsilon([d.embeddings for d in encoded_demos], m=cfg.eps_m, k=cfg.eps_k)
    write_calibration_report(eps, out_dir / "calibration.json")

    state_dim = demos[0].states.shape[1] + encoder.dim
    agent = GoalAgent(
        state_dim=state_dim,
        goal_dim=encoder.dim,
        weights=TrainWeights(bc_lambda0=1.0, bc_anneal_steps=max(cfg.total_env_steps, 1) * 10,
                             gamma=cfg.gamma, gumbel_tau=cfg.gumbel_tau),
        hidden=tuple(cfg.hidden),
        lr=cfg.lr,
        max_speed=env.max_speed,
        explore_sigma=0.0,
        seed=int(ss_agent.generate_state(1)[0] % 2**31),
    )
    buffer = ReplayBuffer(max(cfg.replay_capacity, 1), state_dim, encoder.dim)
    for encoded in encoded_demos:
        _add_original_transitions(buffer, encoded, goal=encoded.embeddings[-1],
                                  demo=True, protected=True)
    goal_db = GoalDatabase.from_demos(encoded_demos, "demo_finals")

    n_updates = int(round(cfg.total_env_steps * cfg.updates_per_step))
    metrics: list[MetricsRow] = []

    def emit_row(step: int) -> None:
        success_rate, _, _ = evaluate(
            ActorPolicy(agent), encoder, env, cfg.eval_episodes, goal_db, eval_rng
        )
        metrics.append(
            MetricsRow(
                env_steps=step,
                success_rate=success_rate,
                per_step_reward=math.nan,
                bc_weight=1.0,
                goal_db_size=len(goal_db),
                wall_time=time.perf_counter() - t_start,
            )
        )

    for step in range(1, n_updates + 1):
        batch = buffer.sample(cfg.batch_size, batch_rng)
        _bc_only_update(agent, batch)
        if step % cfg.eval_interval == 0 or step == n_updates:
            emit_row(step)
    if not metrics:
        emit_row(0)

    write_metrics_csv(metrics, out_dir / "metrics.csv")
    checkpoint_dir = out_dir / "checkpoint"
    agent.save(checkpoint_dir)
    encoder.save(checkpoint_dir / "encoder.json")
    np.savez(
        checkpoint_dir / "goal_db.npz",
        embeddings=np.stack(goal_db.embeddings),
        raw_states=np.stack(goal_db.raw_states),
        sources=np.array(goal_db.sources),
        growth_mode=goal_db.growth_mode,
    )
    _write_run_info(out_dir, metrics, t_start, buffer, goal_db)
    return TrainResult(config=cfg, metrics=metrics, out_dir=out_dir,
                       checkpoint_dir=checkpoint_dir)


def _bc_only_update(agent: GoalAgent, batch) -> None:
    from .agent import _softmax_rows, onehot_stamp

    cont, logits = agent.actor.forward(agent.policy_input(batch.state, batch.goal))
    n = len(batch.reward)
    diff = cont - batch.a_cont
    p = _softmax_rows(logits)
    onehot = onehot_stamp(batch.a_stamp)
    d_cont = 2.0 * diff / n
    d_logits = (p - onehot) / n
    grads = agent.actor.backward_heads(d_cont, d_logits)
    agent.opt_actor.step(agent.actor.net, grads)
    agent.update_count += 1
