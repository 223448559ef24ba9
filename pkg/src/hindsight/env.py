"""Kinematic waypoint-reach task with a sparse terminal reward.

A point agent in the unit square must stamp two waypoints in order and then
reach a target, all within a fixed horizon. Reward is 0 everywhere except 1
on the successful terminal step. A scripted noisy controller produces
demonstration trajectories; those are the only privileged data the learner
ever sees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

RAW_STATE_DIM = 11  # pos(2), wp1(2), wp2(2), target(2), mask(2), stamp(1)


@dataclass(frozen=True)
class Action:
    velocity: np.ndarray  # (2,), clamped per component by the env
    stamp: int  # 0 or 1


@dataclass
class EnvState:
    agent_pos: np.ndarray  # (2,)
    waypoints: np.ndarray  # (2, 2)
    target: np.ndarray  # (2,)
    visited_mask: np.ndarray  # (2,) bool
    stamp_active: bool
    step_index: int
    horizon: int


@dataclass
class Trajectory:
    """One episode: L transitions over L+1 raw states."""

    states: np.ndarray  # (L+1, RAW_STATE_DIM)
    actions: np.ndarray  # (L, 3): vx, vy, stamp
    rewards: np.ndarray  # (L,)
    success: bool
    env_seed: int | None = None
    sigma: float | None = None
    goal_embedding: np.ndarray | None = None
    goal_state: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def dones(self) -> np.ndarray:
        dones = np.zeros(len(self.actions), dtype=bool)
        if len(dones):
            dones[-1] = True
        return dones


def state_vector(state: EnvState) -> np.ndarray:
    """Flat observation: positions, layout, visitation mask, stamp flag."""
    return np.concatenate(
        [
            state.agent_pos,
            state.waypoints[0],
            state.waypoints[1],
            state.target,
            state.visited_mask.astype(np.float64),
            [float(state.stamp_active)],
        ]
    )


class ReachEnv:
    """Ordered two-waypoint reach in the unit square.

    Waypoint i is marked visited only when the agent ends a step inside its
    radius with the stamp action held down and every earlier waypoint already
    visited. The episode succeeds when the agent reaches the target with the
    full mask; it times out at ``horizon`` steps.
    """

    def __init__(
        self,
        horizon: int = 150,
        radius: float = 0.03,
        max_speed: float = 0.05,
        min_separation: float = 0.2,
    ):
        self.horizon = horizon
        self.radius = radius
        self.max_speed = max_speed
        self.min_separation = min_separation

    def reset(self, seed: int) -> EnvState:
        """Seeded episode start; waypoints/target pairwise >= min_separation."""
        rng = np.random.default_rng(seed)
        agent = rng.uniform(0.0, 1.0, size=2)
        while True:
            points = rng.uniform(0.0, 1.0, size=(3, 2))
            dists = [
                np.linalg.norm(points[i] - points[j])
                for i in range(3)
                for j in range(i + 1, 3)
            ]
            if min(dists) >= self.min_separation:
                break
        return EnvState(
            agent_pos=agent,
            waypoints=points[:2].copy(),
            target=points[2].copy(),
            visited_mask=np.zeros(2, dtype=bool),
            stamp_active=False,
            step_index=0,
            horizon=self.horizon,
        )

    def _is_success_state(self, state: EnvState) -> bool:
        return bool(
            state.visited_mask.all()
            and np.linalg.norm(state.agent_pos - state.target) < self.radius
        )

    def integrate(self, pos: np.ndarray, velocity: np.ndarray) -> np.ndarray:
        """Clamp velocity per component, step, clip to the arena."""
        vel = np.clip(velocity, -self.max_speed, self.max_speed)
        return np.clip(pos + vel, 0.0, 1.0)

    def step(self, state: EnvState, action: Action) -> tuple[EnvState, int, bool]:
        if state.step_index >= state.horizon:
            raise RuntimeError("step called on a finished episode (horizon reached)")
        if self._is_success_state(state):
            raise RuntimeError("step called on a finished episode (success)")
        new_pos = self.integrate(state.agent_pos, np.asarray(action.velocity, dtype=np.float64))
        mask = state.visited_mask.copy()
        if action.stamp == 1:
            for i in range(2):
                if not mask[i] and mask[:i].all():
                    if np.linalg.norm(new_pos - state.waypoints[i]) < self.radius:
                        mask[i] = True
        new_state = EnvState(
            agent_pos=new_pos,
            waypoints=state.waypoints,
            target=state.target,
            visited_mask=mask,
            stamp_active=bool(action.stamp),
            step_index=state.step_index + 1,
            horizon=state.horizon,
        )
        if self._is_success_state(new_state):
            return new_state, 1, True
        if new_state.step_index == state.horizon:
            return new_state, 0, True
        return new_state, 0, False


def _current_subgoal(state: EnvState) -> tuple[np.ndarray, bool]:
    """Next point to head for and whether it is a waypoint (needs stamping)."""
    if not state.visited_mask[0]:
        return state.waypoints[0], True
    if not state.visited_mask[1]:
        return state.waypoints[1], True
    return state.target, False


class DemoFailure(RuntimeError):
    """The scripted controller kept failing; noise level is too large."""


def scripted_demo(
    env: ReachEnv,
    env_seed: int,
    sigma: float,
    rng: np.random.Generator | int,
    max_attempts: int = 100,
) -> Trajectory:
    """Run the proportional controller until it produces a successful episode.

    The controller heads straight for the next unvisited waypoint (then the
    target), adds Gaussian noise ``sigma`` to the desired velocity, and holds
    the stamp down exactly on steps that land inside the pending waypoint's
    radius. Layout is fixed by ``env_seed``; only the noise varies between
    retry attempts.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    for _ in range(max_attempts):
        state = env.reset(env_seed)
        states = [state_vector(state)]
        actions: list[np.ndarray] = []
        rewards: list[int] = []
        success = False
        done = False
        while not done:
            subgoal, is_waypoint = _current_subgoal(state)
            velocity = subgoal - state.agent_pos
            if sigma > 0:
                velocity = velocity + rng.normal(0.0, sigma, size=2)
            predicted = env.integrate(state.agent_pos, velocity)
            stamp = int(is_waypoint and np.linalg.norm(predicted - subgoal) < env.radius)
            action = Action(velocity=velocity, stamp=stamp)
            state, reward, done = env.step(state, action)
            states.append(state_vector(state))
            actions.append(np.array([velocity[0], velocity[1], float(stamp)]))
            rewards.append(reward)
            success = done and reward == 1
        if success:
            return Trajectory(
                states=np.asarray(states),
                actions=np.asarray(actions),
                rewards=np.asarray(rewards, dtype=np.float64),
                success=True,
                env_seed=env_seed,
                sigma=sigma,
            )
    raise DemoFailure(f"{max_attempts} consecutive failures at sigma={sigma}")


def generate_demos(
    env: ReachEnv, n_demos: int, sigma: float, seed: int, env_seed_base: int = 10_000
) -> list[Trajectory]:
    """Demo set over ``n_demos`` distinct layouts with a shared noise stream."""
    rng = np.random.default_rng(seed)
    return [
        scripted_demo(env, env_seed_base + i, sigma, rng) for i in range(n_demos)
    ]


def save_demos(trajectories: list[Trajectory], path) -> None:
    """Write one self-describing JSON record per trajectory."""
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            record = {
                "env_seed": traj.env_seed,
                "sigma": traj.sigma,
                "success": bool(traj.success),
                "states": traj.states.tolist(),
                "actions": traj.actions.tolist(),
                "rewards": traj.rewards.tolist(),
            }
            fh.write(json.dumps(record) + "\n")


def load_demos(path) -> list[Trajectory]:
    trajectories = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            trajectories.append(
                Trajectory(
                    states=np.asarray(record["states"], dtype=np.float64),
                    actions=np.asarray(record["actions"], dtype=np.float64),
                    rewards=np.asarray(record["rewards"], dtype=np.float64),
                    success=bool(record["success"]),
                    env_seed=record.get("env_seed"),
                    sigma=record.get("sigma"),
                )
            )
    return trajectories
