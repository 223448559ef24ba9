"""Online goal database and hindsight goal selection.

The goal database holds success-terminal latent goals and hands one out per
episode (online conditioning). After a rollout, the relabelling engine
re-scores every transition against goals drawn from one of six candidate
supports: the rollout's own final state, its future states, all demo states
(the task support), and the union / epsilon-intersection / joint
combinations of the two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import Encoder
from .env import Trajectory
from .rewards import EpsilonSpec, gc_reward_batch

SUPPORTS = ("final", "future", "task", "union", "intersection", "joint")
GROWTH_MODES = ("single", "demo_finals", "growing")


@dataclass(frozen=True)
class StrategySpec:
    support: str
    k_samples: int = 2
    relabel_demos: bool = True

    def __post_init__(self):
        if self.support not in SUPPORTS:
            raise ValueError(f"unknown support {self.support!r}, expected one of {SUPPORTS}")
        if self.k_samples < 1:
            raise ValueError("k_samples must be >= 1")


@dataclass
class EncodedTrajectory:
    """A trajectory plus the embedding of every raw state."""

    raw_states: np.ndarray  # (L+1, n_s)
    embeddings: np.ndarray  # (L+1, d_z)
    actions: np.ndarray  # (L, 3)
    rewards: np.ndarray  # (L,)
    success: bool
    traj_id: int = 0

    @property
    def n_states(self) -> int:
        return len(self.raw_states)

    @property
    def n_transitions(self) -> int:
        return len(self.actions)


def encode_trajectory(encoder: Encoder, traj: Trajectory, traj_id: int = 0) -> EncodedTrajectory:
    return EncodedTrajectory(
        raw_states=traj.states,
        embeddings=np.atleast_2d(encoder.encode(traj.states)),
        actions=traj.actions,
        rewards=traj.rewards,
        success=traj.success,
        traj_id=traj_id,
    )


@dataclass(frozen=True)
class RelabelledTransition:
    z: np.ndarray
    action: np.ndarray
    z_next: np.ndarray
    z_goal: np.ndarray
    reward: int
    origin: tuple[int, int, str]  # (traj_id, t, support name)


class GoalDatabase:
    """Multiset of success-terminal goals; grows, never shrinks.

    ``single`` keeps one fixed entry, ``demo_finals`` all demo finals, and
    ``growing`` additionally absorbs the terminal state of every successful
    rollout.
    """

    def __init__(self, growth_mode: str = "growing"):
        if growth_mode not in GROWTH_MODES:
            raise ValueError(f"unknown growth mode {growth_mode!r}, expected {GROWTH_MODES}")
        self.growth_mode = growth_mode
        self.embeddings: list[np.ndarray] = []
        self.raw_states: list[np.ndarray] = []
        self.sources: list[str] = []

    @classmethod
    def from_demos(cls, demos: list[EncodedTrajectory], growth_mode: str) -> "GoalDatabase":
        db = cls(growth_mode)
        seed_demos = demos[:1] if growth_mode == "single" else demos
        for demo in seed_demos:
            db._append(demo.embeddings[-1], demo.raw_states[-1], "demo")
        return db

    def _append(self, embedding: np.ndarray, raw_state: np.ndarray, source: str) -> None:
        self.embeddings.append(np.asarray(embedding, dtype=np.float64).copy())
        self.raw_states.append(np.asarray(raw_state, dtype=np.float64).copy())
        self.sources.append(source)

    def __len__(self) -> int:
        return len(self.embeddings)

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Uniform draw of (goal embedding, raw goal state)."""
        if not self.embeddings:
            raise ValueError("goal database is empty")
        idx = int(rng.integers(len(self.embeddings)))
        return self.embeddings[idx], self.raw_states[idx]

    def add_success(self, terminal_raw_state: np.ndarray, encoder: Encoder) -> None:
        """Absorb a successful rollout's terminal state (growing mode only)."""
        if self.growth_mode != "growing":
            return
        self._append(encoder.encode(terminal_raw_state), terminal_raw_state, "rollout")


def task_support(demos: list[EncodedTrajectory]) -> np.ndarray:
    """All states of all demos, stacked."""
    return np.concatenate([demo.embeddings for demo in demos], axis=0)


def _within_eps_any(points: np.ndarray, refs: np.ndarray, epsilon: float) -> np.ndarray:
    """Boolean mask over ``points``: is any ref strictly closer than epsilon."""
    d2 = ((points[:, None, :] - refs[None, :, :]) ** 2).sum(axis=2)
    return (d2.min(axis=1) < epsilon * epsilon)


def candidate_support(
    strategy: str,
    zeta: EncodedTrajectory,
    demos: list[EncodedTrajectory],
    t: int,
    eps: EpsilonSpec | None = None,
) -> np.ndarray:
    """Candidate goal set for relabelling step t of zeta; may be empty.

    ``future`` is empty when t is the last state index; the caller skips
    such steps instead of failing.
    """
    if not 0 <= t < zeta.n_states:
        raise ValueError(f"t={t} outside trajectory with {zeta.n_states} states")
    z = zeta.embeddings
    if strategy == "final":
        return z[-1:].copy()
    if strategy == "future":
        return z[t + 1 :].copy()
    if strategy == "task":
        return task_support(demos)
    if strategy == "union":
        return np.concatenate([z[t + 1 :], task_support(demos)], axis=0)
    if eps is None:
        raise ValueError(f"strategy {strategy!r} needs a calibrated epsilon")
    if strategy == "intersection":
        task = task_support(demos)
        return task[_within_eps_any(task, z, eps.epsilon)].copy()
    if strategy == "joint":
        task = task_support(demos)
        return z[_within_eps_any(z, task, eps.epsilon)].copy()
    raise ValueError(f"unknown support {strategy!r}")


def generate_samples(
    zeta: EncodedTrajectory,
    demos: list[EncodedTrajectory],
    strategies: list[StrategySpec],
    eps: EpsilonSpec,
    rng: np.random.Generator,
) -> list[RelabelledTransition]:
    """Relabel every step of zeta under every strategy.

    For each step t, draws K goals iid-uniform from the strategy's candidate
    support (K forced to 1 for ``final``) and rewards each relabelled
    transition by the epsilon-ball indicator on the achieved next state.
    Empty supports contribute nothing.
    """
    if eps is None:
        raise ValueError("epsilon must be calibrated before relabelling")
    out: list[RelabelledTransition] = []
    z = zeta.embeddings
    for strategy in strategies:
        k = 1 if strategy.support == "final" else strategy.k_samples
        # supports that do not depend on t are built once per trajectory
        fixed: np.ndarray | None = None
        if strategy.support in ("final", "task", "intersection", "joint"):
            fixed = candidate_support(strategy.support, zeta, demos, 0, eps)
        task = task_support(demos) if strategy.support == "union" else None
        for t in range(zeta.n_transitions):
            if fixed is not None:
                support = fixed
            elif strategy.support == "future":
                support = z[t + 1 :]
            else:  # union: index arithmetic avoids a concat per step
                support = None
            if support is not None:
                n = len(support)
                if n == 0:
                    continue
                goals = support[rng.integers(0, n, size=k)]
            else:
                n_future = zeta.n_states - (t + 1)
                idx = rng.integers(0, n_future + len(task), size=k)
                goals = np.array(
                    [z[t + 1 + i] if i < n_future else task[i - n_future] for i in idx]
                )
            rewards = gc_reward_batch(z[t + 1], goals, eps)
            for goal, reward in zip(goals, rewards):
                out.append(
                    RelabelledTransition(
                        z=z[t],
                        action=zeta.actions[t],
                        z_next=z[t + 1],
                        z_goal=goal.copy(),
                        reward=int(reward),
                        origin=(zeta.traj_id, t, strategy.support),
                    )
                )
    return out
