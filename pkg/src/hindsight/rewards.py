"""Distance-based goal reward and its threshold calibration.

A latent state counts as having reached a latent goal when their Euclidean
distance is strictly below epsilon. Epsilon comes from the demonstrations:
pool the rolling m-step distances of every encoded demo and take mean plus
k standard deviations.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class EpsilonSpec:
    epsilon: float
    m: int
    k_sigmas: float
    mu: float
    sigma: float
    n_distances: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def gc_reward(z: np.ndarray, z_goal: np.ndarray, eps: EpsilonSpec | float) -> int:
    """1 iff ||z - z_goal|| < epsilon (strict), else 0."""
    z = np.asarray(z, dtype=np.float64)
    z_goal = np.asarray(z_goal, dtype=np.float64)
    if z.shape != z_goal.shape:
        raise ValueError(f"embedding dims differ: {z.shape} vs {z_goal.shape}")
    epsilon = eps.epsilon if isinstance(eps, EpsilonSpec) else float(eps)
    return int(np.linalg.norm(z - z_goal) < epsilon)


def gc_reward_batch(z: np.ndarray, z_goals: np.ndarray, eps: EpsilonSpec | float) -> np.ndarray:
    """Vectorized gc_reward of one state against many goals."""
    z = np.asarray(z, dtype=np.float64)
    z_goals = np.atleast_2d(np.asarray(z_goals, dtype=np.float64))
    if z.shape[-1] != z_goals.shape[-1]:
        raise ValueError(f"embedding dims differ: {z.shape[-1]} vs {z_goals.shape[-1]}")
    epsilon = eps.epsilon if isinstance(eps, EpsilonSpec) else float(eps)
    dists = np.sqrt(((z_goals - z[None, :]) ** 2).sum(axis=1))
    return (dists < epsilon).astype(np.int64)


def calibrate_epsilon(
    encoded_demos: list[np.ndarray], m: int = 10, k: float = 1.0
) -> EpsilonSpec:
    """epsilon = mu + k * sigma over pooled m-step rolling distances.

    Distances are ||z_t - z_{t+m}|| for every valid t of every demo; sigma is
    the population standard deviation. Every demo must have more than m
    states.
    """
    if m < 1:
        raise ValueError("gap m must be >= 1")
    if k < 0:
        raise ValueError("k_sigmas must be >= 0")
    if not encoded_demos:
        raise ValueError("need at least one encoded demo")
    distances = []
    for i, demo in enumerate(encoded_demos):
        demo = np.atleast_2d(np.asarray(demo, dtype=np.float64))
        if len(demo) <= m:
            raise ValueError(f"demo {i} has {len(demo)} states, need more than m={m}")
        diff = demo[m:] - demo[:-m]
        distances.append(np.sqrt((diff * diff).sum(axis=1)))
    pooled = np.concatenate(distances)
    mu = float(pooled.mean())
    sigma = float(pooled.std())  # population std
    return EpsilonSpec(
        epsilon=mu + k * sigma,
        m=m,
        k_sigmas=k,
        mu=mu,
        sigma=sigma,
        n_distances=len(pooled),
    )


def write_calibration_report(spec: EpsilonSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(spec.to_json() + "\n")
