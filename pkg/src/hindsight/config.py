"""Experiment configuration: one flat YAML document per run."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .encoders import Encoder  # noqa: F401  (re-exported for config consumers)
from .relabel import GROWTH_MODES, SUPPORTS, StrategySpec

ENCODER_KINDS = ("engineered", "tcc", "identity")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/run0"

    # demonstrations
    n_demos: int = 10
    demo_sigma: float = 0.01
    demo_file: str | None = None
    demo_env_seed_base: int = 10_000

    # environment
    horizon: int = 150

    # encoder
    encoder: str = "engineered"
    encoder_noise_sigma: float = 0.0
    tcc_dim: int = 8
    tcc_epochs: int = 300
    tcc_batch_size: int = 8

    # goal-reward threshold
    eps_m: int = 10
    eps_k: float = 1.0

    # relabelling
    strategies: list[StrategySpec] = field(
        default_factory=lambda: [StrategySpec("task", k_samples=2)]
    )
    goal_db_mode: str = "growing"

    # agent
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    batch_size: int = 128
    gamma: float = 0.99
    polyak_tau: float = 0.005
    gumbel_tau: float = 1.0
    bc_lambda0: float = 1.0
    bc_anneal_steps: int = 100_000
    progress_mode: str = "none"
    omega: float = 0.1
    weight_decay: float = 0.0
    explore_sigma: float = 0.01

    # training loop
    total_env_steps: int = 200_000
    updates_per_step: float = 1.0
    eval_interval: int = 2000
    eval_episodes: int = 20
    replay_capacity: int = 1_000_000

    def validate(self) -> None:
        """Fail fast on inconsistent settings, before any compute."""
        if self.n_demos < 1:
            raise ValueError("n_demos must be >= 1")
        if self.demo_sigma < 0:
            raise ValueError("demo_sigma must be >= 0")
        if self.encoder not in ENCODER_KINDS:
            raise ValueError(f"encoder must be one of {ENCODER_KINDS}")
        if self.goal_db_mode not in GROWTH_MODES:
            raise ValueError(f"goal_db_mode must be one of {GROWTH_MODES}")
        if not self.strategies:
            raise ValueError("at least one relabelling strategy is required")
        for strategy in self.strategies:
            if strategy.support not in SUPPORTS:
                raise ValueError(f"unknown strategy support {strategy.support!r}")
        if self.encoder == "tcc" and self.n_demos < 2:
            raise ValueError("the tcc encoder needs at least 2 demos to train")
        if self.eps_m < 1:
            raise ValueError("eps_m must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.bc_anneal_steps <= 0:
            raise ValueError("bc_anneal_steps must be positive")
        if self.total_env_steps < 0:
            raise ValueError("total_env_steps must be >= 0")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")
        if self.updates_per_step < 0:
            raise ValueError("updates_per_step must be >= 0")
        if self.replay_capacity < 1:
            raise ValueError("replay_capacity must be >= 1")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["hidden"] = list(self.hidden)
        data["strategies"] = [
            {"support": s.support, "k_samples": s.k_samples, "relabel_demos": s.relabel_demos}
            for s in self.strategies
        ]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "hidden" in data:
            data["hidden"] = tuple(data["hidden"])
        if "strategies" in data:
            parsed = []
            for item in data["strategies"]:
                if isinstance(item, str):
                    parsed.append(StrategySpec(item))
                else:
                    parsed.append(StrategySpec(**item))
            data["strategies"] = parsed
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(
            yaml.safe_dump(self.to_dict(), sort_keys=True), encoding="utf-8"
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        return cls.from_dict(data or {})
