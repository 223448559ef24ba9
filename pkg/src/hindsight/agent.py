"""Goal-conditioned actor-critic learner seeded from demonstrations.

The actor has a tanh-bounded velocity head and a two-logit stamp head; at
execution time the stamp is the argmax, while training relaxes it with
Gumbel-Softmax so value gradients reach the logits. The critic is a
categorical distribution over 60 evenly spaced return atoms on [0, 1],
trained by projecting the one-step target onto the atom grid and minimizing
KL. A decayed behaviour-cloning term on successful demo transitions
bootstraps the actor.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .nets import Adam, DenseNet, polyak_update

N_ATOMS = 60
ATOMS = np.linspace(0.0, 1.0, N_ATOMS)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class CategoricalQ:
    """Value distribution over the fixed [0, 1] atom grid."""

    probs: np.ndarray  # (N_ATOMS,), non-negative, sums to 1

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (N_ATOMS,):
            raise ValueError(f"expected {N_ATOMS} probabilities, got {self.probs.shape}")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("probs must be a distribution (non-negative, sum 1)")

    def mean(self) -> float:
        return float(self.probs @ ATOMS)


def project(r: float, gamma: float, target_probs: np.ndarray) -> np.ndarray:
    """Project r + gamma * atoms onto the bin grid, splitting mass linearly.

    Every shifted atom is clamped into [0, 1] and its probability divided
    between the two bracketing bins in proportion to proximity.
    """
    target_probs = np.asarray(target_probs, dtype=np.float64)
    y = np.clip(r + gamma * ATOMS, 0.0, 1.0)
    b = y * (N_ATOMS - 1)
    lo = np.floor(b).astype(np.int64)
    hi = np.ceil(b).astype(np.int64)
    frac = b - lo
    out = np.zeros(N_ATOMS)
    np.add.at(out, lo, target_probs * (1.0 - frac))
    np.add.at(out, hi, target_probs * frac)
    return out


def project_batch(rewards: np.ndarray, gamma: float, target_probs: np.ndarray) -> np.ndarray:
    """Row-wise ``project`` over a batch, via flat bincount scatter."""
    n = len(rewards)
    y = np.clip(rewards[:, None] + gamma * ATOMS[None, :], 0.0, 1.0)
    b = y * (N_ATOMS - 1)
    lo = np.floor(b).astype(np.int64)
    hi = np.ceil(b).astype(np.int64)
    frac = b - lo
    base = (np.arange(n) * N_ATOMS)[:, None]
    flat = np.bincount(
        (base + lo).ravel(), weights=(target_probs * (1.0 - frac)).ravel(), minlength=n * N_ATOMS
    )
    flat += np.bincount(
        (base + hi).ravel(), weights=(target_probs * frac).ravel(), minlength=n * N_ATOMS
    )
    return flat.reshape(n, N_ATOMS)


def td_loss(predicted: np.ndarray, projected: np.ndarray) -> tuple[float, np.ndarray]:
    """KL(projected || predicted) and its gradient w.r.t. the prediction.

    The target is fixed; the prediction is clamped at 1e-12 before the log so
    zero-probability bins cannot blow up.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    projected = np.asarray(projected, dtype=np.float64)
    q = np.maximum(predicted, 1e-12)
    mask = projected > 0
    loss = float(np.sum(projected[mask] * (np.log(projected[mask]) - np.log(q[mask]))))
    grad = np.where(mask, -projected / q, 0.0)
    return loss, grad


@dataclass
class ActorOutput:
    continuous: np.ndarray  # (2,) velocity, already tanh-bounded
    binary_logits: np.ndarray  # (2,) stamp off/on


def bc_loss(out: ActorOutput, demo_action: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Imitation loss for one successful demo action.

    Squared L2 on the velocity head plus cross-entropy of the stamp softmax
    against the demonstrated stamp. Returns (loss, d_continuous, d_logits).
    """
    demo_action = np.asarray(demo_action, dtype=np.float64)
    velocity, stamp = demo_action[:2], int(demo_action[2])
    diff = out.continuous - velocity
    p = _softmax_rows(out.binary_logits)
    onehot = np.zeros(2)
    onehot[stamp] = 1.0
    loss = float(diff @ diff - np.log(max(p[stamp], 1e-300)))
    return loss, 2.0 * diff, p - onehot


def gumbel_softmax(logits: np.ndarray, tau: float, rng: np.random.Generator) -> np.ndarray:
    """Differentiable relaxed one-hot sample: softmax((logits + Gumbel) / tau)."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    noise = rng.gumbel(0.0, 1.0, size=np.shape(logits))
    return _softmax_rows((np.asarray(logits, dtype=np.float64) + noise) / tau)


def gumbel_softmax_grad(y: np.ndarray, d_y: np.ndarray, tau: float) -> np.ndarray:
    """Backprop through gumbel_softmax: gradient w.r.t. the logits."""
    inner = d_y - (d_y * y).sum(axis=-1, keepdims=True)
    return y * inner / tau


def progress_weight(t: int, horizon: int, mode: str = "none", omega: float = 0.1) -> float:
    """Loss weight for a transition at step t of an episode of length horizon."""
    if not 1 <= t <= horizon:
        raise ValueError(f"t={t} outside 1..{horizon}")
    if mode == "none":
        return 1.0
    if mode == "fixed":
        return 1.0 if t == horizon else omega
    if mode == "quadratic":
        return (t / horizon) ** 2
    raise ValueError(f"unknown progress mode {mode!r}")


def progress_weight_batch(
    t: np.ndarray, horizon: np.ndarray, mode: str = "none", omega: float = 0.1
) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    horizon = np.asarray(horizon, dtype=np.float64)
    if np.any(t < 1) or np.any(t > horizon):
        raise ValueError("t outside 1..horizon in batch")
    if mode == "none":
        return np.ones_like(t)
    if mode == "fixed":
        return np.where(t == horizon, 1.0, omega)
    if mode == "quadratic":
        return (t / horizon) ** 2
    raise ValueError(f"unknown progress mode {mode!r}")


def bc_anneal(step: int, lambda0: float, n_steps: int) -> float:
    """Linear decay of the imitation weight: lambda0 * max(0, 1 - step/n_steps)."""
    if n_steps <= 0:
        raise ValueError("anneal horizon must be positive")
    if step < 0:
        raise ValueError("step must be >= 0")
    return lambda0 * max(0.0, 1.0 - step / n_steps)


@dataclass
class TrainWeights:
    bc_lambda0: float = 1.0
    bc_anneal_steps: int = 100_000
    progress_mode: str = "none"  # none | fixed | quadratic
    omega: float = 0.1
    gamma: float = 0.99
    gumbel_tau: float = 1.0

    def bc_weight(self, step: int) -> float:
        return bc_anneal(step, self.bc_lambda0, self.bc_anneal_steps)


class Actor:
    """Velocity + stamp policy head over a dense net."""

    def __init__(self, in_dim: int, hidden=(64, 64), max_speed: float = 0.05, seed: int = 0,
                 net: DenseNet | None = None):
        self.net = net if net is not None else DenseNet.create(
            [in_dim, *hidden, 4], seed=seed
        )
        self.max_speed = max_speed
        self._tanh_u: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns (continuous velocity, binary logits); keeps the tape."""
        raw = self.net.forward(x)
        self._tanh_u = np.tanh(raw[..., :2])
        return self.max_speed * self._tanh_u, raw[..., 2:]

    def output(self, x: np.ndarray) -> ActorOutput:
        cont, logits = self.forward(x)
        return ActorOutput(continuous=cont, binary_logits=logits)

    def backward_heads(self, d_continuous: np.ndarray, d_logits: np.ndarray):
        """Chain head gradients through the tanh bound into the net."""
        d_u = d_continuous * self.max_speed * (1.0 - self._tanh_u**2)
        upstream = np.concatenate([d_u, d_logits], axis=-1)
        grads, _ = self.net.backward(upstream)
        return grads

    def act(
        self,
        x: np.ndarray,
        explore_sigma: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, int]:
        """Deterministic action (argmax stamp), optional Gaussian velocity noise."""
        cont, logits = self.forward(x)
        if explore_sigma > 0 and rng is not None:
            cont = cont + rng.normal(0.0, explore_sigma, size=2)
        return cont, int(np.argmax(logits))


class Critic:
    """Categorical return distribution over (state, action, goal)."""

    def __init__(self, state_dim: int, goal_dim: int, hidden=(64, 64), seed: int = 1,
                 net: DenseNet | None = None):
        self.state_dim = state_dim
        self.goal_dim = goal_dim
        in_dim = state_dim + 2 + 2 + goal_dim
        self.net = net if net is not None else DenseNet.create(
            [in_dim, *hidden, N_ATOMS], seed=seed
        )

    def compose_input(
        self, state: np.ndarray, a_cont: np.ndarray, a_bin_onehot: np.ndarray, goal: np.ndarray
    ) -> np.ndarray:
        return np.concatenate([state, a_cont, a_bin_onehot, goal], axis=-1)

    def probs(self, x: np.ndarray) -> np.ndarray:
        return _softmax_rows(self.net.forward(x))

    def action_slices(self) -> tuple[slice, slice]:
        """Positions of (continuous, binary) action inside the critic input."""
        start = self.state_dim
        return slice(start, start + 2), slice(start + 2, start + 4)


def actor_loss(
    critic: Critic,
    state: np.ndarray,
    goal: np.ndarray,
    out: ActorOutput,
    tau: float,
    rng: np.random.Generator,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Negative expected return of the relaxed action under the critic.

    The stamp logits are reparameterized with Gumbel-Softmax so the value
    gradient reaches both heads; critic parameters are treated as frozen.
    Returns (loss, d_continuous, d_logits).
    """
    y = gumbel_softmax(out.binary_logits, tau, rng)
    x = critic.compose_input(state, out.continuous, y, goal)
    probs = critic.probs(x)
    eq = float(probs @ ATOMS)
    d_logits_critic = -probs * (ATOMS - eq)
    _, d_input = critic.net.backward(d_logits_critic, with_param_grads=False)
    cont_slice, bin_slice = critic.action_slices()
    d_cont = d_input[cont_slice]
    d_y = d_input[bin_slice]
    return -eq, d_cont, gumbel_softmax_grad(y, d_y, tau)


def onehot_stamp(stamp: np.ndarray) -> np.ndarray:
    """(n,) 0/1 stamps -> (n, 2) one-hot rows."""
    stamp = np.asarray(stamp)
    out = np.zeros((len(stamp), 2))
    out[np.arange(len(stamp)), stamp.astype(np.int64)] = 1.0
    return out


@dataclass
class Batch:
    """Training mini-batch; ``state`` is the policy input (raw, embedding)."""

    state: np.ndarray  # (B, state_dim)
    a_cont: np.ndarray  # (B, 2)
    a_stamp: np.ndarray  # (B,)
    next_state: np.ndarray  # (B, state_dim)
    goal: np.ndarray  # (B, goal_dim)
    reward: np.ndarray  # (B,)
    demo: np.ndarray  # (B,) bool
    success: np.ndarray  # (B,) bool
    t: np.ndarray  # (B,) 1-based transition index
    horizon: np.ndarray  # (B,) episode length


class GoalAgent:
    """Actor/critic pair with targets, optimizers and the full update rule."""

    def __init__(
        self,
        state_dim: int,
        goal_dim: int,
        weights: TrainWeights | None = None,
        hidden=(64, 64),
        lr: float = 1e-3,
        polyak_tau: float = 0.005,
        weight_decay: float = 0.0,
        max_speed: float = 0.05,
        explore_sigma: float = 0.01,
        seed: int = 0,
    ):
        self.weights = weights if weights is not None else TrainWeights()
        self.state_dim = state_dim
        self.goal_dim = goal_dim
        self.explore_sigma = explore_sigma
        self.polyak_tau = polyak_tau
        self.weight_decay = weight_decay
        self.actor = Actor(state_dim + goal_dim, hidden, max_speed, seed=seed)
        self.critic = Critic(state_dim, goal_dim, hidden, seed=seed + 1)
        self.actor_target = Actor(state_dim + goal_dim, hidden, max_speed,
                                  net=self.actor.net.clone())
        self.critic_target = Critic(state_dim, goal_dim, hidden,
                                    net=self.critic.net.clone())
        self.opt_actor = Adam(self.actor.net, lr=lr)
        self.opt_critic = Adam(self.critic.net, lr=lr)
        self.update_count = 0

    def policy_input(self, state: np.ndarray, goal: np.ndarray) -> np.ndarray:
        return np.concatenate([state, goal], axis=-1)

    def act(self, state: np.ndarray, goal: np.ndarray, explore_rng=None):
        sigma = self.explore_sigma if explore_rng is not None else 0.0
        return self.actor.act(self.policy_input(state, goal), sigma, explore_rng)

    def update(self, batch: Batch, rng: np.random.Generator) -> dict:
        """One critic + actor step with target-network Polyak averaging."""
        n = len(batch.reward)
        if n == 0:
            raise ValueError("empty batch")
        if np.any(batch.demo & ~batch.success):
            raise ValueError("demo-flagged transitions must come from successful trajectories")
        w = self.weights
        lp = progress_weight_batch(batch.t, batch.horizon, w.progress_mode, w.omega)

        # --- critic: project one-step target, minimize weighted KL ---
        next_in = self.policy_input(batch.next_state, batch.goal)
        cont_t, logits_t = self.actor_target.forward(next_in)
        bin_t = onehot_stamp(np.argmax(logits_t, axis=-1))
        target_probs = self.critic_target.probs(
            self.critic_target.compose_input(batch.next_state, cont_t, bin_t, batch.goal)
        )
        projected = project_batch(batch.reward, w.gamma, target_probs)

        q_probs = self.critic.probs(
            self.critic.compose_input(batch.state, batch.a_cont, onehot_stamp(batch.a_stamp),
                                      batch.goal)
        )
        q_safe = np.maximum(q_probs, 1e-12)
        mask = projected > 0
        td_per = np.where(mask, projected * (np.log(np.where(mask, projected, 1.0)) - np.log(q_safe)), 0.0).sum(axis=1)
        critic_loss = float((lp * td_per).mean())
        d_logits = (q_probs - projected) * (lp[:, None] / n)
        critic_grads, _ = self.critic.net.backward(d_logits)
        self._apply(self.opt_critic, self.critic.net, critic_grads)

        # --- actor: DPG through the critic + annealed BC on demo rows ---
        cont, logits = self.actor.forward(self.policy_input(batch.state, batch.goal))
        y = gumbel_softmax(logits, w.gumbel_tau, rng)
        probs_pi = self.critic.probs(
            self.critic.compose_input(batch.state, cont, y, batch.goal)
        )
        eq = probs_pi @ ATOMS
        pg_loss = float(-(lp * eq).mean())
        d_logits_c = -probs_pi * (ATOMS[None, :] - eq[:, None]) * (lp[:, None] / n)
        _, d_input = self.critic.net.backward(d_logits_c, with_param_grads=False)
        cont_slice, bin_slice = self.critic.action_slices()
        d_cont = d_input[:, cont_slice].copy()
        d_log = gumbel_softmax_grad(y, d_input[:, bin_slice], w.gumbel_tau)

        lam_bc = w.bc_weight(self.update_count)
        bc_mask = batch.demo & batch.success
        bc_mean = 0.0
        if lam_bc > 0 and bc_mask.any():
            rows = np.flatnonzero(bc_mask)
            diff = cont[rows] - batch.a_cont[rows]
            p = _softmax_rows(logits[rows])
            stamps = batch.a_stamp[rows].astype(np.int64)
            picked = np.maximum(p[np.arange(len(rows)), stamps], 1e-300)
            bc_per = (diff * diff).sum(axis=1) - np.log(picked)
            bc_mean = float(bc_per.mean())
            onehot = onehot_stamp(stamps)
            scale = (lam_bc / n) * lp[rows, None]
            d_cont[rows] += scale * 2.0 * diff
            d_log[rows] += scale * (p - onehot)
        actor_grads = self.actor.backward_heads(d_cont, d_log)
        self._apply(self.opt_actor, self.actor.net, actor_grads)

        polyak_update(self.actor_target.net, self.actor.net, self.polyak_tau)
        polyak_update(self.critic_target.net, self.critic.net, self.polyak_tau)
        self.update_count += 1
        return {
            "td_loss": critic_loss,
            "pg_loss": pg_loss,
            "bc_loss": bc_mean,
            "bc_weight": lam_bc,
            "bc_to_pg_ratio": abs(lam_bc * bc_mean) / max(abs(pg_loss), 1e-12),
        }

    def _apply(self, opt: Adam, net: DenseNet, grads) -> None:
        if self.weight_decay > 0:
            grads = [
                (gw + self.weight_decay * layer.weight, gb + self.weight_decay * layer.bias)
                for (gw, gb), layer in zip(grads, net.layers)
            ]
        opt.step(net, grads)

    # -- checkpointing --

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.actor.net.save(directory / "actor.net")
        self.critic.net.save(directory / "critic.net")
        self.actor_target.net.save(directory / "actor_target.net")
        self.critic_target.net.save(directory / "critic_target.net")
        meta = {
            "weights": asdict(self.weights),
            "state_dim": self.state_dim,
            "goal_dim": self.goal_dim,
            "polyak_tau": self.polyak_tau,
            "weight_decay": self.weight_decay,
            "max_speed": self.actor.max_speed,
            "explore_sigma": self.explore_sigma,
            "lr": self.opt_actor.lr,
            "update_count": self.update_count,
        }
        (directory / "weights.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "GoalAgent":
        directory = Path(directory)
        meta = json.loads((directory / "weights.json").read_text(encoding="utf-8"))
        agent = cls(
            state_dim=meta["state_dim"],
            goal_dim=meta["goal_dim"],
            weights=TrainWeights(**meta["weights"]),
            lr=meta["lr"],
            polyak_tau=meta["polyak_tau"],
            weight_decay=meta["weight_decay"],
            max_speed=meta["max_speed"],
            explore_sigma=meta["explore_sigma"],
        )
        agent.actor.net = DenseNet.load(directory / "actor.net")
        agent.critic.net = DenseNet.load(directory / "critic.net")
        agent.actor_target.net = DenseNet.load(directory / "actor_target.net")
        agent.critic_target.net = DenseNet.load(directory / "critic_target.net")
        agent.update_count = meta["update_count"]
        return agent
