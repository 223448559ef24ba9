"""State/goal embeddings and the progress probe used to judge them.

Three encoder kinds share one interface: an ``engineered`` projection of the
raw state down to (pos_x, pos_y, mask_1, mask_2), a learned temporal
cycle-consistency net, and a raw-copy ``identity``. All of them accept an
optional additive-Gaussian noise wrapper for robustness studies. The KNN
progress evaluation grades how well an embedding orders states by episode
progress.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .env import RAW_STATE_DIM, Trajectory
from .nets import Adam, DenseNet

ENGINEERED_DIM = 4
ENGINEERED_COLS = (0, 1, 8, 9)  # agent position + visitation mask


class Encoder:
    """Maps raw states to latent vectors; frozen once training is done.

    ``noise_sigma > 0`` adds a seeded Gaussian draw per component on every
    call; with ``noise_sigma == 0`` outputs are bit-equal to the noiseless
    encoding and the noise stream is never touched.
    """

    def __init__(
        self,
        kind: str,
        noise_sigma: float = 0.0,
        net: DenseNet | None = None,
        noise_seed: int = 0,
        raw_dim: int = RAW_STATE_DIM,
    ):
        if kind not in ("engineered", "tcc", "identity"):
            raise ValueError(f"unknown encoder kind {kind!r}")
        if kind == "tcc" and net is None:
            raise ValueError("tcc encoder needs a trained net")
        if noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        self.kind = kind
        self.noise_sigma = noise_sigma
        self.net = net
        self.noise_seed = noise_seed
        self.raw_dim = raw_dim
        self._noise_rng = np.random.default_rng(noise_seed)

    @property
    def dim(self) -> int:
        if self.kind == "engineered":
            return ENGINEERED_DIM
        if self.kind == "identity":
            return self.raw_dim
        return self.net.out_dim

    def reseed_noise(self) -> None:
        """Rewind the noise stream (replay support for tests)."""
        self._noise_rng = np.random.default_rng(self.noise_seed)

    def encode(self, raw: np.ndarray) -> np.ndarray:
        """Embed one raw state (d,) or a batch (n, d)."""
        raw = np.asarray(raw, dtype=np.float64)
        if self.kind == "engineered":
            z = raw[..., ENGINEERED_COLS].copy()
        elif self.kind == "identity":
            z = raw.copy()
        else:
            z = self.net.forward(raw)
        if self.noise_sigma > 0:
            z = z + self._noise_rng.normal(0.0, self.noise_sigma, size=z.shape)
        return z

    # -- persistence: JSON spec plus an optional net blob next to it --

    def save(self, path) -> None:
        path = Path(path)
        spec = {
            "kind": self.kind,
            "noise_sigma": self.noise_sigma,
            "noise_seed": self.noise_seed,
            "raw_dim": self.raw_dim,
            "net_file": None,
        }
        if self.net is not None:
            net_file = path.with_suffix(".net")
            self.net.save(net_file)
            spec["net_file"] = net_file.name
        path.write_text(json.dumps(spec, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Encoder":
        path = Path(path)
        spec = json.loads(path.read_text(encoding="utf-8"))
        net = None
        if spec["net_file"]:
            net = DenseNet.load(path.parent / spec["net_file"])
        return cls(
            kind=spec["kind"],
            noise_sigma=spec["noise_sigma"],
            net=net,
            noise_seed=spec["noise_seed"],
            raw_dim=spec["raw_dim"],
        )


def tcc_loss(
    net: DenseNet, u_states: np.ndarray, v_states: np.ndarray, t: int
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Classification-based cycle-consistency loss for one (U, V, t) triple.

    Embeds both trajectories, soft-matches frame t of U into V via
    softmax(-squared distance), cycles the soft match back into U and scores
    the round trip with cross-entropy against frame t. Returns the loss and
    its gradient for every net parameter.
    """
    u_states = np.atleast_2d(np.asarray(u_states, dtype=np.float64))
    v_states = np.atleast_2d(np.asarray(v_states, dtype=np.float64))
    n, m = len(u_states), len(v_states)
    if n < 2 or m < 2:
        raise ValueError("cycle consistency needs at least 2 states per trajectory")
    if not 0 <= t < n:
        raise ValueError(f"index t={t} outside trajectory of length {n}")

    zu, tape_u = net.forward_tape(u_states)
    zv, tape_v = net.forward_tape(v_states)

    diff_uv = zu[t][None, :] - zv  # (m, d)
    logits_a = -np.sum(diff_uv * diff_uv, axis=1)
    alpha = _softmax(logits_a)
    v_tilde = alpha @ zv

    diff_vu = v_tilde[None, :] - zu  # (n, d)
    logits_b = -np.sum(diff_vu * diff_vu, axis=1)
    beta = _softmax(logits_b)
    loss = float(-np.log(max(beta[t], 1e-300)))

    # cross-entropy through the two softmaxes, back onto the embeddings
    g = beta.copy()
    g[t] -= 1.0  # dL/d logits_b
    d_vt = -2.0 * (g[:, None] * diff_vu).sum(axis=0)
    d_zu = 2.0 * g[:, None] * diff_vu

    d_alpha = zv @ d_vt
    d_logits_a = alpha * (d_alpha - float(alpha @ d_alpha))
    d_zu[t] += -2.0 * (d_logits_a[:, None] * diff_uv).sum(axis=0)
    d_zv = alpha[:, None] * d_vt[None, :] + 2.0 * d_logits_a[:, None] * diff_uv

    grads_u, _ = net.backward(d_zu, tape=tape_u)
    grads_v, _ = net.backward(d_zv, tape=tape_v)
    grads = [(gu_w + gv_w, gu_b + gv_b) for (gu_w, gu_b), (gv_w, gv_b) in zip(grads_u, grads_v)]
    return loss, grads


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def train_tcc(
    demos: list[Trajectory],
    epochs: int = 300,
    batch_size: int = 8,
    seed: int = 0,
    dim: int = 8,
    hidden: tuple[int, int] = (64, 64),
    lr: float = 1e-3,
) -> tuple[Encoder, list[float]]:
    """Fit the cycle-consistency encoder on demo states.

    Each epoch visits every demo once as U (shuffled), pairs it with a
    different random demo V and a random index t, and applies adaptive-moment
    steps on mini-batches of triples. Returns the frozen encoder and the
    per-epoch mean loss history.
    """
    if len(demos) < 2:
        raise ValueError("cycle-consistency training needs at least 2 demos")
    rng = np.random.default_rng(seed)
    raw_dim = demos[0].states.shape[1]
    net = DenseNet.create([raw_dim, *hidden, dim], seed=seed)
    opt = Adam(net, lr=lr)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(demos))
        epoch_losses = []
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            acc = None
            for u_idx in batch:
                v_idx = int(rng.integers(len(demos) - 1))
                if v_idx >= u_idx:
                    v_idx += 1
                u_states = demos[u_idx].states
                t = int(rng.integers(len(u_states)))
                loss, grads = tcc_loss(net, u_states, demos[v_idx].states, t)
                epoch_losses.append(loss)
                if acc is None:
                    acc = grads
                else:
                    acc = [(aw + gw, ab + gb) for (aw, ab), (gw, gb) in zip(acc, grads)]
            scale = 1.0 / len(batch)
            opt.step(net, [(gw * scale, gb * scale) for gw, gb in acc])
        history.append(float(np.mean(epoch_losses)))
    return Encoder("tcc", net=net), history


def cycle_back_accuracy(encoder: Encoder, traj_u: Trajectory, traj_v: Trajectory) -> float:
    """Fraction of U's frames whose soft cycle through V lands back on them."""
    zu = encoder.encode(traj_u.states)
    zv = encoder.encode(traj_v.states)
    hits = 0
    for t in range(len(zu)):
        d_uv = ((zu[t][None, :] - zv) ** 2).sum(axis=1)
        alpha = _softmax(-d_uv)
        v_tilde = alpha @ zv
        d_vu = ((v_tilde[None, :] - zu) ** 2).sum(axis=1)
        if int(np.argmax(_softmax(-d_vu))) == t:
            hits += 1
    return hits / len(zu)


def _progress_labels(n_states: int, buckets: int) -> np.ndarray:
    t = np.arange(n_states)
    horizon = max(n_states - 1, 1)
    return np.minimum(buckets - 1, (buckets * t) // horizon).astype(np.int64)


def _knn_classify(
    queries: np.ndarray, refs: np.ndarray, ref_labels: np.ndarray, k: int, buckets: int
) -> np.ndarray:
    """Euclidean k-NN with deterministic tie-breaking (distance, then bucket)."""
    preds = np.empty(len(queries), dtype=np.int64)
    d2 = ((queries[:, None, :] - refs[None, :, :]) ** 2).sum(axis=2)
    for qi in range(len(queries)):
        row = d2[qi]
        idx = np.argpartition(row, min(k, len(row) - 1))[:k]
        idx = idx[np.lexsort((idx, row[idx]))]
        votes = ref_labels[idx]
        counts = np.bincount(votes, minlength=buckets)
        best = counts.max()
        tied = np.flatnonzero(counts == best)
        if len(tied) == 1:
            preds[qi] = tied[0]
        else:
            sums = {b: row[idx[votes == b]].sum() for b in tied}
            preds[qi] = min(tied, key=lambda b: (sums[b], b))
    return preds


def knn_progress_eval(
    encoder: Encoder,
    train_trajs: list[Trajectory],
    test_trajs: list[Trajectory],
    buckets: int = 10,
    k: int = 5,
) -> tuple[float, float]:
    """Progress-bucket prediction accuracy of an embedding.

    Train accuracy is leave-one-trajectory-out over the train set; test
    accuracy classifies held-out states against all train states.
    """
    if buckets < 1:
        raise ValueError("buckets must be >= 1")
    if k < 1 or k % 2 == 0:
        raise ValueError("k must be a positive odd integer")
    if not train_trajs or not test_trajs:
        raise ValueError("train and test sets must be non-empty")

    train_embs = [encoder.encode(traj.states) for traj in train_trajs]
    train_labels = [_progress_labels(len(traj.states), buckets) for traj in train_trajs]

    correct = total = 0
    for i, (emb, labels) in enumerate(zip(train_embs, train_labels)):
        refs = np.concatenate([e for j, e in enumerate(train_embs) if j != i])
        ref_labels = np.concatenate([l for j, l in enumerate(train_labels) if j != i])
        preds = _knn_classify(emb, refs, ref_labels, k, buckets)
        correct += int((preds == labels).sum())
        total += len(labels)
    train_acc = correct / total

    all_refs = np.concatenate(train_embs)
    all_ref_labels = np.concatenate(train_labels)
    correct = total = 0
    for traj in test_trajs:
        emb = encoder.encode(traj.states)
        labels = _progress_labels(len(traj.states), buckets)
        preds = _knn_classify(emb, all_refs, all_ref_labels, k, buckets)
        correct += int((preds == labels).sum())
        total += len(labels)
    return train_acc, correct / total


def export_embeddings_csv(encoder: Encoder, trajectories: list[Trajectory], path) -> None:
    """Dump per-state embeddings as (traj_id, t, z_1..z_d) rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["traj_id", "t"] + [f"z_{i + 1}" for i in range(encoder.dim)])
        for traj_id, traj in enumerate(trajectories):
            z = np.atleast_2d(encoder.encode(traj.states))
            for t, row in enumerate(z):
                writer.writerow([traj_id, t] + [repr(float(v)) for v in row])
