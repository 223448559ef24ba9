"""Small dense networks with hand-rolled reverse-mode gradients.

Everything runs on float64 numpy. Networks keep an explicit forward tape so
loss code can push an analytic upstream gradient back through them; that
keeps every gradient in the project checkable against finite differences.
No convolutions, no GPU, no dynamic shapes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")


class DimensionError(ValueError):
    """Input or layer dimensions do not compose."""


class NonFiniteGradError(ValueError):
    """An optimizer step received NaN/Inf gradients."""


def _act(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(pre)
    if name == "relu":
        return np.maximum(pre, 0.0)
    return pre


def _act_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - post * post
    if name == "relu":
        return (pre > 0.0).astype(np.float64)
    return np.ones_like(pre)


@dataclass
class Layer:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str


class DenseNet:
    """Fully connected net: x -> act(x @ W + b) per layer.

    ``forward`` records a tape; ``backward`` consumes it and returns the
    gradient of ``sum(upstream * output)`` w.r.t. every parameter and the
    input. Accepts a single vector (d,) or a batch (n, d).
    """

    def __init__(self, layers: list[Layer], seed: int | None = None):
        for i in range(len(layers) - 1):
            if layers[i].weight.shape[1] != layers[i + 1].weight.shape[0]:
                raise DimensionError(
                    f"layer {i} output dim {layers[i].weight.shape[1]} != "
                    f"layer {i + 1} input dim {layers[i + 1].weight.shape[0]}"
                )
        for i, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {layer.activation!r}")
        self.layers = layers
        self.seed = seed
        # list of (input, pre-activation, post-activation) per layer
        self._tape: list[tuple[np.ndarray, np.ndarray, np.ndarray]] | None = None

    @classmethod
    def create(
        cls,
        sizes: list[int],
        activations: list[str] | None = None,
        seed: int = 0,
    ) -> "DenseNet":
        """Build a net with uniform +/- 1/sqrt(fan_in) weight init."""
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if activations is None:
            activations = ["tanh"] * (len(sizes) - 2) + ["identity"]
        if len(activations) != len(sizes) - 1:
            raise ValueError("one activation per layer required")
        rng = np.random.default_rng(seed)
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            bound = 1.0 / np.sqrt(fan_in)
            weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            bias = rng.uniform(-bound, bound, size=fan_out)
            layers.append(Layer(weight, bias, act))
        return cls(layers, seed=seed)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def n_params(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, self._tape = self.forward_tape(x)
        return out

    def forward_tape(self, x: np.ndarray):
        """Forward pass that hands the activation tape back to the caller.

        Use this when two passes through the same net must both be
        differentiated (the plain ``forward`` keeps only the latest tape).
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.in_dim:
            raise DimensionError(f"input dim {h.shape[1]} != net input dim {self.in_dim}")
        tape = []
        for layer in self.layers:
            pre = h @ layer.weight + layer.bias
            post = _act(layer.activation, pre)
            tape.append((h, pre, post))
            h = post
        if not np.all(np.isfinite(h)):
            raise FloatingPointError("non-finite activations in forward pass")
        return (h[0] if single else h), tape

    def backward(
        self, upstream: np.ndarray, with_param_grads: bool = True, tape=None
    ) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Backprop ``sum(upstream * output)`` through a forward tape.

        Uses the tape of the most recent ``forward`` unless one from
        ``forward_tape`` is passed explicitly. Returns ``(param_grads,
        input_grad)`` where ``param_grads`` is a (dW, db) pair per layer
        (empty when ``with_param_grads`` is off, the cheap path for frozen
        networks).
        """
        if tape is None:
            tape = self._tape
        if tape is None:
            raise RuntimeError("backward called before forward")
        steps = tape
        up = np.asarray(upstream, dtype=np.float64)
        single = up.ndim == 1
        delta = up[None, :] if single else up
        if delta.shape != steps[-1][2].shape:
            raise DimensionError(
                f"upstream shape {delta.shape} != output shape {steps[-1][2].shape}"
            )
        grads: list[tuple[np.ndarray, np.ndarray]] = []
        for layer, (inp, pre, post) in zip(reversed(self.layers), reversed(steps)):
            delta = delta * _act_grad(layer.activation, pre, post)
            if with_param_grads:
                grads.append((inp.T @ delta, delta.sum(axis=0)))
            delta = delta @ layer.weight.T
        grads.reverse()
        return grads, (delta[0] if single else delta)

    def clone(self) -> "DenseNet":
        layers = [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        return DenseNet(layers, seed=self.seed)

    def copy_from(self, other: "DenseNet") -> None:
        for mine, theirs in zip(self.layers, other.layers):
            mine.weight[...] = theirs.weight
            mine.bias[...] = theirs.bias

    # -- serialization: JSON header + flat little-endian float64 params --

    def save(self, path) -> None:
        header = {
            "shapes": [list(l.weight.shape) for l in self.layers],
            "activations": [l.activation for l in self.layers],
            "seed": self.seed,
        }
        header_bytes = json.dumps(header).encode("utf-8")
        flat = np.concatenate(
            [np.concatenate([l.weight.ravel(), l.bias.ravel()]) for l in self.layers]
        ).astype("<f8")
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(header_bytes)))
            fh.write(header_bytes)
            fh.write(flat.tobytes())

    @classmethod
    def load(cls, path) -> "DenseNet":
        with open(path, "rb") as fh:
            (header_len,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(header_len).decode("utf-8"))
            flat = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
        layers = []
        offset = 0
        for shape, act in zip(header["shapes"], header["activations"]):
            fan_in, fan_out = shape
            weight = flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out).copy()
            offset += fan_in * fan_out
            bias = flat[offset : offset + fan_out].copy()
            offset += fan_out
            layers.append(Layer(weight, bias, act))
        if offset != flat.size:
            raise ValueError(f"parameter blob size {flat.size} does not match header")
        return cls(layers, seed=header.get("seed"))


class Adam:
    """Adaptive-moment optimizer state for one DenseNet."""

    def __init__(self, net: DenseNet, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in net.layers]
        self.v = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in net.layers]

    def step(self, net: DenseNet, grads: list[tuple[np.ndarray, np.ndarray]],
             lr: float | None = None) -> None:
        """Apply one update in place; rejects non-finite gradients."""
        for i, (gw, gb) in enumerate(grads):
            if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
                raise NonFiniteGradError(f"non-finite gradient in layer {i}")
        lr = self.lr if lr is None else lr
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for layer, (mw, mb), (vw, vb), (gw, gb) in zip(net.layers, self.m, self.v, grads):
            mw *= self.beta1
            mw += (1.0 - self.beta1) * gw
            mb *= self.beta1
            mb += (1.0 - self.beta1) * gb
            vw *= self.beta2
            vw += (1.0 - self.beta2) * gw * gw
            vb *= self.beta2
            vb += (1.0 - self.beta2) * gb * gb
            layer.weight -= lr * (mw / bias1) / (np.sqrt(vw / bias2) + self.eps)
            layer.bias -= lr * (mb / bias1) / (np.sqrt(vb / bias2) + self.eps)


def polyak_update(target: DenseNet, online: DenseNet, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, in place."""
    for t_layer, o_layer in zip(target.layers, online.layers):
        t_layer.weight *= 1.0 - tau
        t_layer.weight += tau * o_layer.weight
        t_layer.bias *= 1.0 - tau
        t_layer.bias += tau * o_layer.bias


def finite_difference_grads(
    net: DenseNet, loss_fn, h: float = 1e-5
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Central finite differences of ``loss_fn(net)`` w.r.t. every parameter.

    Test oracle; O(n_params) loss evaluations, so keep nets small.
    """
    grads = []
    for layer in net.layers:
        gw = np.zeros_like(layer.weight)
        for idx in np.ndindex(layer.weight.shape):
            orig = layer.weight[idx]
            layer.weight[idx] = orig + h
            up = loss_fn(net)
            layer.weight[idx] = orig - h
            down = loss_fn(net)
            layer.weight[idx] = orig
            gw[idx] = (up - down) / (2.0 * h)
        gb = np.zeros_like(layer.bias)
        for idx in np.ndindex(layer.bias.shape):
            orig = layer.bias[idx]
            layer.bias[idx] = orig + h
            up = loss_fn(net)
            layer.bias[idx] = orig - h
            down = loss_fn(net)
            layer.bias[idx] = orig
            gb[idx] = (up - down) / (2.0 * h)
        grads.append((gw, gb))
    return grads
