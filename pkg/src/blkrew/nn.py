"""Small feed-forward networks with hand-written backward passes.

Every parameterized layer keeps its weights in GEMM form: ``W[out, in]`` for
fully connected layers and ``W[out_channels, C*kh*kw]`` for convolutions. Rows
are output units (filters) and columns are inputs, so row pruning removes
filters and column pruning removes input features or channel taps.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .tensor import ConvSpec, ShapeError, col2im, gemm, im2col

KINDS = ("fully_connected", "conv2d", "relu", "softmax_xent")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or weights."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a :class:`Network`.

    ``dims`` by kind:

    * ``fully_connected``: ``(in_features, out_features)``
    * ``conv2d``: ``(C, H, W, out_channels, kh, kw, stride, padding)``
    * ``relu``: ``(size,)``
    * ``softmax_xent``: ``(classes,)``
    """

    kind: str
    dims: tuple[int, ...]
    has_bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        expected = {"fully_connected": 2, "conv2d": 8, "relu": 1, "softmax_xent": 1}[self.kind]
        if len(self.dims) != expected:
            raise ValueError(f"{self.kind} takes {expected} dims, got {self.dims}")

    @property
    def parameterized(self) -> bool:
        return self.kind in ("fully_connected", "conv2d")

    def conv_spec(self) -> ConvSpec:
        c, _, _, o, kh, kw, s, p = self.dims
        return ConvSpec(c, o, kh, kw, s, p)

    @property
    def in_size(self) -> int:
        if self.kind == "conv2d":
            c, h, w = self.dims[:3]
            return c * h * w
        return self.dims[0]

    @property
    def out_size(self) -> int:
        if self.kind == "fully_connected":
            return self.dims[1]
        if self.kind == "conv2d":
            oh, ow = self.conv_spec().output_hw(self.dims[1], self.dims[2])
            return self.dims[3] * oh * ow
        return self.dims[0]

    @property
    def weight_shape(self) -> tuple[int, int]:
        if self.kind == "fully_connected":
            return self.dims[1], self.dims[0]
        if self.kind == "conv2d":
            spec = self.conv_spec()
            return spec.out_channels, spec.patch_size
        raise ValueError(f"{self.kind} has no weights")


@dataclass
class Network:
    layers: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        check_chain(self.layers)
        shapes = [l.weight_shape for l in self.layers if l.parameterized]
        if len(shapes) < 1:
            raise ValueError("network needs at least one parameterized layer")
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ValueError("one weight matrix and one bias vector per parameterized layer")
        for i, (w, b, s) in enumerate(zip(self.weights, self.biases, shapes)):
            if w.shape != s or b.shape != (s[0],):
                raise ShapeError(f"layer {i}: weights {w.shape}, bias {b.shape}, expected {s}")

    @property
    def param_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.parameterized]

    @property
    def input_size(self) -> int:
        return self.layers[0].in_size

    @property
    def num_classes(self) -> int:
        return self.layers[-1].dims[0]

    def copy(self) -> "Network":
        return Network(list(self.layers), [w.copy() for w in self.weights],
                       [b.copy() for b in self.biases])

    def weight_count(self) -> int:
        return sum(w.size for w in self.weights)


@dataclass
class Grads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class TrainState:
    lr: float
    seed: int = 0
    epoch: int = 0
    batch_size: int = 32
    momentum: float = 0.0
    velocity: list[np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        self.rng = np.random.default_rng(self.seed)


def check_chain(layers: list[LayerSpec]) -> None:
    if not layers or layers[-1].kind != "softmax_xent":
        raise ValueError("network must end with a softmax_xent layer")
    for a, b in zip(layers, layers[1:]):
        if a.kind == "softmax_xent":
            raise ValueError("softmax_xent must be the last layer")
        if a.out_size != b.in_size:
            raise ShapeError(f"{a.kind}{a.dims} outputs {a.out_size}, "
                             f"{b.kind}{b.dims} expects {b.in_size}")


def init_network(layers: list[LayerSpec], seed: int = 0) -> Network:
    """Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    check_chain(layers)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for layer in layers:
        if not layer.parameterized:
            continue
        rows, cols = layer.weight_shape
        if layer.kind == "conv2d":
            spec = layer.conv_spec()
            fan_in = spec.patch_size
            fan_out = spec.out_channels * spec.kernel_h * spec.kernel_w
        else:
            fan_in, fan_out = cols, rows
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(rows, cols)))
        biases.append(np.zeros(rows))
    return Network(list(layers), weights, biases)


def mlp(sizes: list[int], seed: int = 0, conv: LayerSpec | None = None) -> Network:
    """``sizes = [in, h1, ..., classes]`` with ReLU between FC layers.

    An optional leading conv2d layer (followed by ReLU) feeds the first FC.
    """
    layers: list[LayerSpec] = []
    if conv is not None:
        layers += [conv, LayerSpec("relu", (conv.out_size,))]
        sizes = [conv.out_size] + list(sizes[1:])
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        layers.append(LayerSpec("fully_connected", (a, b)))
        if i < len(sizes) - 2:
            layers.append(LayerSpec("relu", (b,)))
    layers.append(LayerSpec("softmax_xent", (sizes[-1],)))
    return init_network(layers, seed)


def _flatten_batch(net: Network, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    x = x.reshape(x.shape[0], -1)
    if x.shape[1] != net.input_size:
        raise ShapeError(f"batch has {x.shape[1]} features, network expects {net.input_size}")
    return np.ascontiguousarray(x)


def forward(net: Network, batch):
    """Return ``(logits, cache)``; ``cache`` holds what backward needs per layer."""
    x = _flatten_batch(net, batch)
    cache = []
    pi = 0
    for layer in net.layers:
        if layer.kind == "fully_connected":
            w, b = net.weights[pi], net.biases[pi]
            cache.append(x)
            x = gemm(x, w.T)
            if layer.has_bias:
                x += b
            pi += 1
        elif layer.kind == "conv2d":
            w, b = net.weights[pi], net.biases[pi]
            spec = layer.conv_spec()
            c, h, wd = layer.dims[:3]
            cols = [im2col(s.reshape(c, h, wd), spec) for s in x]
            out = np.stack([gemm(w, cl) for cl in cols])
            if layer.has_bias:
                out += b[None, :, None]
            cache.append(cols)
            x = out.reshape(x.shape[0], -1)
            pi += 1
        elif layer.kind == "relu":
            cache.append(x)
            x = np.maximum(x, 0.0)
        else:
            cache.append(None)
    return x, cache


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    n = logits.shape[0]
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, labels]))
    probs = np.exp(shifted - log_z[:, None])
    probs[rows, labels] -= 1.0
    return loss, probs / n


def _check_labels(net: Network, labels, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n == 0:
        raise ValueError("empty batch")
    labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= net.num_classes:
        raise ValueError(f"labels must lie in [0, {net.num_classes})")
    return labels


def loss_and_grad(net: Network, batch, labels) -> tuple[float, Grads]:
    logits, cache = forward(net, batch)
    labels = _check_labels(net, labels, logits.shape[0])
    loss, delta = softmax_xent(logits, labels)
    gw: list[np.ndarray] = [None] * len(net.weights)  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * len(net.weights)  # type: ignore[list-item]
    pi = len(net.weights)
    for layer, saved in zip(reversed(net.layers), reversed(cache)):
        if layer.kind == "softmax_xent":
            continue
        if layer.kind == "relu":
            delta = delta * (saved > 0.0)
            continue
        pi -= 1
        w = net.weights[pi]
        if layer.kind == "fully_connected":
            gw[pi] = gemm(delta.T, saved)
            gb[pi] = delta.sum(axis=0) if layer.has_bias else np.zeros(w.shape[0])
            delta = gemm(delta, w)
        else:
            spec = layer.conv_spec()
            c, h, wd = layer.dims[:3]
            dy = delta.reshape(delta.shape[0], spec.out_channels, -1)
            dw = np.zeros_like(w)
            wt = np.ascontiguousarray(w.T)
            dx = np.empty((delta.shape[0], c * h * wd))
            for s, cols in enumerate(saved):
                dw += gemm(dy[s], cols.T)
                dx[s] = col2im(gemm(wt, dy[s]), spec, h, wd).ravel()
            gw[pi] = dw
            gb[pi] = dy.sum(axis=(0, 2)) if layer.has_bias else np.zeros(w.shape[0])
            delta = dx
    return loss, Grads(gw, gb)


def sgd_step(net: Network, grads: Grads, reg_grads=None, lr: float = 0.01,
             masks=None, state: TrainState | None = None) -> Network:
    """``W <- W - lr * (grads + reg_grads)`` in place; biases take ``grads`` only.

    Entries where ``masks[i]`` is False are written as exactly ``0.0``. With
    ``state.momentum > 0`` the combined gradient goes through a heavy-ball
    velocity kept on ``state``.
    """
    if len(grads.weights) != len(net.weights):
        raise ShapeError("one gradient per parameterized layer required")
    momentum = state.momentum if state is not None else 0.0
    if momentum and state.velocity is None:
        state.velocity = [np.zeros_like(w) for w in net.weights] + \
                         [np.zeros_like(b) for b in net.biases]
    nw = len(net.weights)
    for i, w in enumerate(net.weights):
        g = grads.weights[i]
        if g.shape != w.shape:
            raise ShapeError(f"layer {i}: gradient {g.shape} vs weights {w.shape}")
        if reg_grads is not None and reg_grads[i] is not None:
            if reg_grads[i].shape != w.shape:
                raise ShapeError(f"layer {i}: reg gradient {reg_grads[i].shape} vs {w.shape}")
            g = g + reg_grads[i]
        gb = grads.biases[i]
        if momentum:
            v, vb = state.velocity[i], state.velocity[nw + i]
            v *= momentum
            v += g
            vb *= momentum
            vb += gb
            g, gb = v, vb
        w -= lr * g
        net.biases[i] -= lr * gb
        if masks is not None and masks[i] is not None:
            w[~masks[i]] = 0.0
            if momentum:
                state.velocity[i][~masks[i]] = 0.0
    return net


def predict(net: Network, data, chunk: int = 1024) -> np.ndarray:
    x = _flatten_batch(net, data)
    out = []
    for s in range(0, x.shape[0], chunk):
        logits, _ = forward(net, x[s:s + chunk])
        out.append(np.argmax(logits, axis=1))  # argmax picks the lowest index on ties
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(net: Network, data, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty dataset")
    return float(np.mean(predict(net, data) == labels))


def train_epoch(net: Network, data, labels, state: TrainState, reg=None, masks=None) -> float:
    """One shuffled pass of minibatch SGD; returns the mean data loss.

    ``reg`` is an optional callable ``weights -> list of gradient arrays``
    evaluated at the current weights before every step.
    """
    x = _flatten_batch(net, data)
    labels = np.asarray(labels)
    order = state.rng.permutation(x.shape[0])
    total = 0.0
    for s in range(0, len(order), state.batch_size):
        idx = order[s:s + state.batch_size]
        loss, grads = loss_and_grad(net, x[idx], labels[idx])
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at epoch {state.epoch}, step {s // state.batch_size}")
        if masks is not None:
            for g, m in zip(grads.weights, masks):
                if m is not None:
                    g[~m] = 0.0
        rg = reg(net.weights) if reg is not None else None
        sgd_step(net, grads, rg, state.lr, masks=masks, state=state)
        total += loss * len(idx)
    if not all(np.isfinite(w).all() for w in net.weights):
        raise DivergenceError(f"non-finite weights after epoch {state.epoch}")
    state.epoch += 1
    return total / x.shape[0]


def fit(net: Network, data, labels, epochs: int, state: TrainState, reg=None, masks=None) -> list[float]:
    return [train_epoch(net, data, labels, state, reg=reg, masks=masks) for _ in range(epochs)]
