"""Minimal dense neural-network engine: forward, backward, SGD with momentum.

Parameters are float32 throughout. Loss reduction runs in float64 so that
central finite differences remain a meaningful gradient oracle. Only the
layer types needed by the two reference CNNs (plus small test networks) are
implemented: valid 2d convolution with stride 1, overlapping max pooling,
ReLU, flatten, and fully-connected layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NumericError


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel_size: int
    has_bias: bool = True


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int = 1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int
    has_bias: bool = True


LayerSpec = Conv2d | MaxPool | ReLU | Flatten | Linear


def _propagate_shape(layers: list[LayerSpec], input_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Walk the layer list and return the output shape, validating composition."""
    shape = tuple(input_shape)
    for pos, spec in enumerate(layers):
        if isinstance(spec, Conv2d):
            if len(shape) != 3 or shape[0] != spec.in_channels:
                raise ConfigurationError(
                    f"layer {pos}: Conv2d expects {spec.in_channels} channels, input shape is {shape}"
                )
            h = shape[1] - spec.kernel_size + 1
            w = shape[2] - spec.kernel_size + 1
            if h <= 0 or w <= 0:
                raise ConfigurationError(f"layer {pos}: kernel {spec.kernel_size} too large for {shape}")
            shape = (spec.out_channels, h, w)
        elif isinstance(spec, MaxPool):
            if len(shape) != 3:
                raise ConfigurationError(f"layer {pos}: MaxPool needs a spatial input, got {shape}")
            h = (shape[1] - spec.window) // spec.stride + 1
            w = (shape[2] - spec.window) // spec.stride + 1
            if h <= 0 or w <= 0:
                raise ConfigurationError(f"layer {pos}: pool window {spec.window} too large for {shape}")
            shape = (shape[0], h, w)
        elif isinstance(spec, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(spec, Linear):
            if len(shape) != 1 or shape[0] != spec.in_features:
                raise ConfigurationError(
                    f"layer {pos}: Linear expects {spec.in_features} features, input shape is {shape}"
                )
            shape = (spec.out_features,)
        elif isinstance(spec, ReLU):
            pass
        else:
            raise ConfigurationError(f"layer {pos}: unknown layer spec {spec!r}")
    return shape


class Network:
    """An ordered layer list plus per-layer parameter and gradient tensors.

    Weights are initialized Kaiming-uniform, biases at zero. A Network is
    single-owner: clone it before training concurrently.
    """

    def __init__(self, layers, input_shape, seed=0, dtype=np.float32, _init=True):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.output_shape = _propagate_shape(self.layers, self.input_shape)
        self.dtype = dtype
        self.params: list[dict[str, np.ndarray]] = []
        self.grads: list[dict[str, np.ndarray]] = []
        rng = np.random.default_rng(seed)
        for spec in self.layers:
            p: dict[str, np.ndarray] = {}
            if isinstance(spec, Conv2d):
                fan_in = spec.in_channels * spec.kernel_size ** 2
                shape = (spec.out_channels, spec.in_channels, spec.kernel_size, spec.kernel_size)
                if _init:
                    bound = math.sqrt(6.0 / fan_in)
                    p["weight"] = rng.uniform(-bound, bound, shape).astype(dtype)
                else:
                    p["weight"] = np.zeros(shape, dtype)
                if spec.has_bias:
                    p["bias"] = np.zeros(spec.out_channels, dtype)
            elif isinstance(spec, Linear):
                shape = (spec.out_features, spec.in_features)
                if _init:
                    bound = math.sqrt(6.0 / spec.in_features)
                    p["weight"] = rng.uniform(-bound, bound, shape).astype(dtype)
                else:
                    p["weight"] = np.zeros(shape, dtype)
                if spec.has_bias:
                    p["bias"] = np.zeros(spec.out_features, dtype)
            self.params.append(p)
            self.grads.append({k: np.zeros_like(v) for k, v in p.items()})

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @property
    def param_count(self) -> int:
        return sum(v.size for p in self.params for v in p.values())

    def prunable_layers(self) -> list[int]:
        """Indices of layers whose weight tensors participate in masking."""
        return [i for i, s in enumerate(self.layers) if isinstance(s, (Conv2d, Linear))]

    def prunable_shapes(self) -> list[tuple[int, ...]]:
        return [self.params[i]["weight"].shape for i in self.prunable_layers()]

    def named_params(self):
        for i, p in enumerate(self.params):
            for name, arr in p.items():
                yield i, name, arr

    def params_copy(self) -> list[dict[str, np.ndarray]]:
        return [{k: v.copy() for k, v in p.items()} for p in self.params]

    def set_params(self, params: list[dict[str, np.ndarray]]) -> None:
        for mine, theirs in zip(self.params, params):
            for k in mine:
                if mine[k].shape != theirs[k].shape:
                    raise ValueError(f"parameter shape mismatch: {mine[k].shape} vs {theirs[k].shape}")
                mine[k][...] = theirs[k].astype(self.dtype, copy=False)

    def zero_grads(self) -> None:
        for g in self.grads:
            for arr in g.values():
                arr.fill(0)

    def clone(self) -> "Network":
        net = Network(self.layers, self.input_shape, dtype=self.dtype, _init=False)
        net.set_params(self.params)
        return net

    def astype(self, dtype) -> "Network":
        net = Network(self.layers, self.input_shape, dtype=dtype, _init=False)
        for mine, theirs in zip(net.params, self.params):
            for k in mine:
                mine[k][...] = theirs[k].astype(dtype)
        return net


def build_model(arch: str, seed: int = 0) -> Network:
    """Construct one of the two reference CNNs. Same seed, same parameters."""
    if arch == "mnist_cnn":
        layers = [
            Conv2d(1, 10, 5), MaxPool(3, 1), ReLU(),
            Conv2d(10, 20, 5), MaxPool(3, 1), ReLU(),
            Flatten(),
            Linear(5120, 50), ReLU(),
            Linear(50, 10),
        ]
        return Network(layers, (1, 28, 28), seed=seed)
    if arch == "cifar10_cnn":
        layers = [
            Conv2d(3, 6, 5), MaxPool(3, 1), ReLU(),
            Conv2d(6, 16, 5), MaxPool(3, 1), ReLU(),
            Flatten(),
            Linear(6400, 120), ReLU(),
            Linear(120, 84), ReLU(),
            Linear(84, 10),
        ]
        return Network(layers, (3, 32, 32), seed=seed)
    raise ConfigurationError(f"unknown architecture {arch!r}")


def make_mlp(input_shape, hidden, num_classes, seed=0) -> Network:
    """Small flatten-then-dense network for synthetic data and tests."""
    in_features = int(np.prod(input_shape))
    layers: list[LayerSpec] = [Flatten()]
    prev = in_features
    for width in hidden:
        layers += [Linear(prev, width), ReLU()]
        prev = width
    layers.append(Linear(prev, num_classes))
    return Network(layers, input_shape, seed=seed)


# ---------------------------------------------------------------------------
# forward / backward


def _layer_forward(spec, params, x):
    if isinstance(spec, Conv2d):
        k = spec.kernel_size
        n = x.shape[0]
        win = sliding_window_view(x, (k, k), axis=(2, 3))  # (N, C, Ho, Wo, k, k)
        ho, wo = win.shape[2], win.shape[3]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        out = cols @ params["weight"].reshape(spec.out_channels, -1).T
        if spec.has_bias:
            out = out + params["bias"]
        out = np.ascontiguousarray(out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2))
        return out, (x.shape, cols)
    if isinstance(spec, MaxPool):
        w, s = spec.window, spec.stride
        win = sliding_window_view(x, (w, w), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        flat = win.reshape(n, c, ho, wo, w * w)
        arg = flat.argmax(axis=4)  # first max wins: deterministic tie-break
        out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]
        return np.ascontiguousarray(out), (x.shape, arg)
    if isinstance(spec, ReLU):
        keep = x > 0
        return x * keep, keep
    if isinstance(spec, Flatten):
        return x.reshape(x.shape[0], -1), x.shape
    if isinstance(spec, Linear):
        out = x @ params["weight"].T
        if spec.has_bias:
            out = out + params["bias"]
        return out, x
    raise ConfigurationError(f"unknown layer spec {spec!r}")


def _layer_backward(spec, params, cache, dout):
    """Return (dx, grads-dict) for one layer."""
    if isinstance(spec, Conv2d):
        (n, c, h, w), cols = cache
        k = spec.kernel_size
        f = spec.out_channels
        ho, wo = h - k + 1, w - k + 1
        dflat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
        grads = {"weight": (dflat.T @ cols).reshape(params["weight"].shape)}
        if spec.has_bias:
            grads["bias"] = dout.sum(axis=(0, 2, 3))
        dwin = (dflat @ params["weight"].reshape(f, -1)).reshape(n, ho, wo, c, k, k)
        dx = np.zeros((n, c, h, w), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + ho, j:j + wo] += dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx, grads
    if isinstance(spec, MaxPool):
        (n, c, h, w), arg = cache
        ws, s = spec.window, spec.stride
        ho, wo = arg.shape[2], arg.shape[3]
        dx = np.zeros((n, c, h, w), dtype=dout.dtype)
        for idx in range(ws * ws):
            i, j = divmod(idx, ws)
            contrib = np.where(arg == idx, dout, 0)
            dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += contrib
        return dx, {}
    if isinstance(spec, ReLU):
        return dout * cache, {}
    if isinstance(spec, Flatten):
        return dout.reshape(cache), {}
    if isinstance(spec, Linear):
        grads = {"weight": dout.T @ cache}
        if spec.has_bias:
            grads["bias"] = dout.sum(axis=0)
        return dout @ params["weight"], grads
    raise ConfigurationError(f"unknown layer spec {spec!r}")


def _forward_cached(net: Network, batch: np.ndarray):
    if batch.shape[1:] != net.input_shape:
        raise ValueError(f"input shape {batch.shape[1:]} does not match network input {net.input_shape}")
    x = batch.astype(net.dtype, copy=False)
    caches = []
    for spec, params in zip(net.layers, net.params):
        x, cache = _layer_forward(spec, params, x)
        caches.append(cache)
    return x, caches


def forward(net: Network, batch: np.ndarray) -> np.ndarray:
    """Logits for a batch, shape (batch, num_classes)."""
    logits, _ = _forward_cached(net, batch)
    return logits


def _cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy in float64; also returns dloss/dlogits."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -float(logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def loss_and_backward(net: Network, batch: np.ndarray, labels) -> float:
    """Mean cross-entropy over the batch; leaves dloss/dparam in net.grads.

    Gradients are dense: masked-out weights receive their true gradient so
    that growth criteria can read it, and masking happens at the update step.
    """
    logits, caches = _forward_cached(net, batch)
    loss, dlogits = _cross_entropy(logits, labels)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss!r}")
    dx = dlogits.astype(net.dtype)
    for i in range(len(net.layers) - 1, -1, -1):
        dx, grads = _layer_backward(net.layers[i], net.params[i], caches[i], dx)
        for name, g in grads.items():
            net.grads[i][name][...] = g
    return loss


def _loss_only(net: Network, batch: np.ndarray, labels) -> float:
    logits, _ = _forward_cached(net, batch)
    loss, _ = _cross_entropy(logits, labels)
    return loss


def finite_diff_grads(net: Network, batch, labels, step: float) -> list[dict[str, np.ndarray]]:
    """Central-difference gradient estimate of every parameter.

    Evaluates the loss on a float64 copy of the network so the estimate is
    limited by truncation error, not float32 rounding.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    net64 = net.astype(np.float64)
    out = []
    for p in net64.params:
        est = {}
        for name, arr in p.items():
            g = np.zeros(arr.size, dtype=np.float64)
            flat = arr.reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + step
                up = _loss_only(net64, batch, labels)
                flat[idx] = orig - step
                down = _loss_only(net64, batch, labels)
                flat[idx] = orig
                g[idx] = (up - down) / (2.0 * step)
            est[name] = g.reshape(arr.shape)
        out.append(est)
    return out


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """SGD with momentum and L2 weight decay: v <- bv + (g + lw); w <- w - eta*v."""

    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: list[dict[str, np.ndarray]] | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")

    @classmethod
    def for_network(cls, net: Network, learning_rate, momentum=0.0, weight_decay=0.0):
        opt = cls(learning_rate, momentum, weight_decay)
        opt.velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in net.params]
        return opt


def sgd_step(net: Network, opt: OptimizerState, mask=None, grad_extra=None) -> None:
    """Apply one SGD-with-momentum step to every parameter.

    `mask` (layer index -> boolean weight mask) zeroes gradients at masked-out
    positions before the velocity update and re-zeroes the weights afterwards,
    so masked weights stay exactly 0.0. `grad_extra` adds a per-parameter term
    (such as a proximal penalty gradient) to the applied gradient without
    touching net.grads.
    """
    if opt.velocity is None:
        opt.velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in net.params]
    masked = mask.arrays if mask is not None else {}
    for i, p in enumerate(net.params):
        for name, w in p.items():
            g = net.grads[i][name]
            if grad_extra is not None and name in grad_extra[i]:
                g = g + grad_extra[i][name]
            m = masked.get(i) if name == "weight" else None
            if m is not None:
                g = g * m
            v = opt.velocity[i][name]
            upd = g + opt.weight_decay * w if opt.weight_decay != 0.0 else g
            np.multiply(v, opt.momentum, out=v)
            np.add(v, upd, out=v)
            w -= opt.learning_rate * v
            if m is not None:
                np.multiply(w, m, out=w)
