"""Layer vocabulary for small CNNs on numpy.

Tensors are plain ``numpy.ndarray`` objects (float32 by default, NCHW for
images).  Every layer offers a forward pass that returns an activation cache,
an analytic backward pass, and exact FLOP / parameter accounting.

FLOP convention: one multiply-accumulate is two FLOPs, bias additions count
one FLOP per output element, and elementwise/pooling layers count one FLOP
per output element.
"""
from __future__ import annotations

import math
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ConfigError(ValueError):
    """Raised for invalid shapes, hyperparameters or model configurations."""


class TrainingAborted(RuntimeError):
    """Raised when a loss or gradient becomes non-finite during training."""


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}

    def output_shape(self, in_shape: Sequence[int]) -> Tuple[int, ...]:
        raise NotImplementedError

    def forward(self, x: np.ndarray, need_cache: bool = True):
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray, cache) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        raise NotImplementedError

    def flops(self, in_shape: Sequence[int]) -> int:
        """FLOPs for a single sample of shape ``in_shape`` (without batch axis)."""
        return int(np.prod(self.output_shape(in_shape)))

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def describe(self) -> dict:
        return {"kind": self.kind}

    def astype(self, dtype) -> "Layer":
        for k, v in self.params.items():
            self.params[k] = v.astype(dtype)
        return self

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.describe().items() if k != "kind")
        return f"{type(self).__name__}({args})"


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, c_in: int, c_out: int, k_h: int = 3, k_w: Optional[int] = None,
                 stride: int = 1, padding: int = 0, bias: bool = True, rng=None):
        super().__init__()
        k_w = k_h if k_w is None else k_w
        if min(c_in, c_out, k_h, k_w, stride) < 1 or padding < 0:
            raise ConfigError(f"invalid conv2d geometry c_in={c_in} c_out={c_out} k={k_h}x{k_w} "
                              f"stride={stride} padding={padding}")
        self.c_in, self.c_out, self.k_h, self.k_w = c_in, c_out, k_h, k_w
        self.stride, self.padding, self.bias = stride, padding, bias
        fan_in = c_in * k_h * k_w
        if rng is None:
            w = np.zeros((c_out, c_in, k_h, k_w), DTYPE)
        else:
            w = (rng.standard_normal((c_out, c_in, k_h, k_w)) * math.sqrt(2.0 / fan_in)).astype(DTYPE)
        self.params["weight"] = w
        if bias:
            self.params["bias"] = np.zeros(c_out, DTYPE)

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.c_in:
            raise ConfigError(f"conv2d expects ({self.c_in}, H, W) input, got {tuple(in_shape)}")
        _, h, w = in_shape
        ho = (h + 2 * self.padding - self.k_h) // self.stride + 1
        wo = (w + 2 * self.padding - self.k_w) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigError(f"conv2d kernel {self.k_h}x{self.k_w} does not fit input {tuple(in_shape)}")
        return (self.c_out, ho, wo)

    def _im2col(self, x):
        p, s = self.padding, self.stride
        if p:
            n, c, h, w = x.shape
            padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
            padded[:, :, p:p + h, p:p + w] = x
            x = padded
        win = sliding_window_view(x, (self.k_h, self.k_w), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * self.k_h * self.k_w)
        return cols, ho, wo

    def forward(self, x, need_cache=True):
        if x.ndim != 4:
            raise ConfigError(f"conv2d expects NCHW input, got shape {x.shape}")
        self.output_shape(x.shape[1:])
        n = x.shape[0]
        cols, ho, wo = self._im2col(x)
        w = self.params["weight"].reshape(self.c_out, -1)
        out = cols @ w.T
        if self.bias:
            out += self.params["bias"]
        out = out.reshape(n, ho, wo, self.c_out).transpose(0, 3, 1, 2)
        cache = (x.shape, cols, ho, wo) if need_cache else None
        return np.ascontiguousarray(out), cache

    def backward(self, grad_out, cache):
        if cache is None:
            raise RuntimeError("conv2d backward called without a forward cache")
        x_shape, cols, ho, wo = cache
        n, c, h, w = x_shape
        g = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.c_out)
        grads = {"weight": (g.T @ cols).reshape(self.params["weight"].shape)}
        if self.bias:
            grads["bias"] = g.sum(axis=0)
        dcols = (g @ self.params["weight"].reshape(self.c_out, -1)).reshape(
            n, ho, wo, c, self.k_h, self.k_w)
        p, s = self.padding, self.stride
        dx = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
        for i in range(self.k_h):
            for j in range(self.k_w):
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            dx = dx[:, :, p:p + h, p:p + w]
        return np.ascontiguousarray(dx), grads

    def flops(self, in_shape):
        c_out, ho, wo = self.output_shape(in_shape)
        macs = self.c_in * self.k_h * self.k_w * c_out * ho * wo
        return 2 * macs + (c_out * ho * wo if self.bias else 0)

    def describe(self):
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out, "k_h": self.k_h,
                "k_w": self.k_w, "stride": self.stride, "padding": self.padding, "bias": self.bias}


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, bias: bool = True, rng=None):
        super().__init__()
        if n_in < 1 or n_out < 1:
            raise ConfigError(f"invalid dense geometry {n_in}->{n_out}")
        self.n_in, self.n_out, self.bias = n_in, n_out, bias
        if rng is None:
            w = np.zeros((n_out, n_in), DTYPE)
        else:
            w = (rng.standard_normal((n_out, n_in)) * math.sqrt(1.0 / n_in)).astype(DTYPE)
        self.params["weight"] = w
        if bias:
            self.params["bias"] = np.zeros(n_out, DTYPE)

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.n_in,):
            raise ConfigError(f"dense expects ({self.n_in},) input, got {tuple(in_shape)}")
        return (self.n_out,)

    def forward(self, x, need_cache=True):
        if x.ndim != 2:
            raise ConfigError(f"dense expects (N, features) input, got shape {x.shape}")
        self.output_shape(x.shape[1:])
        out = x @ self.params["weight"].T
        if self.bias:
            out = out + self.params["bias"]
        return out, (x if need_cache else None)

    def backward(self, grad_out, cache):
        if cache is None:
            raise RuntimeError("dense backward called without a forward cache")
        x = cache
        grads = {"weight": grad_out.T @ x}
        if self.bias:
            grads["bias"] = grad_out.sum(axis=0)
        return grad_out @ self.params["weight"], grads

    def flops(self, in_shape):
        self.output_shape(in_shape)
        return 2 * self.n_in * self.n_out + (self.n_out if self.bias else 0)

    def describe(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out, "bias": self.bias}


class ReLU(Layer):
    kind = "relu"

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, need_cache=True):
        mask = x > 0
        return np.where(mask, x, 0).astype(x.dtype, copy=False), (mask if need_cache else None)

    def backward(self, grad_out, cache):
        if cache is None:
            raise RuntimeError("relu backward called without a forward cache")
        return grad_out * cache, {}


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, k: int = 2, stride: Optional[int] = None):
        super().__init__()
        self.k = k
        self.stride = k if stride is None else stride
        if self.k < 1 or self.stride < 1:
            raise ConfigError("maxpool kernel and stride must be positive")

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ConfigError(f"maxpool expects (C, H, W) input, got {tuple(in_shape)}")
        c, h, w = in_shape
        ho, wo = (h - self.k) // self.stride + 1, (w - self.k) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigError(f"maxpool window {self.k} larger than input {tuple(in_shape)}")
        return (c, ho, wo)

    def forward(self, x, need_cache=True):
        if x.ndim != 4:
            raise ConfigError(f"maxpool expects NCHW input, got shape {x.shape}")
        self.output_shape(x.shape[1:])
        k, s = self.k, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        flat = win.reshape(n, c, ho, wo, k * k)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return out, ((x.shape, idx) if need_cache else None)

    def backward(self, grad_out, cache):
        if cache is None:
            raise RuntimeError("maxpool backward called without a forward cache")
        (n, c, h, w), idx = cache
        k, s = self.k, self.stride
        ho, wo = idx.shape[2:]
        dx = np.zeros((n, c, h, w), dtype=grad_out.dtype)
        di, dj = np.divmod(idx, k)
        rows = di + (np.arange(ho) * s)[:, None]
        cols = dj + (np.arange(wo) * s)[None, :]
        nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(dx, (nn_[:, :, None, None], cc[:, :, None, None], rows, cols), grad_out)
        return dx, {}

    def describe(self):
        return {"kind": self.kind, "k": self.k, "stride": self.stride}


class GlobalAvgPool(Layer):
    kind = "globalavgpool"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ConfigError(f"globalavgpool expects (C, H, W) input, got {tuple(in_shape)}")
        return (in_shape[0],)

    def forward(self, x, need_cache=True):
        if x.ndim != 4:
            raise ConfigError(f"globalavgpool expects NCHW input, got shape {x.shape}")
        return x.mean(axis=(2, 3)), (x.shape if need_cache else None)

    def backward(self, grad_out, cache):
        if cache is None:
            raise RuntimeError("globalavgpool backward called without a forward cache")
        n, c, h, w = cache
        dx = np.broadcast_to((grad_out / (h * w))[:, :, None, None], (n, c, h, w))
        return np.ascontiguousarray(dx), {}


LAYER_KINDS = {cls.kind: cls for cls in (Conv2d, Dense, ReLU, MaxPool2d, GlobalAvgPool)}


def layer_from_description(desc: dict) -> Layer:
    """Rebuild a layer (parameters zero-initialised) from ``Layer.describe()`` output."""
    desc = dict(desc)
    kind = desc.pop("kind")
    if kind not in LAYER_KINDS:
        raise ConfigError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind](**desc)


def forward_layer(layer: Layer, x: np.ndarray):
    return layer.forward(x)


def backward_layer(layer: Layer, grad_out: np.ndarray, cache):
    return layer.backward(grad_out, cache)


def count_layer_flops(layer: Layer, input_shape: Sequence[int]) -> int:
    return layer.flops(tuple(input_shape))


def count_layer_params(layer: Layer) -> int:
    return layer.num_params()


def forward_sequence(layers: Iterable[Layer], x: np.ndarray, need_cache: bool = True):
    caches = []
    for layer in layers:
        x, cache = layer.forward(x, need_cache)
        caches.append(cache)
    return x, caches


def backward_sequence(layers: Sequence[Layer], grad: np.ndarray, caches, need_input_grad: bool = True):
    """Backpropagate through ``layers``; returns (grad wrt input or None, per-layer grads)."""
    grads: List[Dict[str, np.ndarray]] = [{} for _ in layers]
    for pos in range(len(layers) - 1, -1, -1):
        layer = layers[pos]
        if pos == 0 and not need_input_grad and layer.kind in ("conv2d", "dense"):
            grads[pos] = _param_grads_only(layer, grad, caches[pos])
            return None, grads
        grad, grads[pos] = layer.backward(grad, caches[pos])
    return grad, grads


def _param_grads_only(layer, grad_out, cache):
    if layer.kind == "dense":
        out = {"weight": grad_out.T @ cache}
        if layer.bias:
            out["bias"] = grad_out.sum(axis=0)
        return out
    _, cols, _, _ = cache
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, layer.c_out)
    out = {"weight": (g.T @ cols).reshape(layer.params["weight"].shape)}
    if layer.bias:
        out["bias"] = g.sum(axis=0)
    return out


def sequence_shapes(layers: Iterable[Layer], in_shape: Sequence[int]) -> List[Tuple[int, ...]]:
    """Per-layer input shapes followed by the final output shape."""
    shapes = [tuple(in_shape)]
    for layer in layers:
        shapes.append(layer.output_shape(shapes[-1]))
    return shapes


def sequence_flops(layers: Sequence[Layer], in_shape: Sequence[int]) -> int:
    shapes = sequence_shapes(layers, in_shape)
    return sum(layer.flops(s) for layer, s in zip(layers, shapes))


def sequence_params(layers: Iterable[Layer]) -> int:
    return sum(layer.num_params() for layer in layers)


def softmax(logits: np.ndarray, T: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis, computed with max-subtraction."""
    if not T > 0:
        raise ConfigError(f"softmax temperature must be positive, got {T}")
    z = np.asarray(logits) / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray, T: float = 1.0) -> np.ndarray:
    if not T > 0:
        raise ConfigError(f"softmax temperature must be positive, got {T}")
    z = np.asarray(logits) / T
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class SGD:
    """SGD with heavy-ball momentum: ``v <- momentum*v + g``, ``p <- p - lr*v``.

    Velocity buffers are keyed by parameter identity, so the optimiser must be
    reused across steps for momentum to accumulate.
    """

    def __init__(self, lr: float, momentum: float = 0.0):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if not 0 <= momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        self.lr = lr
        self.momentum = momentum
        self.velocity: Dict[int, np.ndarray] = {}

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: Optional[float] = None):
        lr = self.lr if lr is None else lr
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise TrainingAborted("non-finite gradient encountered; aborting training step")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ConfigError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            key = id(p)
            v = self.velocity.get(key)
            if v is None:
                v = np.zeros_like(p)
                self.velocity[key] = v
            v *= self.momentum
            v += g
            p -= (lr * v).astype(p.dtype, copy=False)


def sgd_step(params, grads, lr: float, momentum: float = 0.0, velocity=None):
    """Functional single step; returns the velocity list for the next call."""
    opt = SGD(lr, momentum)
    if velocity is not None:
        opt.velocity = {id(p): v for p, v in zip(params, velocity)}
    opt.step(params, grads)
    return [opt.velocity[id(p)] for p in params]
