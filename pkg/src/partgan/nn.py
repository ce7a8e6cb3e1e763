"""Minimal layer-stack neural network kernel.

A :class:`Network` is an ordered list of layer specs plus a single flat float64
parameter vector; every layer owns a contiguous slice of it. :func:`forward`
returns the output together with a :class:`ForwardTrace`, and :func:`backward`
consumes that trace to produce exact reverse-mode gradients for both the
parameters and the input.

Tensors are plain ``numpy.ndarray`` objects with dtype float64 and a leading
batch dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "TraceError",
    "Layer",
    "Dense",
    "Conv2d",
    "BatchNorm",
    "Upsample",
    "Dropout",
    "ReLU",
    "LeakyReLU",
    "Tanh",
    "Sigmoid",
    "Reshape",
    "Network",
    "ForwardTrace",
    "GradCheckResult",
    "build_network",
    "forward",
    "backward",
    "activation_pattern",
    "check_gradients",
    "grad_check",
    "conv_output_size",
]


class ShapeError(ValueError):
    """Raised when tensors or layers have incompatible shapes."""


class TraceError(RuntimeError):
    """Raised when a trace does not belong to the network it is used with."""


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Layer:
    """Base class for the closed set of layer specs.

    Subclasses are frozen dataclasses holding only hyper-parameters. Learned
    parameters live in the owning network's flat vector and running state
    (BatchNorm statistics) in its buffers.
    """

    def param_shapes(self, in_shape: tuple) -> list[tuple]:
        return []

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def init_params(self, in_shape, rng, std) -> list[np.ndarray]:
        return []

    def init_state(self) -> dict | None:
        return None

    def forward(self, x, params, state, train, rng, update_stats):
        raise NotImplementedError

    def backward(self, cache, gy, params):
        raise NotImplementedError

    def to_dict(self) -> dict:
        d = {"type": type(self).__name__}
        d.update({k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()})
        return d


@dataclass(frozen=True)
class Dense(Layer):
    in_dim: int
    out_dim: int

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"Dense dims must be positive, got {self.in_dim}->{self.out_dim}")

    def param_shapes(self, in_shape):
        return [(self.out_dim, self.in_dim), (self.out_dim,)]

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_dim,):
            raise ShapeError(f"expects input shape ({self.in_dim},), got {tuple(in_shape)}")
        return (self.out_dim,)

    def init_params(self, in_shape, rng, std):
        return [rng.normal(0.0, std, size=(self.out_dim, self.in_dim)), np.zeros(self.out_dim)]

    def forward(self, x, params, state, train, rng, update_stats):
        w, b = params
        return x @ w.T + b, x

    def backward(self, x, gy, params):
        w, _ = params
        return [gy.T @ x, gy.sum(axis=0)], gy @ w


@dataclass(frozen=True)
class Conv2d(Layer):
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1:
            raise ValueError("Conv2d kernel and stride must be >= 1")
        if self.padding < 0 or self.in_ch < 1 or self.out_ch < 1:
            raise ValueError("Conv2d channels must be positive and padding non-negative")

    def param_shapes(self, in_shape):
        return [(self.out_ch, self.in_ch, self.kernel, self.kernel), (self.out_ch,)]

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ShapeError(f"expects input (C={self.in_ch}, H, W), got {tuple(in_shape)}")
        _, h, w = in_shape
        ho = conv_output_size(h, self.kernel, self.stride, self.padding)
        wo = conv_output_size(w, self.kernel, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"kernel {self.kernel} too large for spatial size {h}x{w}")
        return (self.out_ch, ho, wo)

    def init_params(self, in_shape, rng, std):
        return [rng.normal(0.0, std, size=self.param_shapes(in_shape)[0]), np.zeros(self.out_ch)]

    def _window(self, i, j, ho, wo):
        s = self.stride
        return np.s_[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s]

    def forward(self, x, params, state, train, rng, update_stats):
        w, b = params
        n, c, h, wd = x.shape
        k, p = self.kernel, self.padding
        ho = conv_output_size(h, k, self.stride, p)
        wo = conv_output_size(wd, k, self.stride, p)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        # column matrix rows ordered (c, i, j) to match w.reshape(out_ch, -1)
        cols = np.empty((c, k, k, n, ho, wo))
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xp[self._window(i, j, ho, wo)].transpose(1, 0, 2, 3)
        cols = cols.reshape(c * k * k, n * ho * wo)
        y = (w.reshape(self.out_ch, -1) @ cols).reshape(self.out_ch, n, ho, wo)
        y = y.transpose(1, 0, 2, 3) + b[None, :, None, None]
        return np.ascontiguousarray(y), (xp.shape, cols)

    def backward(self, cache, gy, params):
        w, _ = params
        padded_shape, cols = cache
        k, p = self.kernel, self.padding
        n, _, ho, wo = gy.shape
        gy2 = gy.transpose(1, 0, 2, 3).reshape(self.out_ch, -1)
        gw = (gy2 @ cols.T).reshape(w.shape)
        gb = gy2.sum(axis=1)
        gcols = (w.reshape(self.out_ch, -1).T @ gy2).reshape(self.in_ch, k, k, n, ho, wo)
        gxp = np.zeros(padded_shape)
        for i in range(k):
            for j in range(k):
                gxp[self._window(i, j, ho, wo)] += gcols[:, i, j].transpose(1, 0, 2, 3)
        if p:
            gxp = gxp[:, :, p:-p, p:-p]
        return [gw, gb], np.ascontiguousarray(gxp)


@dataclass(frozen=True)
class BatchNorm(Layer):
    """Batch normalization over the channel axis of (N, C) or (N, C, H, W) input.

    Running statistics follow the usual convention: exponential averaging with
    weight ``momentum`` on the new batch value, unbiased variance.
    """

    channels: int
    epsilon: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("BatchNorm epsilon must be > 0")
        if not 0 <= self.momentum <= 1:
            raise ValueError("BatchNorm momentum must lie in [0, 1]")

    def param_shapes(self, in_shape):
        return [(self.channels,), (self.channels,)]

    def out_shape(self, in_shape):
        if len(in_shape) not in (1, 3) or in_shape[0] != self.channels:
            raise ShapeError(f"expects {self.channels} channels, got shape {tuple(in_shape)}")
        return in_shape

    def init_params(self, in_shape, rng, std):
        return [np.ones(self.channels), np.zeros(self.channels)]

    def init_state(self):
        return {"running_mean": np.zeros(self.channels), "running_var": np.ones(self.channels)}

    def forward(self, x, params, state, train, rng, update_stats):
        gamma, beta = params
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if update_stats:
                n = x.size // self.channels
                unbiased = var * n / (n - 1) if n > 1 else var
                m = self.momentum
                state["running_mean"] = (1 - m) * state["running_mean"] + m * mean
                state["running_var"] = (1 - m) * state["running_var"] + m * unbiased
        else:
            mean = state["running_mean"]
            var = state["running_var"]
        inv = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean.reshape(bshape)) * inv.reshape(bshape)
        y = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
        return y, (xhat, inv, train, axes, bshape)

    def backward(self, cache, gy, params):
        gamma, _ = params
        xhat, inv, train, axes, bshape = cache
        ggamma = (gy * xhat).sum(axis=axes)
        gbeta = gy.sum(axis=axes)
        gxhat = gy * gamma.reshape(bshape)
        if train:
            n = gy.size // self.channels
            gx = (inv.reshape(bshape) / n) * (
                n * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return [ggamma, gbeta], gx


@dataclass(frozen=True)
class Upsample(Layer):
    """Nearest-neighbour spatial upsampling by an integer factor."""

    scale_factor: int = 2

    def __post_init__(self):
        if self.scale_factor < 1:
            raise ValueError("Upsample scale_factor must be >= 1")

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"expects (C, H, W) input, got {tuple(in_shape)}")
        c, h, w = in_shape
        return (c, h * self.scale_factor, w * self.scale_factor)

    def forward(self, x, params, state, train, rng, update_stats):
        s = self.scale_factor
        return x.repeat(s, axis=2).repeat(s, axis=3), None

    def backward(self, cache, gy, params):
        s = self.scale_factor
        n, c, h, w = gy.shape
        return [], gy.reshape(n, c, h // s, s, w // s, s).sum(axis=(3, 5))


@dataclass(frozen=True)
class Dropout(Layer):
    """Inverted dropout; identity in eval mode."""

    rate: float = 0.5

    def __post_init__(self):
        if not 0 <= self.rate < 1:
            raise ValueError("Dropout rate must lie in [0, 1)")

    def forward(self, x, params, state, train, rng, update_stats):
        if not train or self.rate == 0:
            return x, None
        if rng is None:
            raise ValueError("Dropout in train mode needs an rng stream")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, mask, gy, params):
        return [], gy if mask is None else gy * mask


@dataclass(frozen=True)
class ReLU(Layer):
    def forward(self, x, params, state, train, rng, update_stats):
        return np.maximum(x, 0.0), x

    def backward(self, x, gy, params):
        return [], gy * (x > 0)


@dataclass(frozen=True)
class LeakyReLU(Layer):
    slope: float = 0.2

    def __post_init__(self):
        if self.slope <= 0:
            raise ValueError("LeakyReLU slope must be > 0")

    def forward(self, x, params, state, train, rng, update_stats):
        return np.where(x > 0, x, self.slope * x), x

    def backward(self, x, gy, params):
        return [], np.where(x > 0, gy, self.slope * gy)


@dataclass(frozen=True)
class Tanh(Layer):
    def forward(self, x, params, state, train, rng, update_stats):
        y = np.tanh(x)
        return y, y

    def backward(self, y, gy, params):
        return [], gy * (1.0 - y * y)


@dataclass(frozen=True)
class Sigmoid(Layer):
    def forward(self, x, params, state, train, rng, update_stats):
        y = np.exp(-np.logaddexp(0.0, -x))
        return y, y

    def backward(self, y, gy, params):
        return [], gy * y * (1.0 - y)


@dataclass(frozen=True)
class Reshape(Layer):
    """Reshape each sample to ``target_shape`` (batch axis untouched)."""

    target_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "target_shape", tuple(int(d) for d in self.target_shape))
        if not self.target_shape or min(self.target_shape) < 1:
            raise ValueError("Reshape target extents must be positive")

    def out_shape(self, in_shape):
        if math.prod(in_shape) != math.prod(self.target_shape):
            raise ShapeError(f"cannot reshape {tuple(in_shape)} to {self.target_shape}")
        return self.target_shape

    def forward(self, x, params, state, train, rng, update_stats):
        return x.reshape((x.shape[0],) + self.target_shape), x.shape

    def backward(self, in_shape, gy, params):
        return [], gy.reshape(in_shape)


LAYER_TYPES = {
    cls.__name__: cls
    for cls in (Dense, Conv2d, BatchNorm, Upsample, Dropout, ReLU, LeakyReLU, Tanh, Sigmoid, Reshape)
}


def layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    cls = LAYER_TYPES[d.pop("type")]
    return cls(**d)


def _describe(i: int, layer: Layer) -> str:
    return f"layer {i} ({layer!r})"


class Network:
    """Ordered layer stack with a flat parameter vector.

    ``params`` is one contiguous float64 array; ``slices[i]`` gives the
    (start, stop) range owned by layer ``i``, subdivided per ``param_shapes``.
    ``buffers[i]`` holds running state for layers that have it.
    """

    def __init__(self, layers: Sequence[Layer], input_shape: tuple, params=None, buffers=None, mode="train"):
        if not layers:
            raise ShapeError("network needs at least one layer")
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        shapes = [self.input_shape]
        self.param_shapes: list[list[tuple]] = []
        for i, layer in enumerate(self.layers):
            try:
                out = tuple(layer.out_shape(shapes[-1]))
            except ShapeError as exc:
                prev = _describe(i - 1, self.layers[i - 1]) if i else "the network input"
                raise ShapeError(f"{_describe(i, layer)} cannot follow {prev}: {exc}") from None
            self.param_shapes.append([tuple(s) for s in layer.param_shapes(shapes[-1])])
            shapes.append(out)
        self.shapes = shapes
        self.slices = []
        start = 0
        for pshapes in self.param_shapes:
            size = sum(math.prod(s) for s in pshapes)
            self.slices.append((start, start + size))
            start += size
        self.params = np.zeros(start) if params is None else np.asarray(params, dtype=np.float64)
        if self.params.shape != (start,):
            raise ShapeError(f"expected {start} parameters, got {self.params.shape}")
        if buffers is None:
            buffers = [layer.init_state() for layer in self.layers]
        self.buffers = buffers
        self.mode = mode

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def output_shape(self) -> tuple:
        return self.shapes[-1]

    def layer_params(self, i: int, flat=None) -> list[np.ndarray]:
        """Views of layer ``i``'s parameters inside ``flat`` (default: own params)."""
        flat = self.params if flat is None else flat
        start, _ = self.slices[i]
        views = []
        for shape in self.param_shapes[i]:
            size = math.prod(shape)
            views.append(flat[start : start + size].reshape(shape))
            start += size
        return views

    def has_dropout(self) -> bool:
        return any(isinstance(layer, Dropout) and layer.rate > 0 for layer in self.layers)

    def copy(self) -> "Network":
        buffers = [None if b is None else {k: v.copy() for k, v in b.items()} for b in self.buffers]
        return Network(self.layers, self.input_shape, self.params.copy(), buffers, self.mode)

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def __repr__(self):
        return f"Network({len(self.layers)} layers, {self.input_shape} -> {self.output_shape}, {self.n_params} params)"


def build_network(spec_list: Sequence[Layer], rng_seed: int, input_shape=None, init_std: float = 0.02) -> Network:
    """Build a network and initialize its parameters deterministically.

    Weights are drawn from normal(0, init_std), biases start at zero and
    BatchNorm scale/shift at one/zero. ``input_shape`` (per sample) may be
    omitted when the first layer is Dense.
    """
    if not spec_list:
        raise ShapeError("cannot build a network from an empty layer list")
    if input_shape is None:
        first = spec_list[0]
        if not isinstance(first, Dense):
            raise ShapeError(f"input_shape is required when the first layer is {type(first).__name__}")
        input_shape = (first.in_dim,)
    net = Network(spec_list, input_shape)
    rng = np.random.default_rng(rng_seed)
    for i, layer in enumerate(net.layers):
        for view, value in zip(net.layer_params(i), layer.init_params(net.shapes[i], rng, init_std)):
            view[...] = value
    return net


@dataclass
class ForwardTrace:
    net_id: int
    n_params: int
    mode: str
    caches: list
    consumed: bool = False


def forward(net: Network, batch, mode: str | None = None, rng=None, update_stats: bool = True):
    """Run the network on ``batch`` and return ``(output, trace)``.

    In train mode BatchNorm normalizes with batch statistics (and updates its
    running averages unless ``update_stats`` is false) and Dropout samples a
    mask from ``rng``. In eval mode the call is a pure function of the
    parameters, buffers and input.
    """
    mode = net.mode if mode is None else mode
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim < 1 or tuple(x.shape[1:]) != net.input_shape:
        raise ShapeError(f"batch shape {x.shape} does not match network input (N,) + {net.input_shape}")
    train = mode == "train"
    caches = []
    for i, layer in enumerate(net.layers):
        x, cache = layer.forward(x, net.layer_params(i), net.buffers[i], train, rng, update_stats)
        caches.append(cache)
    return x, ForwardTrace(id(net), net.n_params, mode, caches)


def backward(net: Network, trace: ForwardTrace, output_grad):
    """Backpropagate ``output_grad`` through a traced forward call.

    Returns ``(param_grad, input_grad)`` where ``param_grad`` is laid out like
    ``net.params``.
    """
    if trace.net_id != id(net) or trace.n_params != net.n_params or len(trace.caches) != len(net.layers):
        raise TraceError("trace was produced by a different network")
    if trace.consumed:
        raise TraceError("trace has already been consumed by backward")
    trace.consumed = True
    g = np.asarray(output_grad, dtype=np.float64)
    param_grad = np.zeros(net.n_params)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        grads, g = layer.backward(trace.caches[i], g, net.layer_params(i))
        for view, grad in zip(net.layer_params(i, param_grad), grads):
            view[...] = grad
    return param_grad, g


def activation_pattern(net: Network, trace: ForwardTrace) -> np.ndarray:
    """Concatenated on/off state of every rectifier unit in a trace.

    Two evaluations with equal patterns lie in the same linear region of the
    piecewise-linear activations.
    """
    parts = [
        (cache > 0).ravel()
        for layer, cache in zip(net.layers, trace.caches)
        if isinstance(layer, (ReLU, LeakyReLU))
    ]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


@dataclass
class GradCheckResult:
    max_rel_error: float
    errors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    coords: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    skipped: int = 0


def _unpack_loss(result):
    if len(result) == 3:
        return float(result[0]), np.asarray(result[1], dtype=np.float64), np.asarray(result[2], dtype=bool)
    value, grad = result
    return float(value), np.asarray(grad, dtype=np.float64), np.zeros(0, dtype=bool)


def check_gradients(
    net: Network,
    input,
    loss: Callable,
    n_coords: int = 100,
    step: float = 1e-3,
    seed: int = 0,
    wrt: str = "params",
    mode: str | None = None,
    dropout_seed: int | None = None,
) -> GradCheckResult:
    """Compare backprop against central finite differences.

    ``loss(output)`` returns ``(value, d value / d output)`` and may add a
    third element: a boolean array describing any piecewise-linear region
    state inside the loss (see :func:`activation_pattern`). Coordinates whose
    difference stencil crosses a rectifier kink, in the network or in the
    loss, are not differentiable there; they are skipped and replaced by
    other coordinates. Running statistics are never updated.

    Train-mode Dropout is only allowed with ``dropout_seed``, which freezes
    the mask by re-seeding the stream before every evaluation.
    """
    mode = net.mode if mode is None else mode
    if mode == "train" and net.has_dropout() and dropout_seed is None:
        raise ValueError(
            "gradient check on a train-mode network with Dropout needs dropout_seed "
            "(frozen mask) or mode='eval'"
        )
    x0 = np.array(input, dtype=np.float64)
    base_params = net.params.copy()

    def evaluate(params, x):
        net.params[...] = params
        rng = None if dropout_seed is None else np.random.default_rng(dropout_seed)
        out, trace = forward(net, x, mode=mode, rng=rng, update_stats=False)
        value, gout, loss_pattern = _unpack_loss(loss(out))
        pattern = np.concatenate([activation_pattern(net, trace), loss_pattern])
        return value, gout, trace, pattern

    try:
        _, gout, trace, pattern0 = evaluate(base_params, x0)
        param_grad, input_grad = backward(net, trace, gout)
        analytic = param_grad if wrt == "params" else input_grad.ravel()
        total = analytic.size
        order = np.random.default_rng(seed).permutation(total)
        errors, coords, skipped = [], [], 0
        for c in order:
            if len(coords) >= n_coords:
                break
            if wrt == "params":
                p_plus, p_minus = base_params.copy(), base_params.copy()
                p_plus[c] += step
                p_minus[c] -= step
                f_plus, _, _, pat_plus = evaluate(p_plus, x0)
                f_minus, _, _, pat_minus = evaluate(p_minus, x0)
            else:
                x_plus, x_minus = x0.copy(), x0.copy()
                x_plus.flat[c] += step
                x_minus.flat[c] -= step
                f_plus, _, _, pat_plus = evaluate(base_params, x_plus)
                f_minus, _, _, pat_minus = evaluate(base_params, x_minus)
            if not (np.array_equal(pat_plus, pattern0) and np.array_equal(pat_minus, pattern0)):
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2 * step)
            a = analytic[c]
            errors.append(abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
            coords.append(c)
    finally:
        net.params[...] = base_params
    errors = np.asarray(errors)
    return GradCheckResult(float(errors.max()) if errors.size else 0.0, errors, np.asarray(coords, dtype=int), skipped)


def grad_check(net: Network, input, loss: Callable, n_coords: int = 100, step: float = 1e-3, **kwargs) -> float:
    """Maximum relative error of :func:`check_gradients`."""
    return check_gradients(net, input, loss, n_coords=n_coords, step=step, **kwargs).max_rel_error

