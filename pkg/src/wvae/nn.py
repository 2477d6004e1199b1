"""Network layers, He-uniform initialization, Adam, and the LR schedule.

Layers are small objects with ``forward``, ``params()`` (named trainable
tensors) and ``buffers()`` (named non-trainable state such as batch-norm
running statistics).  ``Sequential`` chains them and prefixes names, which is
what the checkpoint format consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import Rng
from .tensor import Tensor, conv2d, conv_transpose2d, custom_op


def he_uniform(rng: Rng, shape, fan_in: int) -> Tensor:
    """U(-b, b) with b = sqrt(6 / fan_in), so Var(w) = 2 / fan_in."""
    bound = math.sqrt(6.0 / fan_in)
    values = rng.uniform(int(np.prod(shape)), -bound, bound).astype(np.float32)
    return Tensor(values.reshape(shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape, np.float32), requires_grad=True)


class Layer:
    training = True

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def params(self) -> dict:
        return {}

    def buffers(self) -> dict:
        return {}

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


class Dense(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng: Rng):
        self.w = he_uniform(rng, (in_dim, out_dim), fan_in=in_dim)
        self.b = zeros_param((out_dim,))

    def forward(self, x):
        return x @ self.w + self.b

    def params(self):
        return {"w": self.w, "b": self.b}


class Conv2d(Layer):
    def __init__(self, cin, cout, kernel, stride, pad, rng: Rng):
        self.stride, self.pad = stride, pad
        self.w = he_uniform(rng, (cout, cin, kernel, kernel), fan_in=cin * kernel * kernel)
        self.b = zeros_param((cout,))

    def forward(self, x):
        y = conv2d(x, self.w, self.stride, self.pad)
        return y + self.b.reshape(1, -1, 1, 1)

    def params(self):
        return {"w": self.w, "b": self.b}


class PointwiseConv(Conv2d):
    """1x1 convolution: per-pixel channel mixing."""

    def __init__(self, cin, cout, rng: Rng):
        super().__init__(cin, cout, kernel=1, stride=1, pad=0, rng=rng)


class ConvTranspose2d(Layer):
    def __init__(self, cin, cout, kernel, stride, pad, rng: Rng):
        self.stride, self.pad = stride, pad
        self.w = he_uniform(rng, (cin, cout, kernel, kernel), fan_in=cin * kernel * kernel)
        self.b = zeros_param((cout,))

    def forward(self, x):
        y = conv_transpose2d(x, self.w, self.stride, self.pad)
        return y + self.b.reshape(1, -1, 1, 1)

    def params(self):
        return {"w": self.w, "b": self.b}


class BatchNorm(Layer):
    """Feature-wise normalization over the batch (and spatial axes for 4-D).

    Training mode normalizes with batch statistics and updates the running
    buffers; eval mode normalizes with the stored running statistics.  A
    single fused op with the closed-form backward keeps the tape small.
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        self.eps, self.momentum = eps, momentum
        self.gamma = Tensor(np.ones(num_features, np.float32), requires_grad=True)
        self.beta = zeros_param((num_features,))
        self.running_mean = np.zeros(num_features, np.float32)
        self.running_var = np.ones(num_features, np.float32)
        self.training = True

    def forward(self, x):
        if x.ndim == 4:
            axes, stat_shape = (0, 2, 3), (1, -1, 1, 1)
        elif x.ndim == 2:
            axes, stat_shape = (0,), (1, -1)
        else:
            raise ShapeError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")
        batch_stats = self.training
        if batch_stats:
            mu = x.data.mean(axis=axes, keepdims=True, dtype=np.float64).astype(
                np.float32
            )
            centered = x.data - mu
            var = np.mean(
                centered * centered, axis=axes, keepdims=True, dtype=np.float64
            ).astype(np.float32)
            m = self.momentum
            self.running_mean += m * (mu.reshape(-1) - self.running_mean)
            self.running_var += m * (var.reshape(-1) - self.running_var)
        else:
            mu = self.running_mean.reshape(stat_shape)
            var = self.running_var.reshape(stat_shape)
            centered = x.data - mu
        inv = (1.0 / np.sqrt(var + self.eps)).astype(np.float32)
        xhat = centered * inv
        gamma_s = self.gamma.data.reshape(stat_shape)
        out_data = xhat * gamma_s + self.beta.data.reshape(stat_shape)
        gamma, beta = self.gamma, self.beta

        def backward():
            g = out.grad
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=axes), owned=True)
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=axes), owned=True)
            if x.requires_grad:
                gxhat = g * gamma_s
                if batch_stats:
                    # mu and var are functions of x: subtract the projections
                    # of the upstream gradient onto the mean and scale modes.
                    m1 = gxhat.mean(axis=axes, keepdims=True)
                    m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
                    x._accumulate(inv * (gxhat - m1 - xhat * m2), owned=True)
                else:
                    x._accumulate(gxhat * inv, owned=True)

        out = custom_op("batchnorm", out_data, (x, gamma, beta), backward)
        return out

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class Activation(Layer):
    KINDS = ("relu", "leaky_relu", "sigmoid", "tanh")

    def __init__(self, kind: str, slope: float = 0.2):
        if kind not in self.KINDS:
            raise ConfigError(f"unknown activation {kind!r}")
        self.kind, self.slope = kind, slope

    def forward(self, x):
        if self.kind == "leaky_relu":
            return x.leaky_relu(self.slope)
        return getattr(x, self.kind)()


class Reshape(Layer):
    """Fixed per-sample shape, batch axis preserved."""

    def __init__(self, *shape):
        self.shape = shape

    def forward(self, x):
        return x.reshape(x.shape[0], *self.shape)


class Flatten(Layer):
    def forward(self, x):
        return x.flatten_batch()


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer] = ()):
        self.layers = list(layers)

    def append(self, layer: Layer) -> "Sequential":
        self.layers.append(layer)
        return self

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params().items():
                out[f"{i}.{name}"] = p
        return out

    def buffers(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, b in layer.buffers().items():
                out[f"{i}.{name}"] = b
        return out

    def set_training(self, flag: bool) -> None:
        for layer in self.layers:
            if isinstance(layer, Sequential):
                layer.set_training(flag)
            else:
                layer.training = flag


# -- declarative layer specs ---------------------------------------------------------


@dataclass
class LayerSpec:
    """Declarative layer description; ``build_layer`` turns it into a Layer."""

    kind: str  # conv | conv_transpose | dense | pointwise_conv | activation | batchnorm
    extents: tuple = ()  # (cin, cout) or (in_dim, out_dim) or (features,)
    kernel: int = 4
    stride: int = 2
    pad: int = 1
    activation: str = "relu"
    slope: float = 0.2


def build_layer(spec: LayerSpec, rng: Rng) -> Layer:
    if spec.kind == "conv":
        return Conv2d(*spec.extents, spec.kernel, spec.stride, spec.pad, rng)
    if spec.kind == "conv_transpose":
        return ConvTranspose2d(*spec.extents, spec.kernel, spec.stride, spec.pad, rng)
    if spec.kind == "pointwise_conv":
        return PointwiseConv(*spec.extents, rng)
    if spec.kind == "dense":
        return Dense(*spec.extents, rng)
    if spec.kind == "batchnorm":
        return BatchNorm(spec.extents[0])
    if spec.kind == "activation":
        return Activation(spec.activation, spec.slope)
    raise ConfigError(f"unknown layer kind {spec.kind!r}")


def init_params(spec: LayerSpec, rng: Rng) -> dict:
    """Freshly initialized parameter set for a declarative layer spec."""
    return build_layer(spec, rng).params()


def forward(network: Sequence[Layer], x: Tensor) -> Tensor:
    """Run an ordered layer list; the empty network is the identity."""
    for layer in network:
        x = layer.forward(x)
    return x


# -- optimization ---------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for key, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[key]
            v = self.v[key]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        """Moment buffers and step count, for checkpointing."""
        out = {"t": self.t}
        for key in self.params:
            out[f"m.{key}"] = self.m[key]
            out[f"v.{key}"] = self.v[key]
        return out

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for key in self.params:
            self.m[key] = np.asarray(state[f"m.{key}"], np.float32).copy()
            self.v[key] = np.asarray(state[f"v.{key}"], np.float32).copy()


@dataclass
class LrSchedule:
    """Step decay: halve the rate every ``period`` epochs."""

    initial: float
    period: int

    def __post_init__(self):
        if self.period < 1:
            raise ConfigError("lr halving period must be >= 1 epoch")

    def rate(self, epoch: int) -> float:
        return self.initial * 0.5 ** (epoch // self.period)


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    return schedule.rate(epoch)
