"""Composite blocks: CBS, Bottleneck, CSP, SPPF and squeeze-excitation."""

from __future__ import annotations

import math
from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import ops
from .ops import ConvParams, ShapeError
from .tensor import Tensor, relu, sigmoid, silu


class Module:
    """Tiny parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    plain ndarrays listed in ``_buffers``. Traversal follows attribute
    insertion order, so names are stable for a given architecture.
    """

    kind = "module"
    _buffers: Tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, ConvParams):
                yield prefix + name + ".weight", value.weight
                if value.bias is not None:
                    yield prefix + name + ".bias", value.bias
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        own = {name: p for name, p in self.named_parameters()}
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in own.items():
            if p.data.shape != state[name].shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != model {p.data.shape}")
            p.data = np.array(state[name], dtype=np.float64)
        for name, buf in bufs.items():
            buf[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def conv_params(rng, c_in, c_out, k, stride=1, padding=None, bias=False) -> ConvParams:
    fan_in = c_in * k * k
    return ConvParams(
        weight=uniform_init(rng, (c_out, c_in, k, k), fan_in),
        bias=uniform_init(rng, (c_out,), fan_in) if bias else None,
        stride=stride,
        padding=k // 2 if padding is None else padding,
    )


class CBS(Module):
    """conv -> batchnorm -> SiLU."""

    kind = "CBS"
    _buffers = ("running_mean", "running_var")

    def __init__(self, rng, c_in, c_out, k=1, stride=1, eps=1e-3, momentum=0.03):
        super().__init__()
        self.conv = conv_params(rng, c_in, c_out, k, stride)
        self.gamma = Tensor(np.ones(c_out), requires_grad=True)
        self.beta = Tensor(np.zeros(c_out), requires_grad=True)
        self.running_mean = np.zeros(c_out)
        self.running_var = np.ones(c_out)
        self.eps = eps
        self.momentum = momentum

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    def forward(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.conv)
        y = ops.batchnorm2d(y, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.eps, self.training, self.momentum)
        return silu(y)


class Bottleneck(Module):
    kind = "Bottleneck"

    def __init__(self, rng, c_in, c_out, shortcut=True):
        super().__init__()
        if shortcut and c_in != c_out:
            raise ShapeError(f"bottleneck shortcut needs equal channels, got {c_in} -> {c_out}")
        self.cbs1 = CBS(rng, c_in, c_out, 1)
        self.cbs2 = CBS(rng, c_out, c_out, 3)
        self.shortcut = shortcut

    def forward(self, x: Tensor) -> Tensor:
        y = self.cbs2(self.cbs1(x))
        return x + y if self.shortcut else y


class CSP(Module):
    """Two 1x1 CBS branches, one through ``n`` bottlenecks, concatenated and merged."""

    kind = "CSP"

    def __init__(self, rng, c_in, c_out, n=1, shortcut=True):
        super().__init__()
        hidden = max(c_out // 2, 1)
        self.cv1 = CBS(rng, c_in, hidden, 1)
        self.cv2 = CBS(rng, c_in, hidden, 1)
        self.m = [Bottleneck(rng, hidden, hidden, shortcut) for _ in range(n)]
        self.cv3 = CBS(rng, 2 * hidden, c_out, 1)

    def forward(self, x: Tensor) -> Tensor:
        a = self.cv1(x)
        for b in self.m:
            a = b(a)
        return self.cv3(ops.concat_channels([a, self.cv2(x)]))


class SPPF(Module):
    """Serial max-pool pyramid: three k=5 pools, four-way concat, exit CBS."""

    kind = "SPPF"

    def __init__(self, rng, c_in, c_out, k=5):
        super().__init__()
        hidden = max(c_in // 2, 1)
        self.cv1 = CBS(rng, c_in, hidden, 1)
        self.cv2 = CBS(rng, 4 * hidden, c_out, 1)
        self.k = k

    def forward(self, x: Tensor) -> Tensor:
        y0 = self.cv1(x)
        pad = self.k // 2
        y1 = ops.maxpool2d(y0, self.k, 1, pad)
        y2 = ops.maxpool2d(y1, self.k, 1, pad)
        y3 = ops.maxpool2d(y2, self.k, 1, pad)
        return self.cv2(ops.concat_channels([y0, y1, y2, y3]))


class SE(Module):
    """Squeeze-and-excitation channel gate.

    z = channel means of x, s = sigmoid(W2 relu(W1 z + b1) + b2), output = s * x
    broadcast over each channel's H x W plane.
    """

    kind = "SE"

    def __init__(self, rng, channels, reduction=16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.channels = channels
        self.w1 = uniform_init(rng, (hidden, channels), channels)
        self.b1 = uniform_init(rng, (hidden,), channels)
        self.w2 = uniform_init(rng, (channels, hidden), hidden)
        self.b2 = uniform_init(rng, (channels,), hidden)

    def excitation(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"SE block expects {self.channels} channels, got input {x.shape}")
        z = ops.global_avg_pool(x).reshape(x.shape[0], self.channels)
        h = relu(ops.fully_connected(z, self.w1, self.b1))
        return sigmoid(ops.fully_connected(h, self.w2, self.b2))

    def forward(self, x: Tensor) -> Tensor:
        s = self.excitation(x)
        return x * s.reshape(x.shape[0], self.channels, 1, 1)
