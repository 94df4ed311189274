"""Parameter containers and layers for the coupling conditioners."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import CheckpointError


class Module:
    """Minimal parameter container.

    Parameters are :class:`Tensor` attributes with ``requires_grad``; child
    modules are attributes or lists of modules. Buffers (non-learned state
    such as running statistics) live in ``self.buffers``.
    """

    training = True

    def __init__(self):
        self.buffers: dict[str, np.ndarray] = {}

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, child in enumerate(value):
                    yield f"{name}.{i}", child

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self.buffers.items():
            yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({f"{name}@buffer": b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = self._buffer_owners()
        expected = set(params) | {f"{k}@buffer" for k in buffers}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise CheckpointError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise CheckpointError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.copy()
        for name, (owner, key) in buffers.items():
            owner.buffers[key] = np.asarray(state[f"{name}@buffer"], dtype=np.float64).copy()

    def _buffer_owners(self, prefix: str = "") -> dict:
        owners = {prefix + key: (self, key) for key in self.buffers}
        for name, child in self._children():
            owners.update(child._buffer_owners(f"{prefix}{name}."))
        return owners


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Conv2d(Module):
    """3x3 same-padding convolution."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, zero_init: bool = False):
        super().__init__()
        shape = (out_channels, in_channels, 3, 3)
        if zero_init:
            self.weight, self.bias = _zeros(shape), _zeros(out_channels)
        else:
            fan_in = in_channels * 9
            self.weight = _uniform(rng, shape, fan_in)
            self.bias = _uniform(rng, out_channels, fan_in)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, zero_init: bool = False):
        super().__init__()
        if zero_init:
            self.weight, self.bias = _zeros((in_features, out_features)), _zeros(out_features)
        else:
            self.weight = _uniform(rng, (in_features, out_features), in_features)
            self.bias = _uniform(rng, out_features, in_features)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class BatchNorm(Module):
    """Batch normalization over every axis except ``channel_axis``.

    Running statistics are exponential moving averages (momentum 0.1) of the
    batch mean and unbiased batch variance, refreshed on every training-mode
    call unless ``track_running_stats`` is False.
    """

    def __init__(self, channels: int, channel_axis: int = 1, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channel_axis = channel_axis
        self.momentum = momentum
        self.eps = eps
        self.track_running_stats = True
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def __call__(self, x: Tensor) -> Tensor:
        if self.training and self.track_running_stats:
            axis = self.channel_axis % x.ndim
            axes = tuple(a for a in range(x.ndim) if a != axis)
            count = x.data.size // x.shape[axis]
            mean = x.data.mean(axis=axes)
            var = x.data.var(axis=axes, ddof=1) if count > 1 else np.zeros_like(mean)
            m = self.momentum
            self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
            self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * var
        return ad.batch_norm(
            x, self.gamma, self.beta, eps=self.eps, channel_axis=self.channel_axis,
            training=self.training,
            running_mean=self.buffers["running_mean"], running_var=self.buffers["running_var"],
        )
