"""Trainable layers, parameter registry, and the optimizer.

Parameters are Tensors with requires_grad=True; running statistics are
Tensors with requires_grad=False. Both are discovered by walking module
attributes, so checkpoints address every array by a stable dotted name
(e.g. ``backbone.blocks.0.bn.gamma``).
"""

from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


class Module:
    """Base class providing parameter discovery and train/eval switching."""

    def __init__(self):
        self.training = True

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_state(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        """All owned arrays (trainable or not), dotted-name order stable."""
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_state(prefix + name + ".")

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self.named_state(prefix):
            if tensor.requires_grad:
                yield name, tensor

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

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

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_state()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_state())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ShapeError(
                f"state mismatch: missing={missing[:4]} extra={extra[:4]}")
        for name, tensor in own.items():
            incoming = np.asarray(state[name], dtype=np.float64)
            if incoming.shape != tensor.data.shape:
                raise ShapeError(
                    f"{name}: checkpoint shape {incoming.shape} "
                    f"!= model shape {tensor.data.shape}")
            tensor.data = incoming.copy()


class LinearLayer(Module):
    """Affine map y = x W^T + b with uniform ±sqrt(1/fan_in) weight init."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator):
        super().__init__()
        bound = float(np.sqrt(1.0 / in_features))
        self.weight = Tensor(
            rng.uniform(-bound, bound, size=(out_features, in_features)),
            requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ShapeError(
                f"linear expects [N, {self.weight.shape[1]}], got {x.shape}")
        return ad.matmul(x, self.weight.T) + self.bias

    __call__ = forward


class BatchNorm1d(Module):
    """Per-channel normalization over rows of an [N, C] batch.

    Training mode normalizes with batch mean and biased variance and,
    unless ``update_running`` is cleared, folds those statistics into the
    running buffers. Inference normalizes with the running buffers. An
    N == 1 training batch has zero variance; epsilon clamps the scale so
    the output collapses to beta.
    """

    def __init__(self, channels: int, epsilon: float = 1e-5,
                 momentum: float = 0.1):
        super().__init__()
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)
        # Cleared by gradient checkers so two forwards see identical state.
        self.update_running = True

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.gamma.shape[0]:
            raise ShapeError(
                f"batchnorm expects [N, {self.gamma.shape[0]}], got {x.shape}")
        if self.training:
            m = ad.mean(x, axis=0, keepdims=True)
            centered = x - m
            var = ad.mean(centered * centered, axis=0, keepdims=True)
            if self.update_running:
                mom = self.momentum
                self.running_mean.data = (
                    (1.0 - mom) * self.running_mean.data + mom * m.data[0])
                self.running_var.data = (
                    (1.0 - mom) * self.running_var.data + mom * var.data[0])
            inv = ad.power(var + self.epsilon, -0.5)
            return self.gamma * (centered * inv) + self.beta
        scale = 1.0 / np.sqrt(self.running_var.data + self.epsilon)
        return self.gamma * ((x - self.running_mean.data) * scale) + self.beta

    __call__ = forward


class BatchNorm2d(BatchNorm1d):
    """BatchNorm over a [C, H, W] map, treating each pixel as a sample."""

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3:
            raise ShapeError(f"batchnorm2d expects [C,H,W], got {x.shape}")
        c, h, w = x.shape
        flat = ad.reshape(ad.permute(x, (1, 2, 0)), (h * w, c))
        normed = BatchNorm1d.forward(self, flat)
        return ad.permute(ad.reshape(normed, (h, w, c)), (2, 0, 1))

    __call__ = forward


class ConvLayer(Module):
    """2D convolution with bias; weight init uniform ±sqrt(1/(C_in·k²))."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        bound = float(np.sqrt(1.0 / fan_in))
        self.kernel = Tensor(
            rng.uniform(-bound, bound,
                        size=(out_channels, in_channels, kernel_size, kernel_size)),
            requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        self.stride = int(stride)
        self.padding = int(padding)

    def forward(self, x: Tensor) -> Tensor:
        out = ad.conv2d(x, self.kernel, stride=self.stride,
                        padding=self.padding)
        return out + ad.reshape(self.bias, (self.bias.shape[0], 1, 1))

    __call__ = forward


class LinearBnRelu(Module):
    """Linear -> BatchNorm1d -> ReLU, the unit block of the point MLPs."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator):
        super().__init__()
        self.linear = LinearLayer(in_features, out_features, rng)
        self.bn = BatchNorm1d(out_features)

    def forward(self, x: Tensor) -> Tensor:
        return ad.relu(self.bn(self.linear(x)))

    __call__ = forward


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    Update per parameter p with gradient g:
        m <- b1*m + (1-b1)*g         v <- b2*v + (1-b2)*g²
        p <- p - lr*( m̂/(sqrt(v̂)+eps) + wd*p )
    where m̂, v̂ are bias-corrected. The decay term uses p before the
    moment step and is not part of the moments.
    """

    def __init__(self, params: List[Tensor], lr: float = 2e-3,
                 betas: Tuple[float, float] = (0.9, 0.999),
                 epsilon: float = 1e-8, weight_decay: float = 1e-2):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.epsilon = float(epsilon)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)
            p.data = p.data - self.lr * (update + self.weight_decay * p.data)
