"""Parameter containers and token maps

Modules own Parameters and other modules as plain attributes. Traversal order
is attribute declaration order, which is also the order parameters are written
to checkpoints and reported by the gradient checker.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError
from .tensor import (
    Parameter,
    Tensor,
    conv2d,
    depthwise_conv2d,
    gelu,
    get_dtype,
    layer_norm,
    linear,
    mul,
    reshape,
    trunc_normal,
)

logger = logging.getLogger(__name__)

LN_EPS = 1e-6


@dataclass
class TokenMap:
    """Image features (B, N, C) with their spatial grid (Ht, Wt), N = Ht * Wt"""
    tokens: Tensor
    grid: Tuple[int, int]

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise ShapeError(f"TokenMap tokens must be (B, N, C), got {self.tokens.shape}")
        height, width = self.grid
        if height * width != self.tokens.shape[1]:
            raise ShapeError(
                f"TokenMap grid {self.grid} does not match {self.tokens.shape[1]} tokens"
            )

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]

    @property
    def channels(self) -> int:
        return self.tokens.shape[2]

    def to_grid(self) -> Tensor:
        """(B, Ht, Wt, C) view of the tokens"""
        return reshape(self.tokens, (self.batch, *self.grid, self.channels))

    @classmethod
    def from_grid(cls, x: Tensor) -> "TokenMap":
        batch, height, width, channels = x.shape
        return cls(reshape(x, (batch, height * width, channels)), (height, width))

    def with_tokens(self, tokens: Tensor) -> "TokenMap":
        return TokenMap(tokens, self.grid)


class Module:
    """Base class for everything holding parameters"""

    def __init__(self):
        self.training = True

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, Any]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        """Yield (dotted name, parameter) in declaration order"""
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(prefix=f"{full}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copy arrays into parameters; names and shapes must match exactly"""
        params = dict(self.named_parameters())
        missing = [n for n in params if n not in state]
        unexpected = [n for n in state if n not in params]
        if missing or unexpected:
            raise CheckpointError(
                f"State mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}"
            )
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise CheckpointError(
                    f"Parameter {name}: expected shape {p.shape}, got {value.shape}"
                )
            p.data = value.astype(get_dtype())


class Linear(Module):
    """Affine map over the last axis, weight stored as (in, out)"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(trunc_normal(rng, (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = LN_EPS):
        super().__init__()
        self.gain = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class Mlp(Module):
    """Two linear layers with GELU in between"""

    def __init__(self, in_features: int, hidden_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(in_features, hidden_features, rng)
        self.fc2 = Linear(hidden_features, out_features, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class Conv2d(Module):
    """Full 2-D convolution on (..., H, W, Cin), weight (k, k, Cin, Cout)"""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
    ):
        super().__init__()
        self.weight = Parameter(trunc_normal(rng, (kernel_size, kernel_size, in_channels, out_channels)))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class DepthwiseConv2d(Module):
    """Same-size depthwise convolution with kernel (k, k, C)

    Args:
        identity_init: Start from a unit center tap plus truncated-normal noise,
            so an untrained layer is close to a pass-through
    """

    def __init__(self, channels: int, rng: np.random.Generator, kernel_size: int = 3, identity_init: bool = False):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ConfigError(f"Depthwise kernel size must be odd, got {kernel_size}")
        kernel = trunc_normal(rng, (kernel_size, kernel_size, channels))
        if identity_init:
            center = kernel_size // 2
            kernel[center, center] += 1.0
        self.kernel = Parameter(kernel)
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return depthwise_conv2d(x, self.kernel, self.bias)


class DropPath(Module):
    """Stochastic depth on a residual branch; identity in eval mode or at rate 0"""

    def __init__(self, rate: float, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"drop_path rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        keep = 1.0 - self.rate
        per_sample = (self.rng.random(x.shape[0]) < keep) / keep
        mask = np.broadcast_to(per_sample.reshape((-1,) + (1,) * (x.ndim - 1)), x.shape)
        return mul(x, Tensor(mask))
