"""Dense tensors with reverse-mode automatic differentiation

Every numeric operation used by the model lives here. A Tensor wraps a numpy
array; operations are Function subclasses that record themselves on the output
tensor when any input requires a gradient. `backward` walks the recorded graph
in reverse topological order (a GradTape) and returns a gradient per leaf.

Conventions:
- Row-major, channels last: token maps are (..., N, C), images (..., H, W, C).
- No implicit broadcasting or rank promotion. Elementwise ops require equal
  shapes; use `broadcast_to` explicitly.
- Precision is global: f32 by default, f64 for gradient checking.

Example:
    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> w = Tensor([[3.0], [5.0]], requires_grad=True)
    >>> y = matmul(x, w)           # [[13.0]]
    >>> grads = backward(y.sum())
    >>> grads[w].numpy()           # [[1.0], [2.0]]
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[Any]]

PRECISIONS: Dict[str, type] = {"f32": np.float32, "f64": np.float64}

# tanh-approximation GELU constants
GELU_COEFF = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715

_state: Dict[str, Any] = {"dtype": np.float32, "grad_enabled": True}


def set_precision(name: str) -> None:
    """Set the global floating point precision ("f32" or "f64")"""
    if name not in PRECISIONS:
        raise ConfigError(f"Unknown precision: {name}. Expected one of {sorted(PRECISIONS)}")
    _state["dtype"] = PRECISIONS[name]


def get_dtype() -> type:
    """Current global numpy dtype"""
    return _state["dtype"]


def get_precision() -> str:
    """Current global precision name"""
    return "f64" if _state["dtype"] is np.float64 else "f32"


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the global precision

    Example:
        >>> with precision("f64"):
        ...     x = Tensor([1.0])   # float64
    """
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording the graph (finite differences, inference)"""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


# ---------------------------------------------------------------------------
# Random number generation
# ---------------------------------------------------------------------------

def make_rng(seed: int) -> np.random.Generator:
    """Create the seedable generator used for all initialisation and sampling"""
    return np.random.default_rng(seed)


def trunc_normal(
    rng: np.random.Generator,
    shape: Tuple[int, ...],
    std: float = 0.02,
    bound: float = 2.0,
) -> np.ndarray:
    """Sample a normal(0, std) array truncated at +-bound*std

    Out-of-range draws are resampled, so the result is deterministic for a
    given generator state.
    """
    values = rng.standard_normal(shape)
    outside = np.abs(values) > bound
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > bound
    return (values * std).astype(get_dtype())


# ---------------------------------------------------------------------------
# Tensor and graph recording
# ---------------------------------------------------------------------------

class Tensor:
    """Dense n-dimensional array participating in a differentiable graph

    Attributes:
        data: numpy array holding the values (global precision)
        requires_grad: True if gradients should flow to/through this tensor
        grad: Accumulated gradient (numpy array) after `backward`, leaves only
        name: Optional label used in reports and checkpoints
    """

    __array_priority__ = 100

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        name: Optional[str] = None,
        _ctx: Optional["Function"] = None,
    ):
        self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._ctx = _ctx

    # -- properties -----------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        """True if the tensor was created directly (no recorded parent op)"""
        return self._ctx is None

    @property
    def parents(self) -> Tuple["Tensor", ...]:
        return self._ctx.inputs if self._ctx is not None else ()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, no graph history"""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other: float) -> "Tensor":
        return add_scalar(mul_scalar(self, -1.0), float(other))

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            raise UsageError("Tensor / Tensor is not supported; divide by a scalar")
        return mul_scalar(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return mul_scalar(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key: Any) -> "Tensor":
        return getitem(self, key)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Trainable leaf tensor (requires_grad is always True)"""

    def __init__(self, data: ArrayLike, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


class Function:
    """Base class for differentiable operations

    Subclasses implement `forward` on numpy arrays and `backward`, which maps
    the output gradient to one gradient per input (None for inputs that get
    no gradient).
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs
        self.saved: Dict[str, Any] = {}

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = _state["grad_enabled"] and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=requires_grad, _ctx=fn if requires_grad else None)


@dataclass
class TapeEntry:
    """One recorded operation: the output tensor and the function producing it"""
    output: Tensor
    function: Function


class GradTape:
    """Operations reachable from a root, in topological order

    Every entry appears after all entries producing its inputs, and each node
    appears exactly once.
    """

    def __init__(self, entries: List[TapeEntry], leaves: List[Tensor]):
        self.entries = entries
        self.leaves = leaves

    @classmethod
    def record(cls, root: Tensor) -> "GradTape":
        """Collect the graph below `root` with an iterative post-order walk"""
        entries: List[TapeEntry] = []
        leaves: List[Tensor] = []
        visited: set = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]

        while stack:
            node, expanded = stack.pop()
            if expanded:
                entries.append(TapeEntry(output=node, function=node._ctx))
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            if node._ctx is None:
                if node.requires_grad:
                    leaves.append(node)
                continue
            stack.append((node, True))
            for parent in reversed(node._ctx.inputs):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        return cls(entries, leaves)

    def replay_backward(self, root: Tensor) -> Dict[int, np.ndarray]:
        """Propagate d(root)/d(node) through the tape; returns grads keyed by id"""
        grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for entry in reversed(self.entries):
            grad = grads.get(id(entry.output))
            if grad is None:
                continue
            input_grads = entry.function.backward(grad)
            for inp, g in zip(entry.function.inputs, input_grads):
                if g is None or not inp.requires_grad:
                    continue
                if g.shape != inp.shape:
                    raise ShapeError(
                        f"{type(entry.function).__name__} produced gradient of shape "
                        f"{g.shape} for input of shape {inp.shape}"
                    )
                key = id(inp)
                grads[key] = grads[key] + g if key in grads else g
            if entry.output is not root:
                del grads[id(entry.output)]
        return grads


def backward(root: Tensor, wrt: Optional[Sequence[Tensor]] = None) -> Dict[Tensor, Tensor]:
    """Reverse-mode gradient of a scalar root

    Gradients are also accumulated into `leaf.grad` for every reached leaf.

    Args:
        root: Single-element tensor
        wrt: Optional leaves to report. Leaves that do not contribute to the
            root get an all-zero gradient of their own shape.

    Returns:
        Mapping leaf -> gradient tensor (all reached leaves when wrt is None)

    Raises:
        UsageError: If root has more than one element
    """
    if root.size != 1:
        raise UsageError(f"backward() needs a scalar root, got shape {root.shape}")

    if root.requires_grad:
        tape = GradTape.record(root)
        raw = tape.replay_backward(root)
        reached = tape.leaves
    else:
        raw, reached = {}, []

    for leaf in reached:
        g = raw.get(id(leaf))
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    targets = list(wrt) if wrt is not None else reached
    result: Dict[Tensor, Tensor] = {}
    for leaf in targets:
        g = raw.get(id(leaf))
        result[leaf] = Tensor(np.zeros_like(leaf.data) if g is None else g)
    return result


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (broadcast explicitly)")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _normalize_axes(axis: Optional[Union[int, Tuple[int, ...]]], ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _spatial_pad(ndim: int, pad: int) -> List[Tuple[int, int]]:
    """Pad spec for (..., H, W, C) arrays: pad H and W only"""
    widths = [(0, 0)] * ndim
    widths[-3] = (pad, pad)
    widths[-2] = (pad, pad)
    return widths


def tensor(data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape: Tuple[int, ...], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape: Tuple[int, ...], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Elementwise and shape operations
# ---------------------------------------------------------------------------

class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        self.saved["a"], self.saved["b"] = a, b
        return a * b

    def backward(self, grad):
        return grad * self.saved["b"], grad * self.saved["a"]


class AddScalar(Function):
    def forward(self, a, value):
        return a + value

    def backward(self, grad):
        return (grad,)


class MulScalar(Function):
    def forward(self, a, value):
        self.saved["value"] = value
        return a * value

    def backward(self, grad):
        return (grad * self.saved["value"],)


class BroadcastTo(Function):
    def forward(self, a, shape):
        self.saved["shape"] = a.shape
        return np.broadcast_to(a, shape).copy()

    def backward(self, grad):
        return (_unbroadcast(grad, self.saved["shape"]),)


class Reshape(Function):
    def forward(self, a, shape):
        self.saved["shape"] = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.saved["shape"]),)


class Transpose(Function):
    def forward(self, a, axes):
        self.saved["axes"] = axes
        return np.transpose(a, axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.saved["axes"])),)


class Concat(Function):
    def forward(self, *arrays, axis):
        self.saved["axis"] = axis
        self.saved["sizes"] = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.saved["sizes"])[:-1]
        return tuple(np.split(grad, splits, axis=self.saved["axis"]))


class GetItem(Function):
    def forward(self, a, key):
        self.saved["shape"], self.saved["key"] = a.shape, key
        return np.array(a[key])

    def backward(self, grad):
        out = np.zeros(self.saved["shape"], dtype=grad.dtype)
        np.add.at(out, self.saved["key"], grad)
        return (out,)


class Pad(Function):
    def forward(self, a, widths):
        self.saved["widths"] = widths
        return np.pad(a, widths)

    def backward(self, grad):
        index = tuple(slice(lo, grad.shape[i] - hi) for i, (lo, hi) in enumerate(self.saved["widths"]))
        return (grad[index],)


class Roll(Function):
    def forward(self, a, shift, axis):
        self.saved["shift"], self.saved["axis"] = shift, axis
        return np.roll(a, shift, axis=axis)

    def backward(self, grad):
        shift = self.saved["shift"]
        negated = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
        return (np.roll(grad, negated, axis=self.saved["axis"]),)


class Sum(Function):
    def forward(self, a, axis, keepdims):
        self.saved["shape"] = a.shape
        self.saved["axes"] = _normalize_axes(axis, a.ndim)
        return np.sum(a, axis=self.saved["axes"], keepdims=keepdims)

    def backward(self, grad):
        shape = list(self.saved["shape"])
        for ax in self.saved["axes"]:
            shape[ax] = 1
        return (np.broadcast_to(grad.reshape(shape), self.saved["shape"]).copy(),)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    return Mul.apply(a, b)


def add_scalar(a: Tensor, value: float) -> Tensor:
    return AddScalar.apply(a, value=value)


def mul_scalar(a: Tensor, value: float) -> Tensor:
    return MulScalar.apply(a, value=value)


def broadcast_to(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Explicit numpy-style broadcast of `a` to `shape`"""
    try:
        np.broadcast_shapes(a.shape, tuple(shape))
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}")
    if tuple(np.broadcast_shapes(a.shape, tuple(shape))) != tuple(shape):
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}")
    return BroadcastTo.apply(a, shape=tuple(shape))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and math.prod(shape) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return Reshape.apply(a, shape=shape)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) % a.ndim for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} are not a permutation for shape {a.shape}")
    return Transpose.apply(a, axes=axes)


def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    first = tensors[0]
    axis = axis % first.ndim
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            t.shape[i] != first.shape[i] for i in range(first.ndim) if i != axis
        ):
            raise ShapeError(f"concat: shapes {first.shape} and {t.shape} differ off axis {axis}")
    return Concat.apply(*tensors, axis=axis)


def getitem(a: Tensor, key: Any) -> Tensor:
    return GetItem.apply(a, key=key)


def pad(a: Tensor, widths: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero padding; `widths` has one (before, after) pair per axis"""
    widths = tuple((int(lo), int(hi)) for lo, hi in widths)
    if len(widths) != a.ndim:
        raise ShapeError(f"pad: {len(widths)} pad pairs for shape {a.shape}")
    return Pad.apply(a, widths=widths)


def roll(a: Tensor, shift: Union[int, Tuple[int, ...]], axis: Union[int, Tuple[int, ...]]) -> Tensor:
    return Roll.apply(a, shift=shift, axis=axis)


def tensor_sum(a: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    return mul_scalar(tensor_sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

class MatMul(Function):
    def forward(self, a, b):
        self.saved["a"], self.saved["b"] = a, b
        return a @ b

    def backward(self, grad):
        a, b = self.saved["a"], self.saved["b"]
        return grad @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ grad


class Linear(Function):
    """y = x @ w (+ b) over the last axis of x"""

    def forward(self, x, w, *bias):
        self.saved["x"], self.saved["w"] = x, w
        self.saved["has_bias"] = bool(bias)
        out = x @ w
        if bias:
            out = out + bias[0]
        return out

    def backward(self, grad):
        x, w = self.saved["x"], self.saved["w"]
        flat_x = x.reshape(-1, x.shape[-1])
        flat_g = grad.reshape(-1, grad.shape[-1])
        grads = [grad @ w.T, flat_x.T @ flat_g]
        if self.saved["has_bias"]:
            grads.append(flat_g.sum(axis=0))
        return tuple(grads)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes must match

    Raises:
        ShapeError: If ranks, batch axes or inner extents disagree
    """
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return MatMul.apply(a, b)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: x (..., in) -> (..., out)"""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        return Linear.apply(x, weight, bias)
    return Linear.apply(x, weight)


# ---------------------------------------------------------------------------
# Normalisation and activations
# ---------------------------------------------------------------------------

class Softmax(Function):
    def forward(self, x, axis):
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)
        self.saved["y"], self.saved["axis"] = y, axis
        return y

    def backward(self, grad):
        y, axis = self.saved["y"], self.saved["axis"]
        return (y * (grad - (grad * y).sum(axis=axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, x, axis):
        shifted = x - x.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.saved["softmax"], self.saved["axis"] = np.exp(out), axis
        return out

    def backward(self, grad):
        p, axis = self.saved["softmax"], self.saved["axis"]
        return (grad - p * grad.sum(axis=axis, keepdims=True),)


class LayerNorm(Function):
    def forward(self, x, gain, bias, eps):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv_std
        self.saved["xhat"], self.saved["inv_std"], self.saved["gain"] = xhat, inv_std, gain
        return xhat * gain + bias

    def backward(self, grad):
        xhat, inv_std, gain = self.saved["xhat"], self.saved["inv_std"], self.saved["gain"]
        channels = xhat.shape[-1]
        g_xhat = grad * gain
        g_x = inv_std * (
            g_xhat
            - g_xhat.mean(axis=-1, keepdims=True)
            - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True)
        )
        g_gain = (grad * xhat).reshape(-1, channels).sum(axis=0)
        g_bias = grad.reshape(-1, channels).sum(axis=0)
        return g_x, g_gain, g_bias


class Gelu(Function):
    def forward(self, x):
        inner = GELU_COEFF * (x + GELU_CUBIC * x ** 3)
        t = np.tanh(inner)
        self.saved["x"], self.saved["t"] = x, t
        return 0.5 * x * (1.0 + t)

    def backward(self, grad):
        x, t = self.saved["x"], self.saved["t"]
        d_inner = GELU_COEFF * (1.0 + 3.0 * GELU_CUBIC * x ** 2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along `axis`"""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    return Softmax.apply(x, axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"log_softmax: axis {axis} invalid for shape {x.shape}")
    return LogSoftmax.apply(x, axis=axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift"""
    channels = x.shape[-1]
    if gain.shape != (channels,) or bias.shape != (channels,):
        raise ShapeError(
            f"layer_norm: input {x.shape} needs gain/bias of shape ({channels},), "
            f"got {gain.shape} and {bias.shape}"
        )
    if eps <= 0:
        raise ConfigError(f"layer_norm: eps must be positive, got {eps}")
    return LayerNorm.apply(x, gain, bias, eps=eps)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation"""
    return Gelu.apply(x)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy over the leading axis

    Args:
        logits: (B, K) scores
        targets: (B,) integer labels or (B, K) soft target distributions
    """
    targets = np.asarray(targets)
    batch, classes = logits.shape
    if targets.ndim == 1:
        soft = np.zeros((batch, classes))
        soft[np.arange(batch), targets.astype(int)] = 1.0
    else:
        soft = targets
    if soft.shape != logits.shape:
        raise ShapeError(f"cross_entropy: targets {soft.shape} do not match logits {logits.shape}")
    picked = mul(log_softmax(logits, axis=-1), Tensor(soft))
    return mul_scalar(tensor_sum(picked), -1.0 / batch)


# ---------------------------------------------------------------------------
# Convolutions (channels-last, zero padding)
# ---------------------------------------------------------------------------

class DepthwiseConv2d(Function):
    def forward(self, x, kernel, bias):
        k = kernel.shape[0]
        p = (k - 1) // 2
        height, width = x.shape[-3], x.shape[-2]
        xp = np.pad(x, _spatial_pad(x.ndim, p))
        out = np.zeros_like(x)
        for i in range(k):
            for j in range(k):
                out += xp[..., i:i + height, j:j + width, :] * kernel[i, j]
        self.saved.update(xp=xp, kernel=kernel, pad=p)
        return out + bias

    def backward(self, grad):
        xp, kernel, p = self.saved["xp"], self.saved["kernel"], self.saved["pad"]
        k = kernel.shape[0]
        height, width, channels = grad.shape[-3], grad.shape[-2], grad.shape[-1]
        g_xp = np.zeros_like(xp)
        g_kernel = np.zeros_like(kernel)
        for i in range(k):
            for j in range(k):
                g_xp[..., i:i + height, j:j + width, :] += grad * kernel[i, j]
                window = xp[..., i:i + height, j:j + width, :]
                g_kernel[i, j] = (grad * window).reshape(-1, channels).sum(axis=0)
        g_x = g_xp[..., p:p + height, p:p + width, :]
        g_bias = grad.reshape(-1, channels).sum(axis=0)
        return g_x, g_kernel, g_bias


class Conv2d(Function):
    def forward(self, x, weight, *bias, stride, padding):
        k = weight.shape[0]
        xp = np.pad(x, _spatial_pad(x.ndim, padding))
        out_h = (xp.shape[-3] - k) // stride + 1
        out_w = (xp.shape[-2] - k) // stride + 1
        out = np.zeros(x.shape[:-3] + (out_h, out_w, weight.shape[-1]), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                patch = xp[..., i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride, :]
                out += patch @ weight[i, j]
        if bias:
            out = out + bias[0]
        self.saved.update(xp=xp, weight=weight, stride=stride, padding=padding, has_bias=bool(bias))
        return out

    def backward(self, grad):
        xp, weight = self.saved["xp"], self.saved["weight"]
        stride, p = self.saved["stride"], self.saved["padding"]
        k = weight.shape[0]
        out_h, out_w = grad.shape[-3], grad.shape[-2]
        c_in, c_out = weight.shape[2], weight.shape[3]
        g_xp = np.zeros_like(xp)
        g_weight = np.zeros_like(weight)
        flat_g = grad.reshape(-1, c_out)
        for i in range(k):
            for j in range(k):
                rows = slice(i, i + stride * (out_h - 1) + 1, stride)
                cols = slice(j, j + stride * (out_w - 1) + 1, stride)
                g_xp[..., rows, cols, :] += grad @ weight[i, j].T
                g_weight[i, j] = xp[..., rows, cols, :].reshape(-1, c_in).T @ flat_g
        height, width = xp.shape[-3] - 2 * p, xp.shape[-2] - 2 * p
        grads = [g_xp[..., p:p + height, p:p + width, :], g_weight]
        if self.saved["has_bias"]:
            grads.append(flat_g.sum(axis=0))
        return tuple(grads)


def depthwise_conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-size depthwise convolution of x (..., H, W, C) with kernel (k, k, C)

    Channel c of the output depends only on channel c of the input; borders
    are zero padded by (k - 1) / 2.

    Raises:
        ConfigError: If k is even
        ShapeError: If kernel/bias channels do not match x
    """
    if kernel.ndim != 3 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"depthwise_conv2d: kernel must be (k, k, C), got {kernel.shape}")
    if kernel.shape[0] % 2 == 0:
        raise ConfigError(f"depthwise_conv2d: kernel size must be odd, got {kernel.shape[0]}")
    if x.ndim < 3 or kernel.shape[2] != x.shape[-1] or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"depthwise_conv2d: input {x.shape}, kernel {kernel.shape} and bias {bias.shape} disagree"
        )
    return DepthwiseConv2d.apply(x, kernel, bias)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Full convolution of x (..., H, W, Cin) with weight (k, k, Cin, Cout)"""
    if weight.ndim != 4 or weight.shape[0] != weight.shape[1]:
        raise ShapeError(f"conv2d: weight must be (k, k, Cin, Cout), got {weight.shape}")
    if x.ndim < 3 or x.shape[-1] != weight.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} does not match weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: invalid stride {stride} / padding {padding}")
    if bias is not None:
        return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)
    return Conv2d.apply(x, weight, stride=stride, padding=padding)
