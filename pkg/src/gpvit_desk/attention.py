"""Multi-head attention and the local attention kernels of the encoder

Kernels:
- global: every token attends to every token
- window: non-overlapping w x w cells, grid zero padded to multiples of w
- shifted-window: windows displaced by floor(w/2) with a region mask so
  tokens that are not spatially adjacent in the original grid never mix
- strip-pair (LePE): half the heads attend within horizontal strips of height
  s, half within vertical strips of width s; a 3x3 depthwise convolution of V
  inside each strip is added to the attention output

Window kinds pad, project, attend, project and crop, in that order. Padded keys
are masked out; a padded query attends to itself only and is discarded.
Every kernel can return its attention weights as a dense (B, heads, N, N) array
over the unpadded tokens, which is what the support checks inspect.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, field_validator, model_validator

from .errors import ConfigError, ShapeError, UsageError
from .layers import DepthwiseConv2d, DropPath, LayerNorm, Linear, Mlp, Module, TokenMap
from .tensor import (
    Tensor,
    add,
    concat,
    depthwise_conv2d,
    getitem,
    matmul,
    mul_scalar,
    pad,
    reshape,
    roll,
    softmax,
    swapaxes,
    transpose,
)

logger = logging.getLogger(__name__)

MASK_VALUE = -1e9

AttentionKind = Literal["full", "window", "strip-pair", "shifted-window"]


class AttentionConfig(BaseModel):
    """Head layout of one attention call

    Attributes:
        num_heads: Number of heads h
        model_dim: Channel width C (divisible by h)
        use_output_projection: Apply a final C -> C projection after the heads
    """
    num_heads: int
    model_dim: int
    use_output_projection: bool = True

    @field_validator("num_heads", "model_dim")
    @classmethod
    def validate_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"must be positive, got {v}")
        return v

    @model_validator(mode="after")
    def validate_divisible(self) -> "AttentionConfig":
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}"
            )
        return self

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


class WindowSpec(BaseModel):
    """Spatial support of a local attention kernel

    `size` is the window side w for window kinds and the strip width s for
    strip-pair; it is ignored for full attention.
    """
    kind: AttentionKind
    size: int = 0
    grid: Tuple[int, int]

    @field_validator("grid")
    @classmethod
    def validate_grid(cls, v: Tuple[int, int]) -> Tuple[int, int]:
        if v[0] < 1 or v[1] < 1:
            raise ValueError(f"grid extents must be positive, got {v}")
        return v


@dataclass
class AttentionWeights:
    """Dense attention weights over unpadded tokens, shape (B, heads, N, N)"""
    dense: np.ndarray
    grid: Tuple[int, int]


# ---------------------------------------------------------------------------
# Core attention
# ---------------------------------------------------------------------------

def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """(B, N, C) -> (B, h, N, C/h)"""
    batch, tokens, channels = x.shape
    return transpose(reshape(x, (batch, tokens, num_heads, channels // num_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """(B, h, N, d) -> (B, N, h*d)"""
    batch, heads, tokens, dim = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (batch, tokens, heads * dim))


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    cfg: AttentionConfig,
    mask: Optional[np.ndarray] = None,
    proj: Optional[Linear] = None,
    return_weights: bool = False,
    softmax_axis: int = -1,
) -> Union[Tensor, Tuple[Tensor, np.ndarray]]:
    """Softmax(Q_h K_h^T / sqrt(d) + mask) V_h per head, heads concatenated

    Args:
        q: (Nq, C) or (B, Nq, C) queries
        k: (Nk, C) or (B, Nk, C) keys
        v: (Nk, C) or (B, Nk, C) values
        cfg: Head layout
        mask: Boolean support, True where a query may attend to a key;
            broadcastable to (B, h, Nq, Nk)
        proj: Output projection, required when cfg.use_output_projection
        return_weights: Also return the (B, h, Nq, Nk) weights as numpy
        softmax_axis: Normalisation axis of the logits. Only the invariant
            harness changes it, to inject a known fault.

    Returns:
        Output of the same rank as q, optionally with the weights

    Raises:
        ShapeError: On inconsistent operand shapes
        ConfigError: If some query row has no allowed key
    """
    unbatched = q.ndim == 2
    if unbatched:
        q, k, v = (reshape(t, (1, *t.shape)) for t in (q, k, v))

    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError(f"attention operands must be (B, N, C): {q.shape}, {k.shape}, {v.shape}")
    if k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeError(f"attention: q {q.shape} does not match k {k.shape} / v {v.shape}")
    if q.shape[2] != cfg.model_dim:
        raise ShapeError(f"attention: width {q.shape[2]} does not match model_dim {cfg.model_dim}")

    qh, kh, vh = (split_heads(t, cfg.num_heads) for t in (q, k, v))
    logits = mul_scalar(matmul(qh, swapaxes(kh, -1, -2)), 1.0 / math.sqrt(cfg.head_dim))

    if mask is not None:
        allowed = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
        if not allowed.any(axis=-1).all():
            raise ConfigError("attention mask leaves a query row with no allowed key")
        logits = add(logits, Tensor(np.where(allowed, 0.0, MASK_VALUE)))

    weights = softmax(logits, axis=softmax_axis)
    out = merge_heads(matmul(weights, vh))

    if cfg.use_output_projection:
        if proj is None:
            raise UsageError("use_output_projection is set but no projection was given")
        out = proj(out)

    if unbatched:
        out = reshape(out, out.shape[1:])
    if return_weights:
        return out, weights.data
    return out


# ---------------------------------------------------------------------------
# Rectangular region partitioning
# ---------------------------------------------------------------------------

def _padded_extent(extent: int, region: int) -> int:
    return -(-extent // region) * region


def partition_regions(x: Tensor, rh: int, rw: int) -> Tensor:
    """(B, Hp, Wp, C) -> (B * nh * nw, rh * rw, C), regions in row-major order"""
    batch, height, width, channels = x.shape
    nh, nw = height // rh, width // rw
    x = reshape(x, (batch, nh, rh, nw, rw, channels))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (batch * nh * nw, rh * rw, channels))


def merge_regions(x: Tensor, batch: int, height: int, width: int, rh: int, rw: int) -> Tensor:
    """Inverse of partition_regions"""
    channels = x.shape[-1]
    nh, nw = height // rh, width // rw
    x = reshape(x, (batch, nh, nw, rh, rw, channels))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (batch, height, width, channels))


def _partition_indices(index_grid: np.ndarray, rh: int, rw: int) -> np.ndarray:
    """Same partition on a (Hp, Wp) integer grid -> (nRegions, rh * rw)"""
    height, width = index_grid.shape
    nh, nw = height // rh, width // rw
    return index_grid.reshape(nh, rh, nw, rw).transpose(0, 2, 1, 3).reshape(nh * nw, rh * rw)


@dataclass
class RegionLayout:
    """How a (Ht, Wt) grid is cut into rh x rw regions after padding and shift

    Attributes:
        index: (nRegions, L) original token index of each slot, -1 for padding
        allowed: (nRegions, L, L) attention support per region
    """
    rh: int
    rw: int
    padded: Tuple[int, int]
    shift: int
    index: np.ndarray
    allowed: np.ndarray


def _shift_labels(height: int, width: int, window: int, shift: int) -> np.ndarray:
    """Region labels of a cyclically shifted grid; equal labels may interact"""
    labels = np.zeros((height, width), dtype=np.int64)
    if shift == 0:
        return labels
    bands = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    label = 0
    for rows in bands:
        for cols in bands:
            labels[rows, cols] = label
            label += 1
    return labels


def region_layout(grid: Tuple[int, int], rh: int, rw: int, shift: int = 0) -> RegionLayout:
    """Token placement and support for a padded (and optionally shifted) partition"""
    height, width = grid
    hp, wp = _padded_extent(height, rh), _padded_extent(width, rw)

    index_grid = np.full((hp, wp), -1, dtype=np.int64)
    index_grid[:height, :width] = np.arange(height * width).reshape(height, width)
    if shift:
        index_grid = np.roll(index_grid, (-shift, -shift), axis=(0, 1))

    index = _partition_indices(index_grid, rh, rw)
    labels = _partition_indices(_shift_labels(hp, wp, rh, shift), rh, rw)

    valid = index >= 0
    same_region = labels[:, :, None] == labels[:, None, :]
    allowed = valid[:, :, None] & valid[:, None, :] & same_region
    slots = np.arange(rh * rw)
    allowed[:, slots, slots] = True

    return RegionLayout(rh=rh, rw=rw, padded=(hp, wp), shift=shift, index=index, allowed=allowed)


def _dense_weights(weights: np.ndarray, index: np.ndarray, batch: int, num_tokens: int) -> np.ndarray:
    """Scatter per-region weights (B*nR, h, L, L) into (B, h, N, N)"""
    regions, slots = index.shape
    heads = weights.shape[1]
    weights = weights.reshape(batch, regions, heads, slots, slots)
    dense = np.zeros((batch, heads, num_tokens, num_tokens), dtype=weights.dtype)
    for r in range(regions):
        keep = np.flatnonzero(index[r] >= 0)
        tokens = index[r, keep]
        block = weights[:, r][:, :, keep][:, :, :, keep]
        dense[:, :, tokens[:, None], tokens[None, :]] = block
    return dense


def _region_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    layout: RegionLayout,
    num_heads: int,
    lepe: Optional[Tuple[Tensor, Tensor]] = None,
) -> Tuple[Tensor, np.ndarray]:
    """Attention within regions of padded (B, Hp, Wp, Cb) grids

    Returns the merged (B, Hp, Wp, Cb) output and per-region weights.
    """
    batch, hp, wp, channels = q.shape
    rh, rw = layout.rh, layout.rw
    qr, kr, vr = (partition_regions(t, rh, rw) for t in (q, k, v))

    mask = np.tile(layout.allowed, (batch, 1, 1))[:, None]
    cfg = AttentionConfig(num_heads=num_heads, model_dim=channels, use_output_projection=False)
    out, weights = multi_head_attention(qr, kr, vr, cfg, mask=mask, return_weights=True)

    if lepe is not None:
        kernel, bias = lepe
        strips = reshape(vr, (vr.shape[0], rh, rw, channels))
        positional = depthwise_conv2d(strips, kernel, bias)
        out = add(out, reshape(positional, out.shape))

    return merge_regions(out, batch, hp, wp, rh, rw), weights


def _pad_grid(x: Tensor, padded: Tuple[int, int]) -> Tensor:
    _, height, width, _ = x.shape
    return pad(x, ((0, 0), (0, padded[0] - height), (0, padded[1] - width), (0, 0)))


def _crop_grid(x: Tensor, grid: Tuple[int, int]) -> Tensor:
    if x.shape[1:3] == tuple(grid):
        return x
    return getitem(x, (slice(None), slice(0, grid[0]), slice(0, grid[1]), slice(None)))


def _split_qkv(qkv: Tensor, channels: int) -> Tuple[Tensor, Tensor, Tensor]:
    index = (slice(None),) * (qkv.ndim - 1)
    return tuple(getitem(qkv, index + (slice(i * channels, (i + 1) * channels),)) for i in range(3))


# ---------------------------------------------------------------------------
# Kernels over token maps
# ---------------------------------------------------------------------------

def global_attention(
    x: TokenMap,
    cfg: AttentionConfig,
    qkv: Linear,
    proj: Optional[Linear],
    return_weights: bool = False,
) -> Union[TokenMap, Tuple[TokenMap, AttentionWeights]]:
    """Full self-attention over all N tokens"""
    q, k, v = _split_qkv(qkv(x.tokens), cfg.model_dim)
    out, weights = multi_head_attention(q, k, v, cfg, proj=proj, return_weights=True)
    result = x.with_tokens(out)
    if return_weights:
        return result, AttentionWeights(weights, x.grid)
    return result


def _windowed(
    x: TokenMap,
    cfg: AttentionConfig,
    window: int,
    shift: int,
    qkv: Linear,
    proj: Optional[Linear],
    return_weights: bool,
) -> Union[TokenMap, Tuple[TokenMap, AttentionWeights]]:
    if window <= 0:
        raise ConfigError(f"window size must be positive, got {window}")
    layout = region_layout(x.grid, window, window, shift)
    grid = _pad_grid(x.to_grid(), layout.padded)
    if shift:
        grid = roll(grid, (-shift, -shift), axis=(1, 2))

    q, k, v = _split_qkv(qkv(grid), cfg.model_dim)
    out, weights = _region_attention(q, k, v, layout, cfg.num_heads)

    if shift:
        out = roll(out, (shift, shift), axis=(1, 2))
    if cfg.use_output_projection:
        if proj is None:
            raise UsageError("use_output_projection is set but no projection was given")
        out = proj(out)
    result = TokenMap.from_grid(_crop_grid(out, x.grid))

    if return_weights:
        dense = _dense_weights(weights, layout.index, x.batch, x.num_tokens)
        return result, AttentionWeights(dense, x.grid)
    return result


def window_attention(
    x: TokenMap,
    cfg: AttentionConfig,
    spec: WindowSpec,
    qkv: Linear,
    proj: Optional[Linear],
    return_weights: bool = False,
) -> Union[TokenMap, Tuple[TokenMap, AttentionWeights]]:
    """Attention restricted to non-overlapping w x w windows

    Raises:
        ConfigError: If w <= 0
    """
    return _windowed(x, cfg, spec.size, 0, qkv, proj, return_weights)


def shifted_window_attention(
    x: TokenMap,
    cfg: AttentionConfig,
    spec: WindowSpec,
    qkv: Linear,
    proj: Optional[Linear],
    shift: Optional[int] = None,
    return_weights: bool = False,
) -> Union[TokenMap, Tuple[TokenMap, AttentionWeights]]:
    """Window attention on a grid rolled by floor(w/2), with region masking

    Args:
        shift: Override the displacement; 0 gives plain window attention
    """
    if spec.size <= 0:
        raise ConfigError(f"window size must be positive, got {spec.size}")
    displacement = spec.size // 2 if shift is None else shift
    if not 0 <= displacement < spec.size:
        raise ConfigError(f"shift must be in [0, {spec.size}), got {displacement}")
    return _windowed(x, cfg, spec.size, displacement, qkv, proj, return_weights)


def lepe_attention(
    x: TokenMap,
    cfg: AttentionConfig,
    spec: WindowSpec,
    qkv: Linear,
    proj: Optional[Linear],
    lepe_kernel: Tensor,
    lepe_bias: Optional[Tensor] = None,
    return_weights: bool = False,
) -> Union[TokenMap, Tuple[TokenMap, AttentionWeights]]:
    """Strip-pair attention with locally enhanced positional encoding

    Heads 0..h/2-1 use horizontal strips (s rows, full width) on the first
    C/2 channels; the remaining heads use vertical strips on the rest.
    Strip widths larger than the grid are clamped to the grid.

    Raises:
        ConfigError: If the head count is odd or s <= 0
    """
    if cfg.num_heads % 2:
        raise ConfigError(f"LePE attention needs an even head count, got {cfg.num_heads}")
    if spec.size <= 0:
        raise ConfigError(f"strip width must be positive, got {spec.size}")
    channels = cfg.model_dim
    if lepe_kernel.shape != (3, 3, channels):
        raise ShapeError(f"LePE kernel must be (3, 3, {channels}), got {lepe_kernel.shape}")
    if lepe_bias is None:
        lepe_bias = Tensor(np.zeros(channels))

    height, width = x.grid
    half = channels // 2
    strip = spec.size
    branches = [
        (min(strip, height), width, slice(0, half)),
        (height, min(strip, width), slice(half, channels)),
    ]

    q, k, v = _split_qkv(qkv(x.to_grid()), channels)
    outputs: List[Tensor] = []
    dense: List[np.ndarray] = []
    for rh, rw, part in branches:
        layout = region_layout(x.grid, rh, rw)
        channel_index = (slice(None), slice(None), slice(None), part)
        qb, kb, vb = (_pad_grid(getitem(t, channel_index), layout.padded) for t in (q, k, v))
        kernel = getitem(lepe_kernel, (slice(None), slice(None), part))
        bias = getitem(lepe_bias, (part,))
        out, weights = _region_attention(qb, kb, vb, layout, cfg.num_heads // 2, lepe=(kernel, bias))
        outputs.append(_crop_grid(out, x.grid))
        if return_weights:
            dense.append(_dense_weights(weights, layout.index, x.batch, x.num_tokens))

    out = concat(outputs, axis=-1)
    if cfg.use_output_projection:
        if proj is None:
            raise UsageError("use_output_projection is set but no projection was given")
        out = proj(out)
    result = TokenMap.from_grid(out)

    if return_weights:
        return result, AttentionWeights(np.concatenate(dense, axis=1), x.grid)
    return result


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Attention(Module):
    """Token-mixing attention of one kind with its own projections

    Args:
        channels: Model width C
        num_heads: Head count
        kind: "full" | "window" | "shifted-window" | "strip-pair"
        size: Window side or strip width (unused for full)
        rng: Initialisation generator
    """

    def __init__(self, channels: int, num_heads: int, kind: AttentionKind, size: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = AttentionConfig(num_heads=num_heads, model_dim=channels)
        if kind == "strip-pair" and num_heads % 2:
            raise ConfigError(f"LePE attention needs an even head count, got {num_heads}")
        if kind != "full" and size <= 0:
            raise ConfigError(f"{kind} attention needs a positive size, got {size}")
        self.kind = kind
        self.size = size
        self.qkv = Linear(channels, 3 * channels, rng)
        self.proj = Linear(channels, channels, rng)
        self.lepe = DepthwiseConv2d(channels, rng) if kind == "strip-pair" else None

    def spec(self, grid: Tuple[int, int]) -> WindowSpec:
        return WindowSpec(kind=self.kind, size=self.size, grid=grid)

    def forward(self, x: TokenMap, return_weights: bool = False):
        if self.kind == "full":
            return global_attention(x, self.cfg, self.qkv, self.proj, return_weights)
        spec = self.spec(x.grid)
        if self.kind == "window":
            return window_attention(x, self.cfg, spec, self.qkv, self.proj, return_weights)
        if self.kind == "shifted-window":
            return shifted_window_attention(
                x, self.cfg, spec, self.qkv, self.proj, return_weights=return_weights
            )
        return lepe_attention(
            x, self.cfg, spec, self.qkv, self.proj,
            self.lepe.kernel, self.lepe.bias, return_weights=return_weights,
        )


class EncoderLayer(Module):
    """Pre-norm transformer layer: x + Attn(LN(x)), then x + FFN(LN(x))"""

    def __init__(
        self,
        channels: int,
        num_heads: int,
        kind: AttentionKind,
        size: int,
        ffn_ratio: int,
        rng: np.random.Generator,
        drop_path: float = 0.0,
    ):
        super().__init__()
        self.norm1 = LayerNorm(channels)
        self.attn = Attention(channels, num_heads, kind, size, rng)
        self.norm2 = LayerNorm(channels)
        self.mlp = Mlp(channels, ffn_ratio * channels, channels, rng)
        self.drop_path = DropPath(drop_path, rng)

    def forward(self, x: TokenMap) -> TokenMap:
        mixed = self.attn(x.with_tokens(self.norm1(x.tokens)))
        tokens = add(x.tokens, self.drop_path(mixed.tokens))
        tokens = add(tokens, self.drop_path(self.mlp(self.norm2(tokens))))
        return x.with_tokens(tokens)
