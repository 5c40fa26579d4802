"""Group Propagation block: group, propagate, ungroup

Feature grouping lets M learnable group tokens attend over the N image tokens
(queries = groups, keys = W^K LN(X), values = LN(X), no query/value/output
projection), so every grouped feature is a per-head convex combination of the
normalised image features. Propagation mixes the M grouped features (MLP-Mixer
by default). Ungrouping lets the image tokens attend over the updated groups;
the first residual is replaced by a concatenation with the raw input and a
2C -> C projection, followed by a pre-norm FFN and a 3x3 depthwise
convolution with no residual around it.

Cost of one block is linear in N: every N-dependent term is N*M or N*C.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal, Tuple

import numpy as np

from .attention import AttentionConfig, multi_head_attention
from .errors import ConfigError, ShapeError, UsageError
from .layers import DepthwiseConv2d, LayerNorm, Linear, Mlp, Module, TokenMap
from .tensor import (
    Parameter,
    Tensor,
    add,
    broadcast_to,
    concat,
    reshape,
    swapaxes,
    trunc_normal,
)

logger = logging.getLogger(__name__)

PropagationKind = Literal["mixer", "selfattn", "none"]


def mixer_token_hidden(num_groups: int, ratio: float = 0.5) -> int:
    """Hidden width of the token-mixing MLP, ceil(ratio * M), at least 1"""
    return max(1, math.ceil(ratio * num_groups))


@dataclass
class GroupAssignment:
    """Grouping attention of one block

    Attributes:
        weights: (B, heads, M, N); each (head, group) row sums to 1 over tokens
        grid: (Ht, Wt) of the image tokens
    """
    weights: np.ndarray
    grid: Tuple[int, int]

    @property
    def num_groups(self) -> int:
        return self.weights.shape[2]

    def argmax_map(self) -> np.ndarray:
        """(B, Ht, Wt) index of the group with the largest head-averaged weight"""
        averaged = self.weights.mean(axis=1)
        return averaged.argmax(axis=1).reshape(self.weights.shape[0], *self.grid)


# ---------------------------------------------------------------------------
# Propagation cores
# ---------------------------------------------------------------------------

class MixerPropagation(Module):
    """Y' = Y + MLP1(LN(Y)^T)^T, then Y~ = Y' + MLP2(LN(Y'))"""

    def __init__(
        self,
        num_groups: int,
        channels: int,
        rng: np.random.Generator,
        token_ratio: float = 0.5,
        channel_ratio: int = 4,
    ):
        super().__init__()
        self.num_groups = num_groups
        self.token_norm = LayerNorm(channels)
        self.token_mlp = Mlp(num_groups, mixer_token_hidden(num_groups, token_ratio), num_groups, rng)
        self.channel_norm = LayerNorm(channels)
        self.channel_mlp = Mlp(channels, channel_ratio * channels, channels, rng)

    def forward(self, y: Tensor) -> Tensor:
        if y.shape[-2] != self.num_groups:
            raise ShapeError(f"mixer built for {self.num_groups} groups, got features {y.shape}")
        mixed = swapaxes(self.token_mlp(swapaxes(self.token_norm(y), -1, -2)), -1, -2)
        y = add(y, mixed)
        return add(y, self.channel_mlp(self.channel_norm(y)))


class SelfAttnPropagation(Module):
    """One pre-norm self-attention + FFN layer over the M grouped features"""

    def __init__(self, num_groups: int, channels: int, num_heads: int, ffn_ratio: int, rng: np.random.Generator):
        super().__init__()
        self.num_groups = num_groups
        self.cfg = AttentionConfig(num_heads=num_heads, model_dim=channels)
        self.norm1 = LayerNorm(channels)
        self.qkv = Linear(channels, 3 * channels, rng)
        self.proj = Linear(channels, channels, rng)
        self.norm2 = LayerNorm(channels)
        self.mlp = Mlp(channels, ffn_ratio * channels, channels, rng)

    def forward(self, y: Tensor) -> Tensor:
        if y.shape[-2] != self.num_groups:
            raise ShapeError(f"self-attention core built for {self.num_groups} groups, got {y.shape}")
        channels = self.cfg.model_dim
        qkv = self.qkv(self.norm1(y))
        q, k, v = (qkv[..., i * channels:(i + 1) * channels] for i in range(3))
        y = add(y, multi_head_attention(q, k, v, self.cfg, proj=self.proj))
        return add(y, self.mlp(self.norm2(y)))


class NoPropagation(Module):
    """Identity; tokens are still grouped and ungrouped"""

    def forward(self, y: Tensor) -> Tensor:
        return y


# ---------------------------------------------------------------------------
# Block
# ---------------------------------------------------------------------------

class GPBlock(Module):
    """Group Propagation block with M group tokens

    Args:
        channels: Model width C
        num_groups: Group token count M
        rng: Initialisation generator
        propagation: "mixer" | "selfattn" | "none"
        grouping_heads: Heads of the grouping attention (C must be divisible)
        ungrouping_heads: Heads of the ungrouping attention (and the
            self-attention propagation core)
        ffn_ratio: Expansion of the ungrouping FFN (and the self-attention core)
        channel_ratio: Expansion of the mixer channel MLP
        token_ratio: Expansion of the token-mixing MLP (hidden = ceil(ratio*M))
    """

    def __init__(
        self,
        channels: int,
        num_groups: int,
        rng: np.random.Generator,
        propagation: PropagationKind = "mixer",
        grouping_heads: int = 6,
        ungrouping_heads: int = 6,
        ffn_ratio: int = 4,
        token_ratio: float = 0.5,
        channel_ratio: int = 4,
    ):
        super().__init__()
        if num_groups < 1:
            raise ConfigError(f"GP block needs at least one group token, got {num_groups}")
        self.num_groups = num_groups
        self.propagation_kind = propagation
        self.grouping_cfg = AttentionConfig(
            num_heads=grouping_heads, model_dim=channels, use_output_projection=False
        )
        self.ungrouping_cfg = AttentionConfig(
            num_heads=ungrouping_heads, model_dim=channels, use_output_projection=False
        )
        # -1 normalises over image tokens; the invariant harness flips it
        self.grouping_softmax_axis = -1

        self.group_tokens = Parameter(trunc_normal(rng, (num_groups, channels)))
        self.grouping_norm = LayerNorm(channels)
        self.grouping_key = Linear(channels, channels, rng)

        if propagation == "mixer":
            self.propagation = MixerPropagation(num_groups, channels, rng, token_ratio, channel_ratio)
        elif propagation == "selfattn":
            self.propagation = SelfAttnPropagation(num_groups, channels, ungrouping_heads, ffn_ratio, rng)
        elif propagation == "none":
            self.propagation = NoPropagation()
        else:
            raise ConfigError(f"Unknown propagation core: {propagation}")

        self.query_norm = LayerNorm(channels)
        self.group_norm = LayerNorm(channels)
        self.ungroup_q = Linear(channels, channels, rng)
        self.ungroup_k = Linear(channels, channels, rng)
        self.ungroup_v = Linear(channels, channels, rng)
        self.concat_proj = Linear(2 * channels, channels, rng)
        self.ffn_norm = LayerNorm(channels)
        self.ffn = Mlp(channels, ffn_ratio * channels, channels, rng)
        self.dwconv = DepthwiseConv2d(channels, rng, kernel_size=3, identity_init=True)

    def forward(self, x: TokenMap, return_assignment: bool = False):
        return gp_block_forward(x, self, return_assignment=return_assignment)


def feature_grouping(x: TokenMap, block: GPBlock) -> Tuple[Tensor, GroupAssignment]:
    """Y_h = Softmax(G_h (W^K_h X_h)^T / sqrt(d)) X_h, heads concatenated

    Returns:
        Grouped features (B, M, C) and the grouping weights
    """
    channels = block.grouping_cfg.model_dim
    if x.channels != channels:
        raise ShapeError(f"GP block width {channels} does not match tokens {x.tokens.shape}")
    normed = block.grouping_norm(x.tokens)
    keys = block.grouping_key(normed)
    queries = broadcast_to(
        reshape(block.group_tokens, (1, block.num_groups, channels)),
        (x.batch, block.num_groups, channels),
    )
    grouped, weights = multi_head_attention(
        queries, keys, normed, block.grouping_cfg,
        return_weights=True, softmax_axis=block.grouping_softmax_axis,
    )
    return grouped, GroupAssignment(weights, x.grid)


def group_propagation_mixer(y: Tensor, block: GPBlock) -> Tensor:
    if not isinstance(block.propagation, MixerPropagation):
        raise UsageError(f"block uses the {block.propagation_kind} core, not mixer")
    return block.propagation(y)


def group_propagation_selfattn(y: Tensor, block: GPBlock) -> Tensor:
    if not isinstance(block.propagation, SelfAttnPropagation):
        raise UsageError(f"block uses the {block.propagation_kind} core, not selfattn")
    return block.propagation(y)


def group_propagation_none(y: Tensor) -> Tensor:
    return y


def feature_ungrouping(x: TokenMap, y: Tensor, block: GPBlock) -> TokenMap:
    """Image tokens query the propagated groups; concat, project, FFN, DWConv

    U = Attention(W~Q LN(X), W~K LN(Y~), W~V LN(Y~))
    Z' = W_proj [U, X];  Z'' = Z' + FFN(Z');  Z = DWConv(Z'')

    Raises:
        UsageError: If x carries no grid
    """
    if not isinstance(x, TokenMap):
        raise UsageError("feature_ungrouping needs a TokenMap carrying its grid")
    if y.ndim != 3 or y.shape[0] != x.batch or y.shape[2] != x.channels:
        raise ShapeError(f"grouped features {y.shape} do not match tokens {x.tokens.shape}")

    queries = block.ungroup_q(block.query_norm(x.tokens))
    groups = block.group_norm(y)
    keys = block.ungroup_k(groups)
    values = block.ungroup_v(groups)
    ungrouped = multi_head_attention(queries, keys, values, block.ungrouping_cfg)

    z = block.concat_proj(concat([ungrouped, x.tokens], axis=-1))
    z = add(z, block.ffn(block.ffn_norm(z)))
    z = x.with_tokens(z)
    return TokenMap.from_grid(block.dwconv(z.to_grid()))


def gp_block_forward(x: TokenMap, block: GPBlock, return_assignment: bool = False):
    """Grouping -> propagation -> ungrouping; output has the input's shape"""
    grouped, assignment = feature_grouping(x, block)
    propagated = block.propagation(grouped)
    out = feature_ungrouping(x, propagated, block)
    if return_assignment:
        return out, assignment
    return out
