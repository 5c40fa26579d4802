"""Shared builders for gpvit-desk tests"""

from typing import Tuple

import numpy as np

from gpvit_desk.attention import Attention
from gpvit_desk.config import ModelConfig
from gpvit_desk.gp_block import GPBlock
from gpvit_desk.layers import TokenMap
from gpvit_desk.tensor import Tensor, make_rng


def sample_token_map(
    grid: Tuple[int, int] = (4, 4),
    channels: int = 8,
    batch: int = 1,
    seed: int = 0,
) -> TokenMap:
    """Standard-normal token map of the given grid and width"""
    rng = np.random.default_rng(seed)
    values = rng.normal(0.0, 1.0, size=(batch, grid[0] * grid[1], channels))
    return TokenMap(Tensor(values), grid)


def sample_gp_block(
    channels: int = 8,
    num_groups: int = 4,
    propagation: str = "mixer",
    heads: int = 2,
    seed: int = 0,
) -> GPBlock:
    """Small GP block with matching grouping/ungrouping head counts"""
    return GPBlock(
        channels,
        num_groups,
        make_rng(seed),
        propagation=propagation,
        grouping_heads=heads,
        ungrouping_heads=heads,
    )


def sample_attention(kind: str, size: int = 2, channels: int = 8, heads: int = 2, seed: int = 0) -> Attention:
    return Attention(channels, heads, kind, size, make_rng(seed))


def sample_tiny_config(**overrides) -> ModelConfig:
    """Minimal GPViT: C 12, depth 2, one GP block of 4 groups, 32x32 inputs"""
    values = dict(
        name="tiny-test",
        channels=12,
        depth=2,
        num_heads=2,
        gp_positions=[1],
        gp_group_counts=[4],
        grouping_heads=2,
        ungrouping_heads=2,
        num_classes=4,
        input_size=32,
    )
    values.update(overrides)
    return ModelConfig(**values)


def sample_minimal_config() -> ModelConfig:
    """Smallest buildable model: one global-attention layer, C 6, one head"""
    return ModelConfig(
        name="minimal",
        channels=6,
        depth=1,
        num_heads=1,
        attention="global",
        gp_positions=[],
        gp_group_counts=[],
        num_classes=2,
        input_size=16,
    )


def sample_image(size: int = 32, seed: int = 0) -> np.ndarray:
    """Random (size, size, 3) image in [0, 1]"""
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(size, size, 3))


def sample_config_yaml() -> str:
    return (
        "name: yaml-tiny\n"
        "channels: 16\n"
        "depth: 3\n"
        "num_heads: 2\n"
        "gp_positions: [1]\n"
        "gp_group_counts: [4]\n"
        "grouping_heads: 2\n"
        "ungrouping_heads: 2\n"
        "num_classes: 3\n"
        "input_size: 32\n"
    )
