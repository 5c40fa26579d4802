"""Shipped model configurations

Every published variant, baseline and ablation row has a preset:

- gpvit-l1 .. gpvit-l4: the four GPViT widths
- vit-d{216,348,432,624}-p{8,16}: plain global-attention baselines
- l1-{win,lepe}-local: all-local step rows (local attention in every layer)
- l1-{win,lepe}-{none,conv,global-attn,gp} and l1-win-win-shift: blocks that
  exchange global information, placed where the GP blocks sit
- l1-groups-A-B-C-D: group-count combinations
- l1-prop-{none,selfattn,mixer}: propagation cores
- tiny-*: desk-sized configs used by tests and the harness
"""

import logging
from typing import Callable, Dict, List

from .config import ModelConfig
from .errors import ConfigError

logger = logging.getLogger(__name__)

GPVIT_WIDTHS = {"gpvit-l1": 216, "gpvit-l2": 348, "gpvit-l3": 432, "gpvit-l4": 624}
GPVIT_DROP_PATH = {"gpvit-l1": 0.2, "gpvit-l2": 0.2, "gpvit-l3": 0.3, "gpvit-l4": 0.3}
BASELINE_WIDTHS = (216, 348, 432, 624)

LOCAL_KINDS = {"win": "window", "lepe": "lepe"}
EXCHANGE_BLOCKS = ("none", "conv", "global-attn", "gp")
GROUP_COMBINATIONS = (
    (16, 16, 16, 16),
    (32, 32, 32, 32),
    (64, 64, 64, 64),
    (16, 32, 32, 64),
    (64, 32, 32, 16),
)
PROPAGATION_CORES = ("none", "selfattn", "mixer")


def _gpvit(name: str) -> ModelConfig:
    return ModelConfig(
        name=name,
        channels=GPVIT_WIDTHS[name],
        drop_path=GPVIT_DROP_PATH[name],
    )


def _baseline(channels: int, patch: int) -> ModelConfig:
    # stem without the 1x1 projection
    return ModelConfig(
        name=f"vit-d{channels}-p{patch}",
        family="vit-baseline",
        patch_size=patch,
        channels=channels,
        attention="global",
        gp_positions=[],
        gp_group_counts=[],
        stem_projection=False,
    )


def _l1_variant(name: str, **overrides) -> ModelConfig:
    values = _gpvit("gpvit-l1").model_dump()
    values.update(name=name, **overrides)
    return ModelConfig(**values)


def _build_registry() -> Dict[str, Callable[[], ModelConfig]]:
    registry: Dict[str, Callable[[], ModelConfig]] = {}

    for name in GPVIT_WIDTHS:
        registry[name] = lambda name=name: _gpvit(name)

    for channels in BASELINE_WIDTHS:
        for patch in (8, 16):
            registry[f"vit-d{channels}-p{patch}"] = (
                lambda channels=channels, patch=patch: _baseline(channels, patch)
            )

    for short, kind in LOCAL_KINDS.items():
        blocks = EXCHANGE_BLOCKS + (("win-shift",) if short == "win" else ())
        for block in blocks + ("local",):
            name = f"l1-{short}-{block}"
            registry[name] = lambda name=name, kind=kind, block=block: _l1_variant(
                name, attention=kind, block_override=block
            )

    for combo in GROUP_COMBINATIONS:
        name = "l1-groups-" + "-".join(str(m) for m in combo)
        registry[name] = lambda name=name, combo=combo: _l1_variant(name, gp_group_counts=list(combo))

    for core in PROPAGATION_CORES:
        name = f"l1-prop-{core}"
        registry[name] = lambda name=name, core=core: _l1_variant(name, propagation=core)

    registry["tiny-gradcheck"] = lambda: ModelConfig(
        name="tiny-gradcheck",
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
    registry["tiny-forward"] = lambda: ModelConfig(
        name="tiny-forward",
        channels=32,
        depth=4,
        num_heads=4,
        gp_positions=[1],
        gp_group_counts=[8],
        grouping_heads=4,
        ungrouping_heads=4,
        num_classes=8,
        input_size=32,
    )
    registry["tiny-train"] = lambda: ModelConfig(
        name="tiny-train",
        channels=32,
        depth=4,
        num_heads=4,
        gp_positions=[1, 3],
        gp_group_counts=[8, 4],
        grouping_heads=4,
        ungrouping_heads=4,
        num_classes=8,
        input_size=32,
    )
    registry["tiny-invariants"] = lambda: ModelConfig(
        name="tiny-invariants",
        channels=24,
        depth=2,
        num_heads=4,
        gp_positions=[1],
        gp_group_counts=[5],
        num_classes=4,
        input_size=48,
    )
    return registry


_REGISTRY = _build_registry()


def list_presets() -> List[str]:
    """All preset names in registration order"""
    return list(_REGISTRY)


def get_preset(name: str) -> ModelConfig:
    """Build the named preset (case-insensitive)

    Raises:
        ConfigError: If no preset has that name
    """
    key = name.lower()
    if key not in _REGISTRY:
        raise ConfigError(f"Unknown preset: {name}. Run `gpvit-desk presets` for the list")
    return _REGISTRY[key]()


def ablation_presets() -> List[str]:
    """Presets standing for ablation rows (everything under the l1- prefix)"""
    return [name for name in _REGISTRY if name.startswith("l1-")]
