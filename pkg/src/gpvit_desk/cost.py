"""Analytic parameter and FLOP model

Counts are derived from ModelConfig alone, without building tensors, and must
agree exactly with the parameter tally of the built model.

Counting convention ("mac"): one multiply-accumulate is one reported FLOP.
Linear layers cost T*in*out, the two attention products 2*Nq*Nk*C, a full
convolution Ho*Wo*k*k*Cin*Cout and a depthwise one H*W*k*k*C. LayerNorm,
softmax, GELU and elementwise ops cost nothing. Window kernels count the
padded tokens.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from .config import ModelConfig
from .errors import ConfigError
from .gp_block import mixer_token_hidden
from .model import LOCAL_KERNELS, stem_channels

logger = logging.getLogger(__name__)

CONVENTION = "mac"
SCALING_KINDS = ("self-attn", "window", "lepe", "gp")


def _ceil_to(extent: int, multiple: int) -> int:
    return -(-extent // multiple) * multiple


# ---------------------------------------------------------------------------
# Per-component counts
# ---------------------------------------------------------------------------

def _linear_params(fan_in: int, fan_out: int) -> int:
    return fan_in * fan_out + fan_out


def _mlp_params(outer: int, hidden: int) -> int:
    return _linear_params(outer, hidden) + _linear_params(hidden, outer)


def stem_params(cfg: ModelConfig) -> int:
    """Strided convs (no bias) + their norms + optional projection + positional embedding"""
    total = 0
    in_channels = 3
    for out_channels in stem_channels(cfg):
        total += 9 * in_channels * out_channels + 2 * out_channels
        in_channels = out_channels
    if cfg.stem_projection:
        total += _linear_params(in_channels, cfg.channels)
    return total + cfg.num_tokens * cfg.channels


def stem_flops(cfg: ModelConfig, input_size: int) -> int:
    total = 0
    size = input_size
    in_channels = 3
    for out_channels in stem_channels(cfg):
        size //= 2
        total += size * size * 9 * in_channels * out_channels
        in_channels = out_channels
    if cfg.stem_projection:
        total += size * size * in_channels * cfg.channels
    return total


def attention_layer_params(channels: int, kind: str, ffn_ratio: int) -> int:
    """Pre-norm encoder layer with the given attention kernel"""
    total = 4 * channels
    total += _linear_params(channels, 3 * channels) + _linear_params(channels, channels)
    total += _mlp_params(channels, ffn_ratio * channels)
    if kind == "strip-pair":
        total += 10 * channels
    return total


def attention_mixing_flops(
    channels: int,
    kind: str,
    grid: Tuple[int, int],
    num_tokens: Optional[int] = None,
    window: int = 7,
    strip: int = 2,
) -> int:
    """Token-mixing part of an encoder layer: qkv, attention products, projection"""
    height, width = grid
    tokens = height * width if num_tokens is None else num_tokens
    if tokens == 0:
        return 0
    c = channels
    if kind == "full":
        return 4 * tokens * c * c + 2 * tokens * tokens * c
    if kind in ("window", "shifted-window"):
        padded = _ceil_to(height, window) * _ceil_to(width, window)
        return 4 * padded * c * c + 2 * padded * window * window * c
    if kind == "strip-pair":
        total = 4 * tokens * c * c
        half = c // 2
        for rh, rw in ((min(strip, height), width), (height, min(strip, width))):
            padded = _ceil_to(height, rh) * _ceil_to(width, rw)
            total += 2 * padded * rh * rw * half + 9 * padded * half
        return total
    raise ConfigError(f"Unknown attention kernel: {kind}")


def ffn_flops(channels: int, num_tokens: int, ffn_ratio: int) -> int:
    return 2 * num_tokens * ffn_ratio * channels * channels


def gp_block_params(
    channels: int,
    num_groups: int,
    propagation: str = "mixer",
    ffn_ratio: int = 4,
    token_ratio: float = 0.5,
    channel_ratio: int = 4,
) -> int:
    c, m = channels, num_groups
    grouping = m * c + 2 * c + _linear_params(c, c)
    if propagation == "mixer":
        hidden = mixer_token_hidden(m, token_ratio)
        core = 4 * c + _mlp_params(m, hidden) + _mlp_params(c, channel_ratio * c)
    elif propagation == "selfattn":
        core = attention_layer_params(c, "full", ffn_ratio)
    elif propagation == "none":
        core = 0
    else:
        raise ConfigError(f"Unknown propagation core: {propagation}")
    ungrouping = 4 * c + 3 * _linear_params(c, c) + _linear_params(2 * c, c)
    ungrouping += 2 * c + _mlp_params(c, ffn_ratio * c) + 10 * c
    return grouping + core + ungrouping


def gp_block_flops(
    channels: int,
    num_groups: int,
    num_tokens: int,
    propagation: str = "mixer",
    ffn_ratio: int = 4,
    token_ratio: float = 0.5,
    channel_ratio: int = 4,
    include_ffn: bool = True,
) -> int:
    """GP block cost; every N-dependent term is linear in N"""
    c, m, n = channels, num_groups, num_tokens
    if n == 0:
        return 0
    grouping = n * c * c + 2 * m * n * c
    if propagation == "mixer":
        hidden = mixer_token_hidden(m, token_ratio)
        core = 2 * c * m * hidden + 2 * m * channel_ratio * c * c
    elif propagation == "selfattn":
        core = attention_mixing_flops(c, "full", (1, m)) + ffn_flops(c, m, ffn_ratio)
    else:
        core = 0
    ungrouping = n * c * c + 2 * m * c * c + 2 * n * m * c + 2 * n * c * c + 9 * n * c
    if include_ffn:
        ungrouping += ffn_flops(c, n, ffn_ratio)
    return grouping + core + ungrouping


def conv_block_params(channels: int) -> int:
    return 2 * channels + 2 * (9 * channels * channels + channels)


def conv_block_flops(channels: int, num_tokens: int) -> int:
    return 2 * num_tokens * 9 * channels * channels


def head_params(cfg: ModelConfig) -> int:
    return 2 * cfg.channels + _linear_params(cfg.channels, cfg.num_classes)


def head_flops(cfg: ModelConfig) -> int:
    return cfg.channels * cfg.num_classes


# ---------------------------------------------------------------------------
# Per-layer resolution
# ---------------------------------------------------------------------------

def _layer_kernel(cfg: ModelConfig, kind: str) -> Optional[str]:
    """Attention kernel of an encoder-style layer kind, None otherwise"""
    if kind in LOCAL_KERNELS:
        return LOCAL_KERNELS[kind]
    return {
        "global-attn": "full",
        "win-shift": "shifted-window",
        "local": LOCAL_KERNELS[cfg.attention],
    }.get(kind)


def layer_params(cfg: ModelConfig, index: int) -> int:
    kind = cfg.layer_kinds()[index]
    kernel = _layer_kernel(cfg, kind)
    if kernel is not None:
        return attention_layer_params(cfg.channels, kernel, cfg.ffn_ratio)
    if kind == "gp":
        return gp_block_params(
            cfg.channels, cfg.group_count_at(index), cfg.propagation,
            cfg.ffn_ratio, cfg.mixer_token_ratio, cfg.mixer_channel_ratio,
        )
    if kind == "conv":
        return conv_block_params(cfg.channels)
    return 0


def layer_flops(cfg: ModelConfig, index: int, grid: Tuple[int, int]) -> int:
    kind = cfg.layer_kinds()[index]
    tokens = grid[0] * grid[1]
    kernel = _layer_kernel(cfg, kind)
    if kernel is not None:
        mixing = attention_mixing_flops(
            cfg.channels, kernel, grid, window=cfg.window_size, strip=cfg.strip_size
        )
        return mixing + ffn_flops(cfg.channels, tokens, cfg.ffn_ratio)
    if kind == "gp":
        return gp_block_flops(
            cfg.channels, cfg.group_count_at(index), tokens, cfg.propagation,
            cfg.ffn_ratio, cfg.mixer_token_ratio, cfg.mixer_channel_ratio,
        )
    if kind == "conv":
        return conv_block_flops(cfg.channels, tokens)
    return 0


def _checked_grid(cfg: ModelConfig, input_size: int) -> Tuple[int, int]:
    if input_size < 1 or input_size % cfg.patch_size:
        raise ConfigError(
            f"input size {input_size} must be a positive multiple of patch size {cfg.patch_size}"
        )
    side = input_size // cfg.patch_size
    return side, side


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class CostEntry:
    """One row of a cost report"""
    layer: str
    kind: str
    params: int
    flops: int


@dataclass
class CostReport:
    """Per-layer and total parameter/FLOP breakdown

    Entries are stem, one per encoder layer, then head; totals are their sums.
    """
    model: str
    input_size: int
    entries: List[CostEntry] = field(default_factory=list)
    convention: str = CONVENTION

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def total_flops(self) -> int:
        return sum(e.flops for e in self.entries)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [asdict(e) for e in self.entries], columns=["layer", "kind", "params", "flops"]
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model,
            "input_size": self.input_size,
            "convention": self.convention,
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "entries": [asdict(e) for e in self.entries],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CostReport":
        data = json.loads(text)
        return cls(
            model=data["model"],
            input_size=data["input_size"],
            convention=data.get("convention", CONVENTION),
            entries=[CostEntry(**e) for e in data["entries"]],
        )

    def write(self, out_dir: Path, stem: str = "cost_report") -> List[Path]:
        """Write `<stem>.json` and `<stem>.csv` into out_dir

        Raises:
            OSError: If a file cannot be written (message includes the path)
        """
        out_dir = Path(out_dir)
        json_path = out_dir / f"{stem}.json"
        csv_path = out_dir / f"{stem}.csv"
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            json_path.write_text(self.to_json())
            self.to_frame().to_csv(csv_path, index=False)
        except OSError as e:
            raise OSError(f"Cannot write cost report to {out_dir}: {e.strerror or e}") from e
        logger.info(f"Wrote cost report to {json_path} and {csv_path}")
        return [json_path, csv_path]


def count_params(cfg: ModelConfig) -> int:
    """Exact parameter count of build_model(cfg)"""
    total = stem_params(cfg) + head_params(cfg)
    return total + sum(layer_params(cfg, i) for i in range(cfg.depth))


def count_flops(cfg: ModelConfig, input_size: Optional[int] = None) -> int:
    """Multiply-accumulates for one image of input_size x input_size"""
    return emit_report(cfg, input_size).total_flops


def emit_report(cfg: ModelConfig, input_size: Optional[int] = None) -> CostReport:
    """Per-layer breakdown at the given (default: configured) input size"""
    size = cfg.input_size if input_size is None else input_size
    grid = _checked_grid(cfg, size)
    kinds = cfg.layer_kinds()

    report = CostReport(model=cfg.name, input_size=size)
    report.entries.append(CostEntry("stem", "stem", stem_params(cfg), stem_flops(cfg, size)))
    for index, kind in enumerate(kinds):
        report.entries.append(
            CostEntry(str(index), kind, layer_params(cfg, index), layer_flops(cfg, index, grid))
        )
    report.entries.append(CostEntry("head", "head", head_params(cfg), head_flops(cfg)))
    logger.debug(f"{cfg.name}@{size}: {report.total_params:,} params, {report.total_flops:,} MACs")
    return report


# ---------------------------------------------------------------------------
# Scaling curves
# ---------------------------------------------------------------------------

def _squareish_grid(num_tokens: int) -> Tuple[int, int]:
    width = math.ceil(math.sqrt(num_tokens))
    return -(-num_tokens // width), width


def block_flops(
    kind: str,
    channels: int,
    num_tokens: int,
    num_groups: int = 64,
    include_ffn: bool = False,
    window: int = 7,
    strip: int = 2,
    ffn_ratio: int = 4,
) -> int:
    """FLOPs of one block of the given kind at N tokens

    Args:
        kind: "self-attn" | "window" | "lepe" | "gp"
        include_ffn: Count the FFN as well. Without it attention kinds count
            only their token-mixing part and the GP block drops its
            ungrouping FFN.
    """
    if num_tokens < 0:
        raise ConfigError(f"token count must be >= 0, got {num_tokens}")
    if num_tokens == 0:
        return 0
    if kind == "gp":
        return gp_block_flops(channels, num_groups, num_tokens, ffn_ratio=ffn_ratio, include_ffn=include_ffn)
    kernel = {"self-attn": "full", "window": "window", "lepe": "strip-pair"}.get(kind)
    if kernel is None:
        raise ConfigError(f"Unknown block kind {kind}; expected one of {SCALING_KINDS}")
    grid = _squareish_grid(num_tokens)
    mixing = attention_mixing_flops(
        channels, kernel, grid, num_tokens=num_tokens, window=window, strip=strip
    )
    if include_ffn:
        mixing += ffn_flops(channels, num_tokens, ffn_ratio)
    return mixing


def scaling_series(
    kind: str,
    channels: int,
    token_counts: Sequence[int],
    num_groups: int = 64,
    include_ffn: bool = False,
) -> List[int]:
    """Per-block FLOPs at each token count"""
    return [block_flops(kind, channels, n, num_groups, include_ffn) for n in token_counts]


def scaling_series_channels(
    kind: str,
    channel_counts: Sequence[int],
    num_tokens: int,
    num_groups: int = 64,
    include_ffn: bool = False,
) -> List[int]:
    """Per-block FLOPs at each channel width for a fixed token count"""
    return [block_flops(kind, c, num_tokens, num_groups, include_ffn) for c in channel_counts]


def scaling_table(
    channels: int,
    token_counts: Sequence[int],
    group_counts: Sequence[int] = (16, 32, 64),
    include_ffn: bool = False,
) -> pd.DataFrame:
    """Token count vs per-block FLOPs for every kind, one column per kind"""
    columns: Dict[str, List[int]] = {"tokens": list(token_counts)}
    for kind in ("self-attn", "window", "lepe"):
        columns[kind] = scaling_series(kind, channels, token_counts, include_ffn=include_ffn)
    for m in group_counts:
        columns[f"gp-{m}"] = scaling_series("gp", channels, token_counts, m, include_ffn)
    return pd.DataFrame(columns)
