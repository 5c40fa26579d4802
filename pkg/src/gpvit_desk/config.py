"""Model configuration: validation, YAML loading and dumping

A config file is a flat YAML mapping of ModelConfig fields. It may name a
`preset:` to start from; every other key overrides that preset's value.

    preset: gpvit-l1
    num_classes: 10
    input_size: 64

Errors carry the file path, the 1-based line of the offending key and the
field name, e.g. `cfg.yaml:4: gp_positions: Value error, gp_positions[0] = 5 is
outside [0, depth=3)`.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from .errors import ConfigError

logger = logging.getLogger(__name__)

Family = Literal["gpvit", "vit-baseline"]
LocalAttention = Literal["lepe", "window", "global"]
Propagation = Literal["mixer", "selfattn", "none"]
BlockOverride = Literal["gp", "none", "conv", "global-attn", "win-shift", "local"]


class ModelConfig(BaseModel):
    """Complete architectural description of one network

    Layers are 0-indexed. Layers listed in gp_positions hold GP blocks (or the
    block named by block_override); every other layer is a local-attention
    encoder layer of kind `attention`.
    """
    model_config = ConfigDict(extra="forbid")

    name: str = "custom"
    family: Family = "gpvit"
    patch_size: int = 8
    channels: int = 216
    depth: int = 12
    attention: LocalAttention = "lepe"
    num_heads: int = 12
    ffn_ratio: int = 4
    window_size: int = 7
    strip_size: int = 2
    gp_positions: List[int] = [1, 4, 7, 10]
    gp_group_counts: List[int] = [64, 32, 32, 16]
    propagation: Propagation = "mixer"
    block_override: BlockOverride = "gp"
    grouping_heads: int = 6
    ungrouping_heads: int = 6
    mixer_token_ratio: float = 0.5
    mixer_channel_ratio: int = 4
    drop_path: float = 0.0
    num_classes: int = 1000
    input_size: int = 224
    stem_projection: bool = True

    @field_validator("patch_size")
    @classmethod
    def validate_patch_size(cls, v: int) -> int:
        if v not in (8, 16):
            raise ValueError(f"patch_size must be 8 or 16, got {v}")
        return v

    @field_validator(
        "channels", "num_heads", "ffn_ratio", "window_size", "strip_size",
        "grouping_heads", "ungrouping_heads", "mixer_channel_ratio", "num_classes",
    )
    @classmethod
    def validate_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"must be positive, got {v}")
        return v

    @field_validator("depth")
    @classmethod
    def validate_depth(cls, v: int) -> int:
        if v < 0:
            raise ValueError(f"depth must be >= 0, got {v}")
        return v

    @field_validator("drop_path")
    @classmethod
    def validate_drop_path(cls, v: float) -> float:
        if not 0.0 <= v < 1.0:
            raise ValueError(f"drop_path must be in [0, 1), got {v}")
        return v

    @field_validator("mixer_token_ratio")
    @classmethod
    def validate_token_ratio(cls, v: float) -> float:
        if v <= 0:
            raise ValueError(f"mixer_token_ratio must be positive, got {v}")
        return v

    @field_validator("gp_group_counts")
    @classmethod
    def validate_group_counts(cls, v: List[int]) -> List[int]:
        bad = [i for i, m in enumerate(v) if m < 1]
        if bad:
            raise ValueError(f"group counts must be >= 1 (offending index {bad[0]})")
        return v

    @model_validator(mode="after")
    def validate_schedule(self) -> "ModelConfig":
        if len(self.gp_positions) != len(self.gp_group_counts):
            raise ValueError(
                f"gp_positions has {len(self.gp_positions)} entries but "
                f"gp_group_counts has {len(self.gp_group_counts)}"
            )
        for i, position in enumerate(self.gp_positions):
            if not 0 <= position < self.depth:
                raise ValueError(
                    f"gp_positions[{i}] = {position} is outside [0, depth={self.depth})"
                )
            if i and position <= self.gp_positions[i - 1]:
                raise ValueError(f"gp_positions must be strictly increasing (offending index {i})")
        if self.family == "vit-baseline" and self.gp_positions:
            raise ValueError("vit-baseline models have no GP positions")

        if self.channels % self.num_heads:
            raise ValueError(f"channels {self.channels} not divisible by num_heads {self.num_heads}")
        if self.attention == "lepe" and self.num_heads % 2:
            raise ValueError(f"lepe attention needs an even num_heads, got {self.num_heads}")
        if self.gp_positions and self.block_override == "gp":
            for field in ("grouping_heads", "ungrouping_heads"):
                heads = getattr(self, field)
                if self.channels % heads:
                    raise ValueError(f"channels {self.channels} not divisible by {field} {heads}")
        if self.input_size < 1 or self.input_size % self.patch_size:
            raise ValueError(
                f"input_size {self.input_size} must be a positive multiple of patch_size {self.patch_size}"
            )
        return self

    @property
    def grid(self) -> int:
        """Tokens per side at the configured input size"""
        return self.input_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    def layer_kinds(self) -> List[str]:
        """Kind of every layer, e.g. ["lepe", "gp", "lepe", ...]"""
        kinds = [self.attention] * self.depth
        for position in self.gp_positions:
            kinds[position] = self.block_override
        return kinds

    def group_count_at(self, layer: int) -> Optional[int]:
        if layer in self.gp_positions:
            return self.gp_group_counts[self.gp_positions.index(layer)]
        return None

    def drop_path_rates(self) -> List[float]:
        """Stochastic depth rate per layer, linear from 0 to drop_path"""
        if self.depth <= 1:
            return [0.0] * self.depth
        return [self.drop_path * i / (self.depth - 1) for i in range(self.depth)]


def config_digest(cfg: ModelConfig) -> bytes:
    """SHA-256 over the canonical JSON form of the config"""
    payload = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).digest()


def _key_lines(text: str) -> Dict[str, int]:
    """1-based line of every top-level key in a YAML mapping document"""
    node = yaml.compose(text)
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {key.value: key.start_mark.line + 1 for key, _ in node.value}


def _format_validation_error(err: ValidationError, source: str, lines: Dict[str, int]) -> str:
    messages = []
    for item in err.errors():
        field = str(item["loc"][0]) if item["loc"] else ""
        if not field:
            # cross-field checks: attribute to the key the message names first
            named = [key for key in lines if key in item["msg"]]
            field = min(named, key=item["msg"].index) if named else ""
        line = lines.get(field)
        where = f"{source}:{line}" if line else source
        label = field or "config"
        messages.append(f"{where}: {label}: {item['msg']}")
    return "; ".join(messages)


def parse_config(text: str, source: str = "<string>") -> ModelConfig:
    """Parse YAML text into a validated ModelConfig

    Raises:
        ConfigError: On YAML syntax errors, unknown presets, unknown keys or
            invalid values (message names file, line and field)
    """
    from .presets import get_preset

    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError(f"{where}: invalid YAML: {e}") from e

    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: config must be a key/value mapping")

    lines = _key_lines(text) if raw else {}
    values: Dict[str, Any] = {}
    preset = raw.pop("preset", None)
    if preset is not None:
        try:
            values = get_preset(str(preset)).model_dump()
        except ConfigError as e:
            raise ConfigError(f"{source}:{lines.get('preset', '?')}: preset: {e}") from e
    values.update(raw)

    try:
        cfg = ModelConfig(**values)
    except ValidationError as e:
        raise ConfigError(_format_validation_error(e, source, lines)) from e

    logger.debug(f"Parsed config {cfg.name} from {source}")
    return cfg


def load_config(config_path: Path) -> ModelConfig:
    """Load a ModelConfig from a YAML file

    Raises:
        OSError: If the file cannot be read (message includes the path)
        ConfigError: If the contents are invalid
    """
    path = Path(config_path)
    try:
        text = path.read_text()
    except OSError as e:
        raise OSError(f"Cannot read config {path}: {e.strerror or e}") from e
    cfg = parse_config(text, source=str(path))
    logger.info(f"Loaded config {cfg.name} from {path}")
    return cfg


def dump_config(cfg: ModelConfig) -> str:
    """Serialise a config to YAML (loadable with parse_config)"""
    return yaml.dump(cfg.model_dump(mode="json"), default_flow_style=None, sort_keys=False)


def save_config(cfg: ModelConfig, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))
