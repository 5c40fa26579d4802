"""Full networks: conv stem, positional embedding, layer schedule, head

The layer schedule comes from ModelConfig.layer_kinds(): local-attention
encoder layers everywhere except the GP positions, which hold GP blocks or
the ablation block named by block_override. Token count is constant across
all layers.
"""

import logging
from typing import List, Optional, Tuple, Union

import numpy as np

from .attention import EncoderLayer
from .config import ModelConfig
from .errors import ConfigError, ShapeError
from .gp_block import GPBlock, GroupAssignment
from .layers import Conv2d, LayerNorm, Linear, Module, TokenMap
from .tensor import (
    Parameter,
    Tensor,
    add,
    broadcast_to,
    gelu,
    make_rng,
    matmul,
    mean,
    reshape,
    transpose,
    trunc_normal,
)

logger = logging.getLogger(__name__)

# encoder attention kind -> attention kernel
LOCAL_KERNELS = {"lepe": "strip-pair", "window": "window", "global": "full"}

BICUBIC_A = -0.75
MIN_STEM_WIDTH = 4


def stem_channels(cfg: ModelConfig) -> List[int]:
    """Output channels of the strided convs: C/4, C/2, C (P16 repeats C/4)

    Widths are floored at MIN_STEM_WIDTH: a LayerNorm over one or two
    channels outputs a constant or a sign, which erases the image.
    """
    quarter = max(MIN_STEM_WIDTH, cfg.channels // 4)
    half = max(MIN_STEM_WIDTH, cfg.channels // 2)
    if cfg.patch_size == 16:
        return [quarter, quarter, half, cfg.channels]
    return [quarter, half, cfg.channels]


class ConvStem(Module):
    """Stride-2 3x3 convs (no bias) each followed by LayerNorm and GELU,
    optionally a 1x1 projection; downsamples by the patch size"""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.convs = []
        self.norms = []
        in_channels = 3
        for out_channels in stem_channels(cfg):
            self.convs.append(Conv2d(in_channels, out_channels, 3, rng, stride=2, padding=1, bias=False))
            self.norms.append(LayerNorm(out_channels))
            in_channels = out_channels
        self.proj = Conv2d(in_channels, cfg.channels, 1, rng) if cfg.stem_projection else None

    def forward(self, images: Tensor) -> TokenMap:
        height, width = images.shape[1], images.shape[2]
        if images.shape[-1] != 3:
            raise ShapeError(f"stem expects (B, H, W, 3) images, got {images.shape}")
        if height % self.patch_size or width % self.patch_size or height == 0 or width == 0:
            raise ConfigError(
                f"image {height}x{width} is not divisible by patch size {self.patch_size}"
            )
        x = images
        for conv, norm in zip(self.convs, self.norms):
            x = gelu(norm(conv(x)))
        if self.proj is not None:
            x = self.proj(x)
        return TokenMap.from_grid(x)


class IdentityLayer(Module):
    """Placeholder for a removed block"""

    def forward(self, x: TokenMap) -> TokenMap:
        return x


class ConvPropagationBlock(Module):
    """x + Conv3x3(GELU(Conv3x3(LN(x)))), full (not depthwise) convolutions"""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.norm = LayerNorm(channels)
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1)

    def forward(self, x: TokenMap) -> TokenMap:
        normed = x.with_tokens(self.norm(x.tokens)).to_grid()
        branch = TokenMap.from_grid(self.conv2(gelu(self.conv1(normed))))
        return x.with_tokens(add(x.tokens, branch.tokens))


def _local_layer(cfg: ModelConfig, kind: str, rng: np.random.Generator, drop_path: float) -> EncoderLayer:
    size = {"strip-pair": cfg.strip_size, "window": cfg.window_size, "shifted-window": cfg.window_size}
    return EncoderLayer(
        cfg.channels, cfg.num_heads, kind, size.get(kind, 0), cfg.ffn_ratio, rng, drop_path
    )


def build_ablation_block(
    kind: str,
    cfg: ModelConfig,
    rng: np.random.Generator,
    num_groups: Optional[int] = None,
    drop_path: float = 0.0,
) -> Module:
    """Block placed at a GP position

    Args:
        kind: "gp" | "none" | "conv" | "global-attn" | "win-shift" | "local"
        cfg: Model configuration (width, heads, sizes)
        rng: Initialisation generator
        num_groups: Group count, required for "gp"
        drop_path: Stochastic depth rate for attention layers

    Raises:
        ConfigError: If kind is unknown or "gp" has no group count
    """
    if kind == "gp":
        if num_groups is None:
            raise ConfigError("a GP block needs a group count")
        return GPBlock(
            cfg.channels,
            num_groups,
            rng,
            propagation=cfg.propagation,
            grouping_heads=cfg.grouping_heads,
            ungrouping_heads=cfg.ungrouping_heads,
            ffn_ratio=cfg.ffn_ratio,
            token_ratio=cfg.mixer_token_ratio,
            channel_ratio=cfg.mixer_channel_ratio,
        )
    if kind == "none":
        return IdentityLayer()
    if kind == "conv":
        return ConvPropagationBlock(cfg.channels, rng)
    if kind == "global-attn":
        return _local_layer(cfg, "full", rng, drop_path)
    if kind == "win-shift":
        return _local_layer(cfg, "shifted-window", rng, drop_path)
    if kind == "local":
        return _local_layer(cfg, LOCAL_KERNELS[cfg.attention], rng, drop_path)
    raise ConfigError(f"Unknown block kind: {kind}")


# ---------------------------------------------------------------------------
# Positional embedding resampling
# ---------------------------------------------------------------------------

def _cubic(distance: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    d = np.abs(distance)
    near = ((a + 2) * d - (a + 3)) * d * d + 1
    far = ((a * d - 5 * a) * d + 8 * a) * d - 4 * a
    return np.where(d <= 1, near, np.where(d < 2, far, 0.0))


def bicubic_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) matrix resampling a length-src signal to dst samples

    Half-pixel centres, border samples replicated. Identity when src == dst.
    """
    if src == dst:
        return np.eye(src)
    matrix = np.zeros((dst, src))
    for i in range(dst):
        x = (i + 0.5) * src / dst - 0.5
        base = int(np.floor(x))
        for tap in range(base - 1, base + 3):
            matrix[i, min(max(tap, 0), src - 1)] += _cubic(np.array(x - tap))
    return matrix


def resample_pos_embed(pos: Tensor, src: Tuple[int, int], dst: Tuple[int, int]) -> Tensor:
    """Bicubically resample an (Hs*Ws, C) embedding to (Hd*Wd, C), differentiably"""
    if tuple(src) == tuple(dst):
        return pos
    channels = pos.shape[-1]
    rows = bicubic_matrix(src[0], dst[0])
    cols = bicubic_matrix(src[1], dst[1]).T
    grid = transpose(reshape(pos, (src[0], src[1], channels)), (2, 0, 1))
    grid = matmul(Tensor(np.broadcast_to(rows, (channels, *rows.shape))), grid)
    grid = matmul(grid, Tensor(np.broadcast_to(cols, (channels, *cols.shape))))
    return reshape(transpose(grid, (1, 2, 0)), (dst[0] * dst[1], channels))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class Model(Module):
    """Stem + positional embedding + layer schedule + average-pool head"""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.grid = (cfg.grid, cfg.grid)
        self.stem = ConvStem(cfg, rng)
        self.pos_embed = Parameter(trunc_normal(rng, (cfg.num_tokens, cfg.channels)))

        rates = cfg.drop_path_rates()
        self.layers = []
        for index, kind in enumerate(cfg.layer_kinds()):
            if index in cfg.gp_positions:
                layer = build_ablation_block(kind, cfg, rng, cfg.group_count_at(index), rates[index])
            else:
                layer = _local_layer(cfg, LOCAL_KERNELS[kind], rng, rates[index])
            self.layers.append(layer)

        self.head_norm = LayerNorm(cfg.channels)
        self.head = Linear(cfg.channels, cfg.num_classes, rng)

    @property
    def gp_blocks(self) -> List[Tuple[int, GPBlock]]:
        return [(i, layer) for i, layer in enumerate(self.layers) if isinstance(layer, GPBlock)]

    def embed(self, images: Tensor) -> TokenMap:
        """Stem followed by the positional embedding (resampled if needed)"""
        x = self.stem(images)
        pos = resample_pos_embed(self.pos_embed, self.grid, x.grid)
        pos = broadcast_to(reshape(pos, (1, *pos.shape)), x.tokens.shape)
        return x.with_tokens(add(x.tokens, pos))

    def forward_features(self, images: Tensor, collect_assignments: bool = False):
        x = self.embed(images)
        assignments: List[Tuple[int, GroupAssignment]] = []
        for index, layer in enumerate(self.layers):
            if collect_assignments and isinstance(layer, GPBlock):
                x, assignment = layer(x, return_assignment=True)
                assignments.append((index, assignment))
            else:
                x = layer(x)
        if collect_assignments:
            return x, assignments
        return x

    def classify(self, x: TokenMap) -> Tensor:
        """LayerNorm, mean over tokens, linear head -> (B, num_classes)"""
        return self.head(mean(self.head_norm(x.tokens), axis=1))

    def forward(self, images: Tensor) -> Tensor:
        return self.classify(self.forward_features(images))


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Construct a model deterministically from its config and seed

    The model starts in eval mode; training switches it with `train()`.
    """
    model = Model(cfg, make_rng(seed))
    model.eval()
    logger.info(
        f"Built {cfg.name}: {len(model.layers)} layers, "
        f"{len(model.gp_blocks)} GP blocks, {model.num_parameters():,} parameters"
    )
    return model


def _as_batch(image: Union[np.ndarray, Tensor]) -> Tuple[Tensor, bool]:
    images = image if isinstance(image, Tensor) else Tensor(image)
    if images.ndim == 3:
        return reshape(images, (1, *images.shape)), True
    if images.ndim != 4:
        raise ShapeError(f"expected (H, W, 3) or (B, H, W, 3) image, got {images.shape}")
    return images, False


def conv_stem(model: Model, image: Union[np.ndarray, Tensor]) -> TokenMap:
    """Run the stem and add the positional embedding

    Raises:
        ConfigError: If the image extents are not divisible by the patch size
    """
    images, _ = _as_batch(image)
    return model.embed(images)


def forward_classify(model: Model, image: Union[np.ndarray, Tensor]) -> Tensor:
    """Logits for one image (H, W, 3) -> (K,) or a batch (B, H, W, 3) -> (B, K)

    Raises:
        ConfigError: If the image size differs from the configured input size
    """
    images, single = _as_batch(image)
    expected = model.cfg.input_size
    if images.shape[1] != expected or images.shape[2] != expected:
        raise ConfigError(
            f"image is {images.shape[1]}x{images.shape[2]}, model expects {expected}x{expected}"
        )
    logits = model(images)
    return reshape(logits, (logits.shape[-1],)) if single else logits
