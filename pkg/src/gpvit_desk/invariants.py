"""Property suites for the attention kernels, the GP block and the cost model

Each suite returns a list of CheckResult. Suites are registered by name so the
CLI can select a subset with --only. A fault can be injected to prove the
harness catches it: "softmax-axis" makes the grouping softmax normalise over
groups instead of image tokens.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .attention import Attention, AttentionConfig, global_attention, multi_head_attention
from .config import ModelConfig
from .cost import block_flops, count_params
from .errors import UsageError
from .gp_block import GPBlock, feature_grouping, gp_block_forward
from .layers import TokenMap
from .model import build_ablation_block, build_model
from .presets import get_preset, list_presets
from .tensor import Tensor, get_dtype, layer_norm, make_rng, softmax

logger = logging.getLogger(__name__)

FAULTS = ("softmax-axis",)


@dataclass
class CheckResult:
    suite: str
    check: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


@dataclass
class InvariantReport:
    model: str
    seed: int
    fault: Optional[str]
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if not r.passed]

    def to_dict(self) -> Dict:
        return {
            "model": self.model,
            "seed": self.seed,
            "fault": self.fault,
            "passed": self.passed,
            "results": [asdict(r) for r in self.results],
        }


@dataclass
class InvariantContext:
    cfg: ModelConfig
    seed: int
    fault: Optional[str] = None

    def rng(self, salt: int) -> np.random.Generator:
        return make_rng(self.seed * 1000 + salt)

    @property
    def tight(self) -> float:
        """Rounding tolerance of the active precision"""
        return 1e-12 if get_dtype() is np.float64 else 1e-6

    def token_map(self, salt: int, batch: int = 2) -> TokenMap:
        grid = (self.cfg.grid, self.cfg.grid)
        values = self.rng(salt).normal(0.0, 1.0, size=(batch, grid[0] * grid[1], self.cfg.channels))
        return TokenMap(Tensor(values), grid)

    def gp_block(self, salt: int) -> GPBlock:
        groups = self.cfg.gp_group_counts[0] if self.cfg.gp_group_counts else 4
        block = build_ablation_block("gp", self.cfg, self.rng(salt), num_groups=groups)
        if self.fault == "softmax-axis":
            block.grouping_softmax_axis = -2
        return block


def _check(suite: str, check: str, value: float, threshold: float, below: bool = True, detail: str = "") -> CheckResult:
    passed = value <= threshold if below else value >= threshold
    return CheckResult(suite, check, bool(passed), float(value), float(threshold), detail)


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

def suite_softmax(ctx: InvariantContext) -> List[CheckResult]:
    logits = ctx.rng(1).uniform(-10.0, 10.0, size=(8, 13))
    probs = softmax(Tensor(logits), axis=-1).data
    shifted = softmax(Tensor(logits + 5.0), axis=-1).data
    return [
        _check("softmax", "rows-sum-to-one", np.abs(probs.sum(axis=-1) - 1.0).max(), ctx.tight),
        _check("softmax", "nonnegative", -probs.min(), 0.0),
        _check("softmax", "shift-invariance", np.abs(probs - shifted).max(), 10 * ctx.tight),
    ]


def suite_grouping(ctx: InvariantContext) -> List[CheckResult]:
    block = ctx.gp_block(2)
    _, assignment = feature_grouping(ctx.token_map(3), block)
    row_sums = assignment.weights.sum(axis=-1)
    argmax = assignment.argmax_map()
    return [
        _check("grouping", "weight-rows-sum-to-one", np.abs(row_sums - 1.0).max(), 1e-6),
        _check(
            "grouping", "argmax-in-range",
            float(argmax.min() < 0 or argmax.max() >= block.num_groups), 0.0,
        ),
    ]


def suite_convex_hull(ctx: InvariantContext) -> List[CheckResult]:
    """Grouped head-slices are convex combinations of normalised token head-slices"""
    block = ctx.gp_block(4)
    x = ctx.token_map(5)
    grouped, assignment = feature_grouping(x, block)
    normed = layer_norm(x.tokens, block.grouping_norm.gain, block.grouping_norm.bias).data

    heads = block.grouping_cfg.num_heads
    dim = block.grouping_cfg.head_dim
    weights = assignment.weights
    deviation = 0.0
    for h in range(heads):
        part = slice(h * dim, (h + 1) * dim)
        rebuilt = weights[:, h] @ normed[:, :, part]
        deviation = max(deviation, float(np.abs(rebuilt - grouped.data[:, :, part]).max()))
    return [
        _check("convex-hull", "weights-nonnegative", -weights.min(), 0.0),
        _check("convex-hull", "weights-sum-to-one", np.abs(weights.sum(axis=-1) - 1.0).max(), 1e-6),
        _check("convex-hull", "grouped-equals-weighted-sum", deviation, 1e-5),
    ]


def suite_equivariance(ctx: InvariantContext) -> List[CheckResult]:
    rng = ctx.rng(6)

    block = ctx.gp_block(7)
    kernel = np.zeros_like(block.dwconv.kernel.data)
    kernel[1, 1] = 1.0
    block.dwconv.kernel.data = kernel
    block.dwconv.bias.data = np.zeros_like(block.dwconv.bias.data)

    x = ctx.token_map(8)
    perm = rng.permutation(x.num_tokens)
    permuted = TokenMap(Tensor(x.tokens.data[:, perm]), x.grid)
    base = gp_block_forward(x, block).tokens.data
    moved = gp_block_forward(permuted, block).tokens.data
    gp_dev = np.abs(base[:, perm] - moved).max()

    cfg = AttentionConfig(num_heads=ctx.cfg.num_heads, model_dim=ctx.cfg.channels, use_output_projection=False)
    q, k, v = (Tensor(rng.normal(size=(x.num_tokens, ctx.cfg.channels))) for _ in range(3))
    out = multi_head_attention(q, k, v, cfg).data
    q_moved = multi_head_attention(Tensor(q.data[perm]), k, v, cfg).data
    kv_moved = multi_head_attention(q, Tensor(k.data[perm]), Tensor(v.data[perm]), cfg).data

    tolerance = 1e-5
    return [
        _check("equivariance", "gp-block-token-permutation", gp_dev, tolerance),
        _check("equivariance", "attention-query-permutation", np.abs(out[perm] - q_moved).max(), tolerance),
        _check("equivariance", "attention-key-value-permutation", np.abs(out - kv_moved).max(), tolerance),
    ]


def declared_support(kind: str, grid: Sequence[int], size: int, heads: int) -> np.ndarray:
    """Boolean (heads, N, N) support built from token coordinates alone"""
    height, width = grid
    rows, cols = np.divmod(np.arange(height * width), width)
    support = np.zeros((heads, height * width, height * width), dtype=bool)

    def same(a: np.ndarray) -> np.ndarray:
        return a[:, None] == a[None, :]

    if kind == "window":
        cell = same(rows // size) & same(cols // size)
        support[:] = cell
    elif kind == "strip-pair":
        strip_h, strip_w = min(size, height), min(size, width)
        support[: heads // 2] = same(rows // strip_h)
        support[heads // 2:] = same(cols // strip_w)
    elif kind == "shifted-window":
        shift = size // 2
        padded_h = -(-height // size) * size
        padded_w = -(-width // size) * size
        r = (rows - shift) % padded_h
        c = (cols - shift) % padded_w

        def band(p: np.ndarray, extent: int) -> np.ndarray:
            if shift == 0:
                return np.zeros_like(p)
            return np.where(p < extent - size, 0, np.where(p < extent - shift, 1, 2))

        cell = same(r // size) & same(c // size)
        region = same(band(r, padded_h)) & same(band(c, padded_w))
        support[:] = cell & region
    else:
        support[:] = True
    return support


def suite_support(ctx: InvariantContext) -> List[CheckResult]:
    results = []
    x = ctx.token_map(9, batch=1)
    channels, heads = ctx.cfg.channels, ctx.cfg.num_heads
    # sizes that force padding on the configured grid
    window = max(2, ctx.cfg.grid - 2)
    cases = (("window", window), ("shifted-window", window), ("strip-pair", ctx.cfg.strip_size))
    for index, (kind, size) in enumerate(cases):
        layer = Attention(channels, heads, kind, size, ctx.rng(10 + index))
        _, weights = layer(x, return_weights=True)
        support = declared_support(kind, x.grid, size, heads)[None]
        outside = float(np.abs(weights.dense[~np.broadcast_to(support, weights.dense.shape)]).max(initial=0.0))
        row_dev = np.abs(weights.dense.sum(axis=-1) - 1.0).max()
        results.append(_check("support", f"{kind}-zero-outside-support", outside, 0.0))
        results.append(_check("support", f"{kind}-rows-sum-to-one", row_dev, 1e-5))
    return results


def suite_full_window(ctx: InvariantContext) -> List[CheckResult]:
    x = ctx.token_map(13)
    layer = Attention(ctx.cfg.channels, ctx.cfg.num_heads, "window", ctx.cfg.grid, ctx.rng(14))
    windowed = layer(x).tokens.data
    full = global_attention(x, layer.cfg, layer.qkv, layer.proj).tokens.data
    return [_check("full-window", "window-covering-grid-equals-global", np.abs(windowed - full).max(), 1e-6)]


def suite_scaling(ctx: InvariantContext) -> List[CheckResult]:
    channels = ctx.cfg.channels if ctx.cfg.channels >= 96 else 216
    results = []
    for groups in (16, 32, 64):
        worst = max(
            block_flops("gp", channels, 2 * n, groups) / block_flops("gp", channels, n, groups)
            for n in (784, 1568, 3136, 12544)
        )
        results.append(_check("scaling", f"gp-{groups}-doubling-ratio", worst, 2.2))
    attn_ratio = block_flops("self-attn", channels, 8192) / block_flops("self-attn", channels, 4096)
    results.append(_check("scaling", "self-attn-doubling-ratio", attn_ratio, 3.5, below=False))

    tokens = np.array([196, 784, 3136, 12544], dtype=float)
    gp = np.array([block_flops("gp", channels, int(n), 64) for n in tokens], dtype=float)
    linear_fit = np.polyval(np.polyfit(tokens, gp, 1), tokens)
    residual = np.abs(linear_fit - gp).max() / gp.mean()
    results.append(_check("scaling", "gp-affine-in-tokens", residual, 1e-3))

    attn = np.array([block_flops("self-attn", channels, int(n)) for n in tokens], dtype=float)
    leading = np.polyfit(tokens, attn, 2)[0]
    results.append(_check("scaling", "self-attn-quadratic-coefficient", leading, 0.0, below=False))
    return results


def suite_param_consistency(ctx: InvariantContext) -> List[CheckResult]:
    """Built parameter count equals the analytic count for the model and every preset"""
    results = []
    configs = [ctx.cfg] + [get_preset(n) for n in list_presets() if n != ctx.cfg.name]
    for cfg in configs:
        built = build_model(cfg, ctx.seed).num_parameters()
        analytic = count_params(cfg)
        results.append(
            _check("param-consistency", cfg.name, abs(built - analytic), 0.0,
                   detail=f"built {built}, analytic {analytic}")
        )
    return results


SUITES: Dict[str, Callable[[InvariantContext], List[CheckResult]]] = {
    "softmax": suite_softmax,
    "grouping": suite_grouping,
    "convex-hull": suite_convex_hull,
    "equivariance": suite_equivariance,
    "support": suite_support,
    "full-window": suite_full_window,
    "scaling": suite_scaling,
    "param-consistency": suite_param_consistency,
}


def run_invariants(
    cfg: ModelConfig,
    only: Optional[Sequence[str]] = None,
    inject_fault: Optional[str] = None,
    seed: int = 0,
) -> InvariantReport:
    """Run the selected suites (all when `only` is None)

    Raises:
        UsageError: On an empty or unknown selection, or an unknown fault
    """
    if only is not None and len(only) == 0:
        raise UsageError("empty suite selection; choose from " + ", ".join(SUITES))
    names = list(SUITES) if only is None else list(only)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise UsageError(f"unknown suites {unknown}; choose from " + ", ".join(SUITES))
    if inject_fault is not None and inject_fault not in FAULTS:
        raise UsageError(f"unknown fault {inject_fault}; choose from {', '.join(FAULTS)}")

    ctx = InvariantContext(cfg=cfg, seed=seed, fault=inject_fault)
    report = InvariantReport(model=cfg.name, seed=seed, fault=inject_fault)
    for name in names:
        results = SUITES[name](ctx)
        report.results.extend(results)
        failed = sum(not r.passed for r in results)
        logger.info(f"Suite {name}: {len(results) - failed}/{len(results)} checks passed")
    return report
