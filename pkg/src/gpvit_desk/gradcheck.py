"""Analytic vs finite-difference gradients on a small model

Runs in float64. Every parameter coordinate is perturbed by +-h and the
central difference of the loss is compared to the tape gradient. The error of
a parameter block is max|a - n| / max(max|a|, max|n|, floor), where the floor is
1e-3 of the largest gradient anywhere in the model (at least 1e-8).
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .config import ModelConfig
from .errors import UsageError
from .model import build_model
from .tensor import Tensor, backward, cross_entropy, no_grad, precision

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
DEFAULT_PARAM_CAP = 20_000
MIN_SCALE = 1e-8
SCALE_FRACTION = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = MIN_SCALE) -> float:
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def numeric_gradient(loss_fn: Callable[[], float], array: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of loss_fn w.r.t. every entry of `array` (mutated and restored)"""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = loss_fn()
        flat[i] = original - step
        minus = loss_fn()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * step)
    return grad


@dataclass
class BlockResult:
    name: str
    size: int
    max_analytic: float
    max_numeric: float
    rel_error: float


@dataclass
class GradcheckReport:
    model: str
    seed: int
    step: float
    tolerance: float
    floor: float = MIN_SCALE
    blocks: List[BlockResult] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((b.rel_error for b in self.blocks), default=0.0)

    @property
    def max_abs_gradient(self) -> float:
        return max((b.max_analytic for b in self.blocks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> Dict:
        return {
            "model": self.model,
            "seed": self.seed,
            "step": self.step,
            "tolerance": self.tolerance,
            "floor": self.floor,
            "max_rel_error": self.max_rel_error,
            "max_abs_gradient": self.max_abs_gradient,
            "passed": self.passed,
            "blocks": [asdict(b) for b in self.blocks],
        }


def run_gradcheck(
    cfg: ModelConfig,
    seed: int = 0,
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
    max_params: int = DEFAULT_PARAM_CAP,
    batch_size: int = 2,
    constant_loss: bool = False,
    only: Optional[Sequence[str]] = None,
    on_block: Optional[Callable[[BlockResult], None]] = None,
) -> GradcheckReport:
    """Compare tape gradients to central differences for every parameter block

    Args:
        cfg: Model configuration (drop path is ignored; the model runs in eval)
        seed: Seeds initialisation, inputs and labels
        max_params: Refuse models larger than this
        constant_loss: Zero the head and use uniform soft targets, so the loss
            does not depend on any parameter
        only: Restrict to parameter names starting with one of these prefixes

    Raises:
        UsageError: If the model exceeds max_params
    """
    with precision("f64"):
        model = build_model(cfg, seed)
        total = model.num_parameters()
        if total > max_params:
            raise UsageError(
                f"{cfg.name} has {total:,} parameters, over the gradient-check cap of "
                f"{max_params:,}. Use a tiny preset (e.g. tiny-gradcheck) or raise --max-params"
            )

        rng = np.random.default_rng(seed)
        size = cfg.input_size
        images = Tensor(rng.normal(0.0, 1.0, size=(batch_size, size, size, 3)))
        if constant_loss:
            model.head.weight.data[:] = 0.0
            model.head.bias.data[:] = 0.0
            targets = np.full((batch_size, cfg.num_classes), 1.0 / cfg.num_classes)
        else:
            targets = rng.integers(0, cfg.num_classes, size=batch_size)

        def loss_value() -> float:
            with no_grad():
                return cross_entropy(model(images), targets).item()

        loss = cross_entropy(model(images), targets)
        params = list(model.named_parameters())
        grads = backward(loss, wrt=[p for _, p in params])
        gradient_scale = max(float(np.abs(g.data).max(initial=0.0)) for g in grads.values())
        floor = max(MIN_SCALE, SCALE_FRACTION * gradient_scale)

        report = GradcheckReport(model=cfg.name, seed=seed, step=step, tolerance=tolerance, floor=floor)
        for name, param in params:
            if only and not any(name.startswith(prefix) for prefix in only):
                continue
            analytic = grads[param].data
            numeric = numeric_gradient(loss_value, param.data, step)
            block = BlockResult(
                name=name,
                size=param.size,
                max_analytic=float(np.abs(analytic).max(initial=0.0)),
                max_numeric=float(np.abs(numeric).max(initial=0.0)),
                rel_error=relative_error(analytic, numeric, floor),
            )
            report.blocks.append(block)
            logger.debug(f"{name}: rel error {block.rel_error:.2e}")
            if on_block is not None:
                on_block(block)

    logger.info(f"Gradient check {cfg.name}: max rel error {report.max_rel_error:.3e}")
    return report
