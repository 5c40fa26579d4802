"""gpvit-desk - GP Block vision transformers at desk scale"""

import os

from dotenv import load_dotenv

load_dotenv()

# GPVIT_THREADS caps BLAS/OpenMP threads; it must be applied before numpy loads
_threads = os.environ.get("GPVIT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

from .config import ModelConfig, dump_config, load_config, parse_config  # noqa: E402
from .cost import CostReport, count_flops, count_params, emit_report  # noqa: E402
from .errors import (  # noqa: E402
    CheckpointError,
    ConfigError,
    DivergenceError,
    GPViTError,
    ShapeError,
    UsageError,
)
from .gp_block import GPBlock, gp_block_forward  # noqa: E402
from .model import Model, build_model, conv_stem, forward_classify  # noqa: E402
from .presets import get_preset, list_presets  # noqa: E402

__all__ = [
    "ModelConfig",
    "parse_config",
    "load_config",
    "dump_config",
    "CostReport",
    "count_params",
    "count_flops",
    "emit_report",
    "GPViTError",
    "ShapeError",
    "ConfigError",
    "UsageError",
    "CheckpointError",
    "DivergenceError",
    "GPBlock",
    "gp_block_forward",
    "Model",
    "build_model",
    "conv_stem",
    "forward_classify",
    "get_preset",
    "list_presets",
]
