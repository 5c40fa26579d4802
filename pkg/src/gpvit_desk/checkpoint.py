"""Versioned single-file checkpoints

Layout (all integers little-endian):

    magic        4 bytes   b"GPVT"
    version      u16       1
    digest       32 bytes  SHA-256 of the canonical config JSON
    count        u32       number of parameter records
    record * count:
        name_len u16, name (utf-8)
        ndim     u8,  dims (u32 * ndim)
        dtype    u8   (1 = float32, 2 = float64)
        data     raw little-endian values, row-major

Records follow the model's parameter declaration order.
"""

import logging
import struct
from pathlib import Path
from typing import BinaryIO, Dict

import numpy as np

from .config import config_digest
from .errors import CheckpointError
from .model import Model

logger = logging.getLogger(__name__)

MAGIC = b"GPVT"
VERSION = 1
DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}
CODE_DTYPES = {code: dtype.newbyteorder("<") for dtype, code in DTYPE_CODES.items()}


def _read_exact(f: BinaryIO, size: int, what: str) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise CheckpointError(f"Truncated checkpoint while reading {what}")
    return data


def save_checkpoint(model: Model, path: Path) -> Path:
    """Write all parameters of a model

    Raises:
        OSError: If the file cannot be written (message includes the path)
    """
    path = Path(path)
    params = list(model.named_parameters())
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<H", VERSION))
            f.write(config_digest(model.cfg))
            f.write(struct.pack("<I", len(params)))
            for name, param in params:
                encoded = name.encode("utf-8")
                data = param.data
                f.write(struct.pack("<H", len(encoded)))
                f.write(encoded)
                f.write(struct.pack("<B", data.ndim))
                f.write(struct.pack(f"<{data.ndim}I", *data.shape))
                f.write(struct.pack("<B", DTYPE_CODES[data.dtype]))
                f.write(np.ascontiguousarray(data, dtype=data.dtype.newbyteorder("<")).tobytes())
    except OSError as e:
        raise OSError(f"Cannot write checkpoint {path}: {e.strerror or e}") from e
    logger.info(f"Saved {len(params)} parameter blocks to {path}")
    return path


def read_checkpoint(path: Path) -> tuple:
    """Parse a checkpoint file into (config digest, {name: array})

    Raises:
        CheckpointError: On bad magic, unsupported version or truncation
    """
    path = Path(path)
    state: Dict[str, np.ndarray] = {}
    try:
        with open(path, "rb") as f:
            if _read_exact(f, 4, "magic") != MAGIC:
                raise CheckpointError(f"{path} is not a gpvit-desk checkpoint")
            (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
            if version != VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
            digest = _read_exact(f, 32, "config digest")
            (count,) = struct.unpack("<I", _read_exact(f, 4, "record count"))
            for _ in range(count):
                (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
                name = _read_exact(f, name_len, "name").decode("utf-8")
                (ndim,) = struct.unpack("<B", _read_exact(f, 1, f"{name} rank"))
                dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, f"{name} dims"))
                (code,) = struct.unpack("<B", _read_exact(f, 1, f"{name} dtype"))
                if code not in CODE_DTYPES:
                    raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
                dtype = CODE_DTYPES[code]
                size = int(np.prod(dims)) * dtype.itemsize
                raw = _read_exact(f, size, f"{name} data")
                state[name] = np.frombuffer(raw, dtype=dtype).reshape(dims)
            if f.read(1):
                raise CheckpointError(f"{path}: trailing bytes after last record")
    except OSError as e:
        raise OSError(f"Cannot read checkpoint {path}: {e.strerror or e}") from e
    return digest, state


def load_checkpoint(model: Model, path: Path) -> None:
    """Load parameters into a model built from the same config

    Raises:
        CheckpointError: If the config digest, names or shapes disagree
    """
    digest, state = read_checkpoint(path)
    if digest != config_digest(model.cfg):
        raise CheckpointError(
            f"{path} was written for a different config than {model.cfg.name}"
        )
    model.load_state_dict(state)
    logger.info(f"Loaded {len(state)} parameter blocks from {path}")
