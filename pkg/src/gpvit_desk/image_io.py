"""Binary PGM/PPM reading and writing, group-map rendering

Only 8-bit binary netpbm files (P5 grayscale, P6 colour) are supported.
"""

import logging
from pathlib import Path
from typing import List, Tuple

import numpy as np
import pandas as pd

from .errors import ConfigError, ShapeError
from .gp_block import GroupAssignment

logger = logging.getLogger(__name__)


def _header_tokens(data: bytes, count: int) -> Tuple[List[bytes], int]:
    """Read `count` whitespace-separated header tokens, skipping # comments"""
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ConfigError("truncated netpbm header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pnm(path: Path) -> np.ndarray:
    """Read a P5/P6 file into uint8 (H, W) or (H, W, 3)

    Samples of files with maxval below 255 are rescaled to the full 0-255 range.

    Raises:
        ConfigError: If the file is not 8-bit binary PGM/PPM
        OSError: If the file cannot be read
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OSError(f"Cannot read image {path}: {e.strerror or e}") from e

    tokens, offset = _header_tokens(data, 4)
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6"):
        raise ConfigError(f"{path}: only binary PGM (P5) and PPM (P6) are supported")
    if maxval > 255:
        raise ConfigError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    if maxval < 1:
        raise ConfigError(f"{path}: maxval must be at least 1, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    raster = np.frombuffer(data[offset:offset + expected], dtype=np.uint8)
    if raster.size != expected:
        raise ConfigError(f"{path}: raster has {raster.size} bytes, expected {expected}")
    if maxval < 255:
        scaled = np.minimum(raster, maxval).astype(np.float64) * (255.0 / maxval)
        raster = np.rint(scaled).astype(np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return raster.reshape(shape)


def write_pgm(path: Path, image: np.ndarray) -> Path:
    if image.ndim != 2:
        raise ShapeError(f"PGM needs an (H, W) array, got {image.shape}")
    return _write_pnm(path, b"P5", image)


def write_ppm(path: Path, image: np.ndarray) -> Path:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"PPM needs an (H, W, 3) array, got {image.shape}")
    return _write_pnm(path, b"P6", image)


def _write_pnm(path: Path, magic: bytes, image: np.ndarray) -> Path:
    path = Path(path)
    height, width = image.shape[:2]
    header = magic + f"\n{width} {height}\n255\n".encode("ascii")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(header + np.ascontiguousarray(image, dtype=np.uint8).tobytes())
    except OSError as e:
        raise OSError(f"Cannot write image {path}: {e.strerror or e}") from e
    return path


def image_to_input(image: np.ndarray) -> np.ndarray:
    """uint8 (H, W) or (H, W, 3) -> float (H, W, 3) in [0, 1]"""
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    return image.astype(np.float64) / 255.0


def input_to_image(x: np.ndarray) -> np.ndarray:
    """float (H, W, 3) in [0, 1] -> uint8, rounding to nearest"""
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def group_map_levels(index_map: np.ndarray, num_groups: int) -> np.ndarray:
    """Group indices -> gray levels round(i * 255 / (M - 1)); all zero when M == 1"""
    if num_groups <= 1:
        return np.zeros_like(index_map, dtype=np.uint8)
    return np.rint(index_map * 255.0 / (num_groups - 1)).astype(np.uint8)


def group_palette(num_groups: int) -> np.ndarray:
    """Fixed (M, 3) colour table, evenly spaced hues"""
    hues = np.arange(num_groups) / max(num_groups, 1)
    sector = hues * 6.0
    idx = np.floor(sector).astype(int) % 6
    frac = sector - np.floor(sector)
    value, sat = 1.0, 0.85
    p = value * (1 - sat)
    q = value * (1 - sat * frac)
    t = value * (1 - sat * (1 - frac))
    table = np.stack([
        np.choose(idx, [value, q, p, p, t, value]),
        np.choose(idx, [t, value, value, q, p, p]),
        np.choose(idx, [p, p, t, value, value, q]),
    ], axis=1)
    return np.rint(table * 255).astype(np.uint8)


def write_group_maps(
    out_dir: Path,
    layer: int,
    assignment: GroupAssignment,
    sample: int = 0,
) -> List[Path]:
    """Write the argmax map of one GP block as PGM, PPM and a weights CSV

    The CSV has columns (block, head, group, token, weight).
    """
    out_dir = Path(out_dir)
    index_map = assignment.argmax_map()[sample]
    num_groups = assignment.num_groups
    stem = f"groups_layer{layer:02d}"

    pgm = write_pgm(out_dir / f"{stem}.pgm", group_map_levels(index_map, num_groups))
    ppm = write_ppm(out_dir / f"{stem}.ppm", group_palette(num_groups)[index_map])

    weights = assignment.weights[sample]
    heads, groups, tokens = weights.shape
    head_idx, group_idx, token_idx = np.meshgrid(
        np.arange(heads), np.arange(groups), np.arange(tokens), indexing="ij"
    )
    frame = pd.DataFrame({
        "block": layer,
        "head": head_idx.ravel(),
        "group": group_idx.ravel(),
        "token": token_idx.ravel(),
        "weight": weights.ravel(),
    })
    csv_path = out_dir / f"{stem}_weights.csv"
    try:
        frame.to_csv(csv_path, index=False, float_format="%.8e")
    except OSError as e:
        raise OSError(f"Cannot write {csv_path}: {e.strerror or e}") from e

    logger.info(f"Wrote group maps for layer {layer} ({assignment.grid[0]}x{assignment.grid[1]})")
    return [pgm, ppm, csv_path]
