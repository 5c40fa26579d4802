"""Synthetic classification images

Class k draws shape k % 4 (square, disc, horizontal bar, cross) in its own
colour on a dark background, at a jittered position, plus seeded Gaussian
noise. Labels are balanced and generation is deterministic per seed.
"""

import logging
from typing import Tuple

import numpy as np
from pydantic import BaseModel, field_validator

from .errors import ConfigError

logger = logging.getLogger(__name__)

SHAPES = ("square", "disc", "bar", "cross")

PALETTE = np.array([
    [0.95, 0.20, 0.20],
    [0.20, 0.85, 0.25],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.15],
    [0.85, 0.25, 0.90],
    [0.15, 0.85, 0.90],
    [0.98, 0.55, 0.10],
    [0.90, 0.90, 0.90],
])


class SyntheticDataset(BaseModel):
    """Generator spec for a balanced synthetic image set

    Attributes:
        num_classes: K
        samples_per_class: Images per class
        image_size: Square side in pixels
        noise: Std of the additive Gaussian noise
        jitter: Max shape displacement in pixels
    """
    num_classes: int = 8
    samples_per_class: int = 8
    image_size: int = 32
    noise: float = 0.05
    jitter: int = 3

    @field_validator("num_classes", "samples_per_class", "image_size")
    @classmethod
    def validate_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"must be positive, got {v}")
        return v

    @property
    def size(self) -> int:
        return self.num_classes * self.samples_per_class

    def generate(self, seed: int) -> Tuple[np.ndarray, np.ndarray]:
        """Images (n, H, W, 3) in [0, 1] and integer labels (n,), class-major order"""
        if self.num_classes > len(PALETTE) * len(SHAPES):
            raise ConfigError(f"at most {len(PALETTE) * len(SHAPES)} distinct classes are supported")
        rng = np.random.default_rng(seed)
        images = np.empty((self.size, self.image_size, self.image_size, 3))
        labels = np.repeat(np.arange(self.num_classes), self.samples_per_class)
        for i, label in enumerate(labels):
            images[i] = self._draw(int(label), rng)
        logger.debug(f"Generated {self.size} synthetic images ({self.num_classes} classes)")
        return images, labels

    def _draw(self, label: int, rng: np.random.Generator) -> np.ndarray:
        size = self.image_size
        radius = max(1, size // 4)
        dy, dx = rng.integers(-self.jitter, self.jitter + 1, size=2)
        cy, cx = size / 2 - 0.5 + dy, size / 2 - 0.5 + dx
        ys, xs = np.mgrid[0:size, 0:size]
        ay, ax = np.abs(ys - cy), np.abs(xs - cx)

        shape = SHAPES[label % len(SHAPES)]
        if shape == "square":
            mask = (ay <= radius) & (ax <= radius)
        elif shape == "disc":
            mask = ay ** 2 + ax ** 2 <= radius ** 2
        elif shape == "bar":
            mask = (ay <= max(1, radius // 2)) & (ax <= 1.5 * radius)
        else:
            thickness = max(1, radius // 3)
            mask = ((ay <= thickness) & (ax <= radius)) | ((ax <= thickness) & (ay <= radius))

        colour = PALETTE[(label + label // len(PALETTE)) % len(PALETTE)]
        image = np.full((size, size, 3), 0.1)
        image[mask] = colour
        image += rng.normal(0.0, self.noise, size=image.shape)
        return np.clip(image, 0.0, 1.0)
