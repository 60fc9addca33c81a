"""Synthetic class-coded image sets for tests and demos."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

STATES = ("diced", "grated", "juiced", "julienne", "paste", "sliced", "whole")


def class_patterns(num_classes: int = 7, per_class: int = 8, side: int = 64, seed: int = 0,
                   noise: float = 12.0) -> tuple[np.ndarray, np.ndarray]:
    """Images in [0, 255] whose class sets the stripe orientation and colour.

    Returns ``(images (N, side, side, 3) float32, labels (N,) int64)`` ordered
    class by class.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] / side
    images, labels = [], []
    for k in range(num_classes):
        angle = np.pi * k / num_classes
        colour = 0.5 + 0.5 * np.cos(2 * np.pi * (k / num_classes + np.array([0, 1 / 3, 2 / 3])))
        for _ in range(per_class):
            phase = rng.uniform(0, 2 * np.pi)
            wave = 0.5 + 0.5 * np.sin(2 * np.pi * 4 * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
            img = 255 * wave[..., None] * colour
            img = img + rng.normal(0, noise, img.shape)
            images.append(np.clip(img, 0, 255))
            labels.append(k)
    return np.asarray(images, dtype=np.float32), np.asarray(labels, dtype=np.int64)


def write_tree(root, num_classes: int = 7, per_class: int = 8, side: int = 64, seed: int = 0,
               class_names=None) -> Path:
    """Write :func:`class_patterns` as ``root/<class>/<nnn>.png``."""
    root = Path(root)
    names = list(class_names or (STATES if num_classes == len(STATES) else
                                 [f"class_{k}" for k in range(num_classes)]))
    images, labels = class_patterns(num_classes, per_class, side, seed)
    counters = [0] * num_classes
    for img, y in zip(images, labels):
        d = root / names[y]
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(img).astype(np.uint8)).save(d / f"{counters[y]:03d}.png")
        counters[y] += 1
    return root
