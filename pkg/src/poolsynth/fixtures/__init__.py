"""Offline fixture datasets.

``python -m poolsynth.fixtures`` regenerates the shipped ``.npz``/``.json``
pairs in this directory. Generation is deterministic.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def make_toy_2class(per_class: int = 4, size: int = 8, seed: int = 0):
    """Linearly separable pair of classes: dark (~0.2) versus bright (~0.8) images."""
    from ..data import LabeledDataset

    rng = np.random.default_rng(seed)
    imgs, labels = [], []
    for k, level in enumerate((0.2, 0.8)):
        x = level + 0.05 * rng.standard_normal((per_class, 3, size, size))
        imgs.append(np.clip(x, 0, 1))
        labels += [k] * per_class
    return LabeledDataset(np.concatenate(imgs).astype(np.float32), np.array(labels), 2, "toy-2class")


def make_gauss_grid(per_class: int, classes: int = 4, size: int = 8, noise: float = 0.3,
                    seed: int = 0, name: str = "gauss-grid"):
    """One Gaussian bump per class placed on a grid cell, plus a class tint and pixel noise."""
    from ..data import LabeledDataset

    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(classes)))
    cell = size / side
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    tints = np.random.default_rng(1234).uniform(0.5, 1.0, size=(classes, 3))
    imgs, labels = [], []
    for k in range(classes):
        cy, cx = (k // side + 0.5) * cell, (k % side + 0.5) * cell
        for _ in range(per_class):
            jy, jx = rng.uniform(-1.0, 1.0, size=2)
            bump = np.exp(-((yy - cy - jy) ** 2 + (xx - cx - jx) ** 2) / (2 * (0.3 * size) ** 2 / side))
            x = 0.25 + 0.5 * bump[None] * tints[k][:, None, None]
            x = x + noise * rng.standard_normal((3, size, size))
            imgs.append(np.clip(x, 0, 1))
            labels.append(k)
    return LabeledDataset(np.stack(imgs).astype(np.float32), np.array(labels), classes, name)


def regenerate(directory=None):
    from ..data import write_fixture

    directory = Path(directory or Path(__file__).parent)
    paths = [
        write_fixture(make_toy_2class(), directory),
        write_fixture(make_gauss_grid(100, seed=0, name="gauss-grid-train"), directory),
        write_fixture(make_gauss_grid(50, seed=1, name="gauss-grid-test"), directory),
    ]
    return paths

