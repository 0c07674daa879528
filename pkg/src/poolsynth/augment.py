"""Seed-deterministic, differentiable image augmentations."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .utils import torch_generator

MODES = ("none", "flip", "dsa-basic")

# DSA jitters brightness by +-0.5 on standardized inputs; images here are raw
# [0, 1] pixels with a typical std near 0.25, hence the smaller amplitude.
BRIGHTNESS = 0.125


def augment_batch(images, mode: str = "none", seed: int = 0, flip_prob: float = 0.5):
    """Augment a [B, C, H, W] tensor.

    ``none`` is the identity. ``flip`` mirrors each image horizontally with
    probability ``flip_prob``. ``dsa-basic`` chains flip, a random crop
    (zero-pad by H/8 then cut back to size) and brightness / saturation /
    contrast jitter, with per-image parameters drawn from ``seed``. Every op
    is differentiable in the pixels.
    """
    if mode not in MODES:
        raise ValueError(f"unknown augmentation mode {mode!r}; registered: {', '.join(MODES)}")
    x = images if isinstance(images, torch.Tensor) else torch.tensor(np.asarray(images))
    if mode == "none":
        return x
    g = torch_generator(seed)
    b = x.shape[0]
    x = _flip(x, torch.rand(b, generator=g) < flip_prob)
    if mode == "flip":
        return x
    x = _crop(x, g)
    return _jitter(x, g)


def flip_mask(batch: int, seed: int, flip_prob: float = 0.5) -> torch.Tensor:
    """The flip decisions ``augment_batch`` makes for ``seed`` (first draw of its stream)."""
    return torch.rand(batch, generator=torch_generator(seed)) < flip_prob


def _flip(x, mask):
    return torch.where(mask[:, None, None, None].to(x.device), x.flip(-1), x)


def _crop(x, g):
    b, _, h, w = x.shape
    ph, pw = max(1, h // 8), max(1, w // 8)
    padded = F.pad(x, (pw, pw, ph, ph))
    oy = torch.randint(0, 2 * ph + 1, (b,), generator=g)
    ox = torch.randint(0, 2 * pw + 1, (b,), generator=g)
    return torch.stack([padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w] for i in range(b)])


def _jitter(x, g):
    b = x.shape[0]
    shape = (b, 1, 1, 1)
    bright = ((torch.rand(shape, generator=g) - 0.5) * (2 * BRIGHTNESS)).to(x)
    x = x + bright
    gray = x.mean(dim=1, keepdim=True)
    sat = (torch.rand(shape, generator=g) * 2.0).to(x)
    x = (x - gray) * sat + gray
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    con = (torch.rand(shape, generator=g) + 0.5).to(x)
    return (x - mean) * con + mean


def cutmix(images, seed: int, beta: float = 1.0):
    """Paste a random box from a shuffled partner into each image.

    Returns ``(mixed, partner_index, lam)`` where ``lam`` is the fraction of
    each image's own pixels that survive.
    """
    rng = np.random.default_rng(seed)
    b, _, h, w = images.shape
    lam = rng.beta(beta, beta)
    perm = torch.as_tensor(rng.permutation(b))
    cut = np.sqrt(1.0 - lam)
    ch, cw = int(h * cut), int(w * cut)
    cy, cx = rng.integers(h), rng.integers(w)
    y0, y1 = np.clip(cy - ch // 2, 0, h), np.clip(cy + ch // 2, 0, h)
    x0, x1 = np.clip(cx - cw // 2, 0, w), np.clip(cx + cw // 2, 0, w)
    mixed = images.clone()
    mixed[:, :, y0:y1, x0:x1] = images[perm][:, :, y0:y1, x0:x1]
    lam = 1.0 - (y1 - y0) * (x1 - x0) / (h * w)
    return mixed, perm, float(lam)
