"""Synthetic-image optimization by matching teacher batch-norm statistics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .augment import MODES as AUGMENT_MODES
from .augment import augment_batch
from .data import LabeledDataset, SyntheticDataset, init_synthetic
from .errors import DivergenceError, NonFiniteActivationError, PoolError, ShapeMismatchError, SizeCapError
from .models import ModelSnapshot, forward_with_stats
from .pool import sample_indices
from .utils import derive_seed

TERM_NORMALIZATIONS = ("none", "layers", "channels")

# hard caps for the literal trajectory objective
TRAJ_MAX_IMAGES = 2000
TRAJ_MAX_CHECKPOINTS = 16


@dataclass
class SynthesisConfig:
    ipc: int = 10
    iterations: int = 1000
    batch_size: int = 100
    ensemble_n: int = 3
    u: float = 1.0
    lr: float = 0.1
    betas: tuple = (0.5, 0.9)
    weight_decay: float = 0.0
    lr_schedule: str = "cosine"
    init_mode: str = "real"
    augment: str = "none"
    clamp_pixels: bool = True
    seed: int = 0
    per_image_subsets: bool = False
    term_normalization: str = "none"
    divergence_factor: float = 1e3

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.ipc < 1 or self.batch_size < 2 or self.ensemble_n < 1:
            raise ValueError("ipc and ensemble_n must be >= 1, batch_size >= 2")
        if self.u < 0:
            raise ValueError("u must be >= 0")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"lr_schedule must be 'cosine' or 'constant', got {self.lr_schedule!r}")
        if self.init_mode not in ("noise", "real"):
            raise ValueError(f"init_mode must be 'noise' or 'real', got {self.init_mode!r}")
        if self.augment not in AUGMENT_MODES:
            raise ValueError(f"unknown augmentation {self.augment!r}")
        if self.term_normalization not in TERM_NORMALIZATIONS:
            raise ValueError(f"term_normalization must be one of {TERM_NORMALIZATIONS}")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class LossBreakdown:
    mean_term: float
    var_term: float
    ce_term: float
    total: float
    u: float
    per_teacher: list = field(default_factory=list)
    tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def row(self) -> dict:
        return {"mean_term": self.mean_term, "var_term": self.var_term, "ce_term": self.ce_term,
                "total": self.total}


def _norm_weights(stats, how):
    if how == "none":
        return [1.0] * len(stats)
    if how == "layers":
        return [1.0 / len(stats)] * len(stats)
    return [1.0 / m.numel() for _, m, _ in stats]


def _breakdown(mean_t, var_t, ce_t, u) -> LossBreakdown:
    total = mean_t + var_t + u * ce_t
    return LossBreakdown(_item(mean_t), _item(var_t), _item(ce_t), _item(total), u, tensor=total)


def _item(t) -> float:
    return float(t.detach()) if isinstance(t, torch.Tensor) else float(t)


def statistic_matching_loss(images, hard_labels, teacher: ModelSnapshot, u: float = 1.0,
                            term_normalization: str = "none") -> LossBreakdown:
    """Sum over BN sites of ||batch mean - RM||_2 and ||batch var - RV||_2, plus u * CE.

    ``images`` may require grad; ``breakdown.tensor`` is the differentiable
    total. Computation runs in the dtype of ``images``.
    """
    x = images if isinstance(images, torch.Tensor) else torch.tensor(np.asarray(images))
    y = hard_labels if isinstance(hard_labels, torch.Tensor) else torch.tensor(np.asarray(hard_labels))
    if y.ndim != 1 or len(y) != len(x):
        raise ShapeMismatchError((len(x),), tuple(y.shape), what="hard_labels")
    logits, stats = forward_with_stats(teacher, x, bn_mode="running")
    net = teacher.module(x.dtype)
    running = {b.layer_id: (b.running_mean, b.running_var) for b in net.bn_layers()}
    zero = logits.new_zeros(())
    mean_t, var_t = zero, zero
    for w, (lid, mu, var) in zip(_norm_weights(stats.per_layer, term_normalization), stats.per_layer):
        if not (torch.isfinite(mu).all() and torch.isfinite(var).all()):
            raise NonFiniteActivationError(lid)
        rm, rv = running[lid]
        mean_t = mean_t + w * torch.linalg.vector_norm(mu - rm)
        var_t = var_t + w * torch.linalg.vector_norm(var - rv)
    if not torch.isfinite(logits).all():
        raise NonFiniteActivationError("logits")
    ce = F.cross_entropy(logits, y.long())
    return _breakdown(mean_t, var_t, ce, u)


def aggregate(parts: list[LossBreakdown]) -> LossBreakdown:
    """Arithmetic mean over teachers of every term."""
    n = len(parts)
    tensor = sum(p.tensor for p in parts) / n
    return LossBreakdown(sum(p.mean_term for p in parts) / n, sum(p.var_term for p in parts) / n,
                         sum(p.ce_term for p in parts) / n, _item(tensor), parts[0].u,
                         per_teacher=[(p.mean_term, p.var_term, p.ce_term) for p in parts], tensor=tensor)


def ensemble_loss(images, hard_labels, teachers, u, term_normalization="none") -> LossBreakdown:
    return aggregate([statistic_matching_loss(images, hard_labels, t, u, term_normalization) for t in teachers])


def _batches(n_images: int, class_count: int, batch_size: int) -> list[np.ndarray]:
    """Contiguous chunks of whole ipc-rows, so every chunk stays class balanced."""
    rows = n_images // class_count
    per = max(1, batch_size // class_count)
    return [np.arange(r * class_count, min(rows, r + per) * class_count) for r in range(0, rows, per)]


def _cosine(lr, it, total):
    return lr * 0.5 * (1.0 + math.cos(math.pi * it / total))


def distill(pool, ds_meta, cfg: SynthesisConfig, init: SyntheticDataset | None = None, log_every: int = 0,
            logger=None, callback=None):
    """Optimize synthetic pixels against the pool; returns ``(SyntheticDataset, history)``.

    ``ds_meta`` is the real dataset (needed for real-image initialization) or
    any object exposing ``class_count`` plus ``image_shape``. ``history`` holds
    one :class:`LossBreakdown` per iteration, averaged over batches. Teachers
    are never modified; only the pixel tensor receives gradients.
    ``callback(it, images)`` runs after every update with a detached copy.
    """
    if len(pool) == 0:
        raise PoolError("pool is empty")
    if cfg.ensemble_n > len(pool):
        raise PoolError(f"ensemble_n={cfg.ensemble_n} exceeds pool size {len(pool)}")
    c = ds_meta.class_count
    if c != pool.class_count:
        raise PoolError(f"pool classifies {pool.class_count} classes, dataset has {c}")
    if init is None:
        if cfg.init_mode == "real" and not isinstance(ds_meta, LabeledDataset):
            raise ValueError("real initialization needs the labeled dataset")
        if cfg.init_mode == "real":
            init = init_synthetic(ds_meta, cfg.ipc, "real", derive_seed(cfg.seed, "init"))
        else:
            fake = LabeledDataset(np.zeros((c,) + tuple(ds_meta.image_shape), np.float32),
                                  np.arange(c), c, "shape-only")
            init = init_synthetic(fake, cfg.ipc, "noise", derive_seed(cfg.seed, "init"))

    x = torch.tensor(init.images, requires_grad=True)
    y = torch.tensor(init.hard_labels)
    opt = torch.optim.Adam([x], lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    chunks = _batches(len(x), c, cfg.batch_size)
    rng = np.random.default_rng(derive_seed(cfg.seed, "teachers"))
    rows = len(x) // c
    subsets = None
    if cfg.per_image_subsets:
        sub_rng = np.random.default_rng(derive_seed(cfg.seed, "image-subsets"))
        subsets = [sample_indices(len(pool), cfg.ensemble_n, sub_rng) for _ in range(rows)]
        chunks = [np.arange(r * c, (r + 1) * c) for r in range(rows)]

    history, initial = [], None
    for it in range(cfg.iterations):
        lr = _cosine(cfg.lr, it, cfg.iterations) if cfg.lr_schedule == "cosine" else cfg.lr
        for g in opt.param_groups:
            g["lr"] = lr
        opt.zero_grad(set_to_none=True)
        step_idx = None if subsets else sample_indices(len(pool), cfg.ensemble_n, rng)
        parts = []
        for b, idx in enumerate(chunks):
            teacher_idx = subsets[idx[0] // c] if subsets else step_idx
            xb = augment_batch(x[idx], cfg.augment, derive_seed(cfg.seed, "augment", it, b))
            br = ensemble_loss(xb, y[idx], [pool.load(i) for i in teacher_idx], cfg.u, cfg.term_normalization)
            (br.tensor * len(idx) / len(x)).backward()
            parts.append((br, len(idx) / len(x)))
        step = LossBreakdown(
            sum(p.mean_term * w for p, w in parts), sum(p.var_term * w for p, w in parts),
            sum(p.ce_term * w for p, w in parts), sum(p.total * w for p, w in parts), cfg.u,
            per_teacher=[t for p, _ in parts for t in p.per_teacher])
        if not math.isfinite(step.total):
            raise DivergenceError(f"non-finite loss at iteration {it}")
        if initial is None:
            initial = step.total
        elif step.total > cfg.divergence_factor * max(initial, 1e-12):
            raise DivergenceError(f"loss {step.total:.4g} at iteration {it} exceeds "
                                  f"{cfg.divergence_factor:g}x the initial {initial:.4g}")
        history.append(step)
        opt.step()
        if cfg.clamp_pixels:
            with torch.no_grad():
                x.clamp_(0.0, 1.0)
        if callback is not None:
            callback(it, x.detach().clone())
        if logger is not None and log_every and (it % log_every == 0 or it == cfg.iterations - 1):
            logger.info("iter %d total %.5f mean %.5f var %.5f ce %.5f", it, step.total, step.mean_term,
                        step.var_term, step.ce_term)

    meta = {**init.meta, "synthesis": cfg.to_dict()}
    out = SyntheticDataset(x.detach().numpy().copy(), init.hard_labels, init.ipc, c, None, meta)
    return out, history


def student_trajectory_loss(images, hard_labels, student_traj, ds: LabeledDataset, u: float = 1.0,
                            real_stats=None):
    """Trajectory form of the objective, with real-data statistics recomputed per checkpoint.

    Statistic terms are summed over every checkpoint; the cross-entropy prior
    uses the final checkpoint only. ``real_stats`` may supply precomputed
    ``[(layer_id, mean, var), ...]`` per checkpoint instead of a forward pass
    of ``ds``. Returns the differentiable scalar tensor.
    """
    if not student_traj:
        raise ValueError("student trajectory is empty")
    if len(student_traj) > TRAJ_MAX_CHECKPOINTS:
        raise SizeCapError(f"{len(student_traj)} checkpoints exceed the cap of {TRAJ_MAX_CHECKPOINTS}")
    if len(ds) > TRAJ_MAX_IMAGES or len(images) > TRAJ_MAX_IMAGES:
        raise SizeCapError(f"inputs exceed the cap of {TRAJ_MAX_IMAGES} images")
    x = images if isinstance(images, torch.Tensor) else torch.tensor(np.asarray(images))
    total = x.new_zeros(())
    for t, model in enumerate(student_traj):
        _, syn = forward_with_stats(model, x, bn_mode="running")
        if real_stats is not None:
            real = real_stats[t]
        else:
            with torch.no_grad():
                _, rs = forward_with_stats(model, torch.tensor(ds.images, dtype=x.dtype), bn_mode="running")
            real = rs.per_layer
        ref = {lid: (m, v) for lid, m, v in real}
        for lid, mu, var in syn.per_layer:
            rm, rv = (a.to(x.dtype) if isinstance(a, torch.Tensor) else torch.tensor(np.array(a), dtype=x.dtype)
                      for a in ref[lid])
            total = total + torch.linalg.vector_norm(mu - rm) + torch.linalg.vector_norm(var - rv)
    logits, _ = forward_with_stats(student_traj[-1], x, bn_mode="running")
    y = torch.tensor(np.asarray(hard_labels)).long()
    return total + u * F.cross_entropy(logits, y)
