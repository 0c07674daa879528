"""Ensemble soft relabeling and from-scratch evaluation of synthetic sets."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .augment import MODES as AUGMENT_MODES
from .augment import augment_batch, cutmix
from .data import LabeledDataset, SyntheticDataset, take_per_class
from .errors import PoolError, UnknownArchitectureError
from .models import ARCHITECTURES, build_model, predict_logits, snapshot_from_module
from .utils import config_hash, derive_seed, torch_generator

log = logging.getLogger(__name__)

SOFT_LABEL_MODES = ("none", "static", "on-the-fly")


def _teachers(pool):
    return pool.models() if hasattr(pool, "models") else list(pool)


@torch.no_grad()
def ensemble_probs(teachers, images, batch_size: int = 256) -> torch.Tensor:
    """Mean over teachers of softmax(logits), float64."""
    total = None
    for t in teachers:
        p = F.softmax(predict_logits(t, images, batch_size).double(), dim=1)
        total = p if total is None else total + p
    return total / len(teachers)


def relabel(synth: SyntheticDataset, pool, augment: str = "none", seed: int = 0) -> SyntheticDataset:
    """Attach soft labels: the whole pool's mean softmax on one augmented view of each image.

    Every teacher sees the same augmented view, so relabeling is linear in
    the pool: the average of relabels over disjoint sub-pools of equal size
    equals the relabel over their union.
    """
    teachers = _teachers(pool)
    if not teachers:
        raise PoolError("pool is empty")
    for t in teachers:
        if t.class_count != synth.class_count:
            raise PoolError(f"pool model classifies {t.class_count} classes, synthetic set has {synth.class_count}")
    x = augment_batch(torch.tensor(synth.images), augment, derive_seed(seed, "relabel"))
    probs = ensemble_probs(teachers, x)
    probs = probs / probs.sum(1, keepdim=True)
    return synth.with_soft_labels(probs.float().numpy())


@dataclass
class EvalHP:
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    schedule: str = "cosine"
    augment: str = "dsa-basic"
    cutmix_beta: float = 1.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.augment not in AUGMENT_MODES:
            raise ValueError(f"unknown augmentation {self.augment!r}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class EvalReport:
    arch_id: str
    seeds: list
    test_accuracies: list
    mean: float
    std: float
    train_config_hash: str
    soft_label_mode: str
    runtime_s: float = 0.0
    train_size: int = 0
    curves: dict = field(default_factory=dict)

    @classmethod
    def from_runs(cls, arch_id, seeds, accs, cfg_hash, mode, **kw) -> "EvalReport":
        accs = [float(a) for a in accs]
        return cls(arch_id, list(seeds), accs, float(np.mean(accs)), float(np.std(accs)), cfg_hash, mode, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        return cls(**d)

    def summary(self) -> str:
        return f"{self.arch_id:<16} {self.soft_label_mode:<10} {100 * self.mean:6.2f} ± {100 * self.std:.2f}"


def _train_arrays(synth):
    if isinstance(synth, LabeledDataset):
        return synth.images, synth.labels, None, synth.class_count
    return synth.images, synth.hard_labels, synth.soft_labels, synth.class_count


def _soft_ce(logits, target):
    return -(target * F.log_softmax(logits, dim=1)).sum(1).mean()


def train_from_scratch(synth, arch_id: str, seed: int, hp: EvalHP, soft_label_mode: str = "none", pool=None,
                       test: LabeledDataset | None = None, curve_every: int = 0):
    """Train one freshly initialized model on ``synth``; returns ``(snapshot, curve)``."""
    images, hard, soft, c = _train_arrays(synth)
    if soft_label_mode == "static" and soft is None:
        raise ValueError("soft_label_mode='static' needs soft labels; run relabel first")
    teachers = None
    if soft_label_mode == "on-the-fly":
        if pool is None:
            raise ValueError("soft_label_mode='on-the-fly' needs a pool")
        teachers = _teachers(pool)
    snap = build_model(arch_id, c, seed=derive_seed(seed, "eval-init"), input_shape=images.shape[1:])
    net = snap.module(fresh=True)
    net.train()
    opt = torch.optim.AdamW(net.parameters(), lr=hp.lr, betas=hp.betas, weight_decay=hp.weight_decay)
    x_all, y_all = torch.tensor(images), torch.tensor(hard)
    s_all = torch.tensor(soft) if soft is not None else None
    gen = torch_generator(derive_seed(seed, "eval-batches"))
    n = len(x_all)
    bs = min(hp.batch_size, n)
    steps_per_epoch = max(1, n // bs)  # drop the ragged tail so BN always sees >= 2 images
    horizon = hp.epochs * steps_per_epoch
    curve, step = [], 0
    for epoch in range(hp.epochs):
        order = torch.randperm(n, generator=gen)
        for b in range(steps_per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            aug_seed = derive_seed(seed, "eval-aug", step)
            xb = augment_batch(x_all[idx], hp.augment, aug_seed)
            if soft_label_mode == "on-the-fly":
                xb, _, _ = cutmix(xb, derive_seed(seed, "cutmix", step), hp.cutmix_beta)
                target = ensemble_probs(teachers, xb).float()
                loss = _soft_ce(net(xb), target)
            elif soft_label_mode == "static":
                loss = _soft_ce(net(xb), s_all[idx])
            else:
                loss = F.cross_entropy(net(xb), y_all[idx])
            f = 0.5 * (1 + math.cos(math.pi * step / horizon)) if hp.schedule == "cosine" else 1.0
            for g in opt.param_groups:
                g["lr"] = hp.lr * f
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
        if curve_every and test is not None and ((epoch + 1) % curve_every == 0 or epoch + 1 == hp.epochs):
            trained = snapshot_from_module(net)
            curve.append((epoch + 1, float(loss.item()), _accuracy(trained, test)))
            net.train()
    return snapshot_from_module(net, stage=step, note=f"eval {arch_id} seed {seed}"), curve


def _accuracy(model, test: LabeledDataset) -> float:
    pred = predict_logits(model, test.images).argmax(1).numpy()
    return float((pred == test.labels).mean())


def evaluate(synth, arch_id: str, test: LabeledDataset, seeds=(0, 1, 2), hp: EvalHP | None = None,
             soft_label_mode: str = "none", pool=None, curve_every: int = 0) -> EvalReport:
    """Train a fresh ``arch_id`` per seed on ``synth``; final-epoch top-1 test accuracy."""
    hp = hp or EvalHP()
    if soft_label_mode not in SOFT_LABEL_MODES:
        raise ValueError(f"soft_label_mode must be one of {SOFT_LABEL_MODES}")
    if arch_id not in ARCHITECTURES:
        raise UnknownArchitectureError(arch_id, ARCHITECTURES)
    _, _, _, c = _train_arrays(synth)
    if test.class_count != c:
        raise ValueError(f"test set has {test.class_count} classes, training set has {c}")
    t0 = time.perf_counter()
    accs, curves = [], {}
    for s in seeds:
        model, curve = train_from_scratch(synth, arch_id, s, hp, soft_label_mode, pool, test, curve_every)
        accs.append(_accuracy(model, test))
        if curve:
            curves[str(s)] = curve
    cfg = {"hp": hp.to_dict(), "arch_id": arch_id, "mode": soft_label_mode}
    report = EvalReport.from_runs(arch_id, seeds, accs, config_hash(cfg), soft_label_mode,
                                  runtime_s=time.perf_counter() - t0, train_size=len(_train_arrays(synth)[1]),
                                  curves=curves)
    log.info("eval %s", report.summary())
    return report


def cross_arch_evaluate(synth, arch_ids, test, seeds=(0, 1, 2), hp: EvalHP | None = None,
                        soft_label_mode: str = "none", pool=None) -> list[EvalReport]:
    if not arch_ids:
        raise ValueError("arch_ids is empty")
    unknown = [a for a in arch_ids if a not in ARCHITECTURES]
    if unknown:
        raise UnknownArchitectureError(unknown[0], ARCHITECTURES)
    reports = [evaluate(synth, a, test, seeds, hp, soft_label_mode, pool) for a in arch_ids]
    for r in reports:
        log.info("%s runtime %.1fs", r.arch_id, r.runtime_s)
    return reports


def random_baseline(ds: LabeledDataset, ipc: int, arch_id: str, test: LabeledDataset, seeds=(0, 1, 2),
                    hp: EvalHP | None = None) -> EvalReport:
    """``ipc`` random real images per class, drawn afresh for every seed, then :func:`evaluate`."""
    accs, t0 = [], time.perf_counter()
    hp = hp or EvalHP()
    for s in seeds:
        subset = take_per_class(ds, ipc, seed=derive_seed(s, "random-baseline"))
        accs.extend(evaluate(subset, arch_id, test, [s], hp).test_accuracies)
    cfg = {"hp": hp.to_dict(), "arch_id": arch_id, "mode": "none", "baseline_ipc": ipc}
    return EvalReport.from_runs(arch_id, seeds, accs, config_hash(cfg), "none",
                                runtime_s=time.perf_counter() - t0, train_size=ipc * ds.class_count)


def format_table(reports) -> str:
    lines = [f"{'arch':<16} {'labels':<10} {'acc (%)':>14}"]
    lines += [r.summary() for r in reports]
    return "\n".join(lines)
