"""Mini-batch SGD-with-momentum training of snapshots."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn.functional as F

from ..utils import derive_seed, torch_generator
from .snapshot import ModelSnapshot, snapshot_from_module


@dataclass
class TrainHP:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    schedule: str = "cosine"  # cosine | constant | step
    horizon: int | None = None  # steps spanned by the schedule; defaults to the call's step count
    step_size: int = 30  # for "step", in steps
    gamma: float = 0.1
    flip: bool = False
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def lr_factor(schedule: str, step: int, horizon: int, step_size: int = 30, gamma: float = 0.1) -> float:
    if schedule == "constant" or horizon <= 0:
        return 1.0
    if schedule == "cosine":
        return 0.5 * (1.0 + math.cos(math.pi * min(step, horizon) / horizon))
    if schedule == "step":
        return gamma ** (step // max(1, step_size))
    raise ValueError(f"unknown lr schedule {schedule!r}")


class Trainer:
    """Owns one trainable copy of a snapshot and advances it batch by batch.

    Batch order comes from a generator seeded by ``(hp.seed, start stage)``,
    so identical arguments give identical trajectories.
    """

    def __init__(self, model: ModelSnapshot, ds, hp: TrainHP, horizon: int | None = None):
        self.start = model
        self.ds = ds
        self.hp = hp
        self.net = model.module(fresh=True)
        self.net.train()
        self.opt = torch.optim.SGD(self.net.parameters(), lr=hp.lr, momentum=hp.momentum,
                                   weight_decay=hp.weight_decay)
        self.horizon = hp.horizon if hp.horizon is not None else (horizon or 0)
        self.gen = torch_generator(derive_seed(hp.seed, "batches", model.stage))
        self.x = torch.tensor(ds.images)
        self.y = torch.tensor(ds.labels)
        self.steps_done = 0
        self.epochs_done = 0
        self._order = torch.empty(0, dtype=torch.long)
        self._cursor = 0

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.y) / self.hp.batch_size)

    def _next_batch(self):
        if self._cursor >= len(self._order):
            self._order = torch.randperm(len(self.y), generator=self.gen)
            self._cursor = 0
        idx = self._order[self._cursor:self._cursor + self.hp.batch_size]
        self._cursor += self.hp.batch_size
        x = self.x[idx]
        if self.hp.flip:
            flip = torch.rand(len(idx), generator=self.gen) < 0.5
            x = torch.where(flip[:, None, None, None], x.flip(-1), x)
        return x, self.y[idx]

    def step(self) -> float:
        f = lr_factor(self.hp.schedule, self.steps_done, self.horizon, self.hp.step_size, self.hp.gamma)
        for g in self.opt.param_groups:
            g["lr"] = self.hp.lr * f
        x, y = self._next_batch()
        if len(y) < 2:  # BN needs at least two samples
            x, y = self._next_batch()
        loss = F.cross_entropy(self.net(x), y)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        self.steps_done += 1
        return loss.item()

    def run_steps(self, n: int) -> list[float]:
        return [self.step() for _ in range(n)]

    def run_epochs(self, n: int) -> list[float]:
        """Full passes; the permutation restarts at each epoch boundary."""
        losses = []
        for _ in range(n):
            self._cursor = len(self._order)
            losses.append(float(np.mean(self.run_steps(self.steps_per_epoch))))
            self.epochs_done += 1
        return losses

    def snapshot(self, stage: int, note: str = "") -> ModelSnapshot:
        return snapshot_from_module(self.net, stage=stage, note=note or self.start.note,
                                    meta={**self.start.meta, "train_hp": self.hp.to_dict()})


def train_steps(model: ModelSnapshot, ds, steps: int, hp: TrainHP) -> ModelSnapshot:
    """Advance ``model`` by ``steps`` SGD updates; returns a new snapshot (stage += steps)."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps == 0:
        return model
    trainer = Trainer(model, ds, hp, horizon=steps)
    trainer.run_steps(steps)
    return trainer.snapshot(stage=model.stage + steps)


def train_epochs(model: ModelSnapshot, ds, epochs: int, hp: TrainHP) -> ModelSnapshot:
    """Epoch-denominated variant: stage advances by ``epochs``."""
    if epochs == 0:
        return model
    trainer = Trainer(model, ds, hp)
    if hp.horizon is None:
        trainer.horizon = epochs * trainer.steps_per_epoch
    trainer.run_epochs(epochs)
    return trainer.snapshot(stage=model.stage + epochs)
