"""End-to-end desk runs: pool, distill, relabel, evaluate.

All randomness derives from one top-level seed: ``derive_seed(seed, phase)``
for phases ``"dataset"``, ``"base"``, ``"pool"``, ``"distill"``, ``"relabel"``
and ``"eval"``.
"""

from __future__ import annotations

import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (LabeledDataset, channel_stats, load_dataset, select_classes, subsample_imbalanced,
                   take_per_class)
from .labeling_eval import EvalHP, evaluate, random_baseline, relabel, train_from_scratch
from .models import TrainHP, build_model, load_model, train_epochs
from .pool import PoolManifest, generate_prior_pool, pool_distance, distance_accuracy_correlation
from .synthesis import SynthesisConfig, distill
from .utils import derive_seed

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "POOLSYNTH_DATA_ROOT"
OUTPUT_ROOT_ENV = "POOLSYNTH_OUTPUT_ROOT"


def data_root(explicit=None):
    return explicit or os.environ.get(DATA_ROOT_ENV)


def resolve_output(path) -> Path:
    """Relative paths land under ``$POOLSYNTH_OUTPUT_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def resolve_dataset(spec: dict, seed: int = 0) -> LabeledDataset:
    """Dataset from a config block: ``{name, root?, classes?, per_class?, imbalanced?}``."""
    ds = load_dataset(spec["name"], data_root(spec.get("root")))
    if spec.get("classes") is not None:
        ds = select_classes(ds, spec["classes"])
    if spec.get("per_class") is not None:
        ds = take_per_class(ds, int(spec["per_class"]), seed=derive_seed(seed, "dataset", spec["name"]))
    imb = spec.get("imbalanced")
    if imb:
        ds = subsample_imbalanced(ds, imb["min_frac"], imb["max_frac"], derive_seed(seed, "imbalanced"))
    return ds


def make_base(arch_id: str, ds: LabeledDataset, seed: int, path=None, pretrain_epochs: int = 0,
              hp: TrainHP | None = None, **options):
    """Load a base checkpoint, or build one normalized to ``ds`` (optionally pretrained)."""
    if path is not None:
        return load_model(path)
    mean, std = channel_stats(ds)
    base = build_model(arch_id, ds.class_count, seed=derive_seed(seed, "base"), input_shape=ds.image_shape,
                       input_norm=(mean, std), **options)
    if pretrain_epochs:
        base = train_epochs(base, ds, pretrain_epochs, hp or TrainHP(seed=derive_seed(seed, "pretrain")))
    return base


@dataclass
class DeskConfig:
    arch_id: str = "convnet-3"
    ipc: int = 10
    window: tuple = (1, 15, 2)  # T_b, T_e, m in epochs -> 8 teachers
    pool_hp: dict = field(default_factory=lambda: {"lr": 0.05, "batch_size": 64})
    synthesis: dict = field(default_factory=lambda: {"iterations": 300, "ensemble_n": 3, "u": 1.0, "lr": 0.01,
                                                     "init_mode": "real", "batch_size": 100, "augment": "none"})
    eval_hp: dict = field(default_factory=lambda: {"epochs": 300, "batch_size": 64, "augment": "dsa-basic"})
    relabel_augment: str = "none"
    seeds: tuple = (0, 1, 2)
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def desk_run(train: LabeledDataset, test: LabeledDataset, cfg: DeskConfig | None = None, workdir=None) -> dict:
    """Prior pool -> distill -> relabel -> evaluations, with the reference baselines.

    Returns accuracies for: random real subset, distilled with hard labels,
    distilled with full-pool static soft labels, and with single-model soft
    labels (the last teacher of the pool).
    """
    cfg = cfg or DeskConfig()
    t0 = time.perf_counter()
    eval_hp = EvalHP(**cfg.eval_hp)
    own_tmp = workdir is None
    tmp = tempfile.TemporaryDirectory() if own_tmp else None
    root = Path(tmp.name if own_tmp else workdir)
    try:
        base = make_base(cfg.arch_id, train, cfg.seed)
        T_b, T_e, m = cfg.window
        pool = generate_prior_pool(base, train, T_b, T_e, m,
                                   TrainHP(**{**cfg.pool_hp, "seed": derive_seed(cfg.seed, "pool")}), root / "pool")
        timings = {"pool_s": time.perf_counter() - t0}
        scfg = SynthesisConfig(ipc=cfg.ipc, seed=derive_seed(cfg.seed, "distill"), **cfg.synthesis)
        t1 = time.perf_counter()
        synth, history = distill(pool, train, scfg)
        timings["distill_s"] = time.perf_counter() - t1
        seeds = list(cfg.seeds)
        t2 = time.perf_counter()
        rand = random_baseline(train, cfg.ipc, cfg.arch_id, test, seeds, eval_hp)
        hard = evaluate(synth, cfg.arch_id, test, seeds, eval_hp, "none")
        rseed = derive_seed(cfg.seed, "relabel")
        full = relabel(synth, pool, cfg.relabel_augment, rseed)
        static_full = evaluate(full, cfg.arch_id, test, seeds, eval_hp, "static")
        single = relabel(synth, [pool.load(len(pool) - 1)], cfg.relabel_augment, rseed)
        static_single = evaluate(single, cfg.arch_id, test, seeds, eval_hp, "static")
        timings["eval_s"] = time.perf_counter() - t2
    finally:
        if own_tmp:
            tmp.cleanup()
    return {
        "train": train.name, "train_size": len(train), "pool_size": len(pool),
        "pool_stages": [e.stage for e in pool.entries],
        "loss_initial": history[0].total, "loss_final": history[-1].total,
        "random": rand, "distilled_hard": hard, "distilled_static_full": static_full,
        "distilled_static_single": static_single,
        "runtime_s": time.perf_counter() - t0, "timings": timings,
    }


def distance_diagnostic(train: LabeledDataset, test: LabeledDataset, windows, cfg: DeskConfig | None = None,
                        probe_size: int = 500) -> dict:
    """Pools at increasing stage windows: pool-to-student KL distance against distilled accuracy.

    The student for each window is a model trained from scratch on that
    window's distilled set (first evaluation seed).
    """
    cfg = cfg or DeskConfig()
    eval_hp = EvalHP(**cfg.eval_hp)
    probe = test.subset(np.arange(min(probe_size, len(test))))
    dists, accs, rows = [], [], []
    with tempfile.TemporaryDirectory() as d:
        base = make_base(cfg.arch_id, train, cfg.seed)
        hp = TrainHP(**{**cfg.pool_hp, "seed": derive_seed(cfg.seed, "pool")})
        for i, (T_b, T_e, m) in enumerate(windows):
            pool = generate_prior_pool(base, train, T_b, T_e, m, hp, Path(d) / f"pool{i}")
            scfg = SynthesisConfig(ipc=cfg.ipc, seed=derive_seed(cfg.seed, "distill"),
                                   **{**cfg.synthesis, "ensemble_n": min(cfg.synthesis.get("ensemble_n", 3),
                                                                         len(pool))})
            synth, _ = distill(pool, train, scfg)
            report = evaluate(synth, cfg.arch_id, test, list(cfg.seeds), eval_hp)
            student, _ = train_from_scratch(synth, cfg.arch_id, cfg.seeds[0], eval_hp)
            dist = pool_distance(pool, student, probe)
            dists.append(dist)
            accs.append(report.mean)
            rows.append({"window": [T_b, T_e, m], "distance": dist, "accuracy": report.mean})
            log.info("window %s distance %.4f acc %.4f", (T_b, T_e, m), dist, report.mean)
    return {"rows": rows, "spearman": distance_accuracy_correlation(dists, accs)}
