"""Tiny-scale comparison of unrolled bi-level distillation against pool statistic matching."""

from __future__ import annotations

import tempfile
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch.func import functional_call

from ..data import SyntheticDataset, init_synthetic, load_dataset, select_classes, take_per_class
from ..errors import DegenerateConfigError, SizeCapError
from ..labeling_eval import EvalHP, evaluate
from ..models import build_model, TrainHP
from ..pool import generate_prior_pool
from ..synthesis import SynthesisConfig, distill
from ..utils import derive_seed
from .taylor import bn_mode

MAX_CLASSES = 2
MAX_IMAGES = 500
MAX_INNER_STEPS = 5
MAX_BN_LAYERS = 1


@dataclass
class StudyConfig:
    classes: tuple = (0, 1)
    train_per_class: int = 100
    ipc: int = 5
    arch_id: str = "toy-bn1"
    outer_iterations: int = 200
    inner_steps: int = 3
    inner_lr: float = 1.0
    syn_lr: float = 0.1
    real_batch: int = 100
    u: float = 1.0
    pool_window: tuple = (4, 20, 8)
    eval_every: int = 50
    eval_epochs: int = 100
    eval_seeds: tuple = (0, 1, 2)
    probe_inits: int = 4
    train_dataset: str = "gauss-grid-train"
    test_dataset: str = "gauss-grid-test"
    data_root: str | None = None
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class StudyReport:
    config: dict
    noise_baseline_acc: float
    bilevel: dict
    pool_matching: dict
    gaps: dict
    passed: bool
    runtime_s: float
    notes: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def check_caps(cfg: StudyConfig, n_images: int, bn_layers: int):
    if cfg.inner_steps == 0:
        raise DegenerateConfigError("0 inner steps: the bi-level objective collapses to l(T; θ0), "
                                    "which does not depend on the synthetic images")
    if not 1 <= cfg.inner_steps <= MAX_INNER_STEPS:
        raise SizeCapError(f"inner_steps={cfg.inner_steps} outside [1, {MAX_INNER_STEPS}]")
    if len(cfg.classes) > MAX_CLASSES:
        raise SizeCapError(f"{len(cfg.classes)} classes exceed the cap of {MAX_CLASSES}")
    if n_images > MAX_IMAGES:
        raise SizeCapError(f"{n_images} real images exceed the cap of {MAX_IMAGES}")
    if bn_layers > MAX_BN_LAYERS:
        raise SizeCapError(f"network has {bn_layers} BN layers; the cap is {MAX_BN_LAYERS}")


def bilevel_meta_loss(x_syn, y_syn, theta0, x_real, y_real, inner_steps: int, inner_lr: float):
    """l(T; θ_K) after K unrolled SGD steps on the synthetic batch, differentiable in ``x_syn``.

    Inner steps use batch statistics, as in ordinary training. The outer loss
    normalizes real features with the statistics of the synthetic batch at
    θ_K, standing in for the running statistics a student trained on the
    synthetic set would carry to test time.
    """
    if inner_steps < 1:
        raise DegenerateConfigError("inner_steps must be >= 1")
    net = theta0.module(x_syn.dtype)
    params = {n: p.detach().clone().requires_grad_(True) for n, p in net.named_parameters()}
    with bn_mode(net, "batch"), torch.enable_grad():
        for _ in range(inner_steps):
            inner = F.cross_entropy(functional_call(net, params, (x_syn,)), y_syn)
            grads = torch.autograd.grad(inner, list(params.values()), create_graph=True)
            params = {n: p - inner_lr * g for (n, p), g in zip(params.items(), grads)}
    with bn_mode(net, "capture"), torch.enable_grad():
        functional_call(net, params, (x_syn,))
    try:
        with bn_mode(net, "replay"), torch.enable_grad():
            return F.cross_entropy(functional_call(net, params, (x_real,)), y_real)
    finally:
        for b in net.bn_layers():
            b.captured = None


def _acc(images, init: SyntheticDataset, cfg, test):
    synth = init.with_images(np.clip(images, 0, 1))
    hp = EvalHP(epochs=cfg.eval_epochs, batch_size=len(synth), augment="none", lr=1e-2)
    return evaluate(synth, cfg.arch_id, test, list(cfg.eval_seeds), hp).mean


class _Tracker:
    """Common metrics for both variants at fixed evaluation points."""

    def __init__(self, cfg, init, real, test):
        self.cfg, self.init, self.test = cfg, init, test
        self.inits = [build_model(cfg.arch_id, len(cfg.classes), seed=derive_seed(cfg.seed, "probe", i),
                                  input_shape=real.image_shape) for i in range(cfg.probe_inits)]
        self.x_real = torch.tensor(real.images)
        self.y_real = torch.tensor(real.labels)
        self.y_syn = torch.tensor(init.hard_labels)
        self.points = []

    def measure(self, it, images):
        with torch.enable_grad():
            loss = np.mean([bilevel_meta_loss(images, self.y_syn, t, self.x_real, self.y_real, self.cfg.inner_steps,
                                              self.cfg.inner_lr).item() for t in self.inits])
        acc = _acc(images.numpy(), self.init, self.cfg, self.test)
        self.points.append({"iter": it, "meta_loss": float(loss), "accuracy": float(acc)})

    def hook(self, it, images):
        if (it + 1) % self.cfg.eval_every == 0 or it + 1 == self.cfg.outer_iterations:
            self.measure(it + 1, images)


def run_bilevel(cfg, init, real, tracker):
    x = torch.tensor(init.images, requires_grad=True)
    y = torch.tensor(init.hard_labels)
    opt = torch.optim.Adam([x], lr=cfg.syn_lr, betas=(0.5, 0.9))
    rng = np.random.default_rng(derive_seed(cfg.seed, "bilevel-batches"))
    x_real, y_real = torch.tensor(real.images), torch.tensor(real.labels)
    curve = []
    for it in range(cfg.outer_iterations):
        theta0 = build_model(cfg.arch_id, len(cfg.classes), seed=derive_seed(cfg.seed, "theta0", it),
                             input_shape=real.image_shape)
        idx = torch.as_tensor(rng.choice(len(real), min(cfg.real_batch, len(real)), replace=False))
        loss = bilevel_meta_loss(x, y, theta0, x_real[idx], y_real[idx], cfg.inner_steps, cfg.inner_lr)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        with torch.no_grad():
            x.clamp_(0.0, 1.0)
        curve.append(float(loss.item()))
        tracker.hook(it, x.detach().clone())
    return curve


def run_pool_matching(cfg, init, real, tracker):
    base = build_model(cfg.arch_id, len(cfg.classes), seed=derive_seed(cfg.seed, "pool-matching-base"),
                       input_shape=real.image_shape)
    T_b, T_e, m = cfg.pool_window
    hp = TrainHP(lr=0.05, batch_size=32, seed=derive_seed(cfg.seed, "pool-matching-pool"))
    with tempfile.TemporaryDirectory() as d:
        pool = generate_prior_pool(base, real, T_b, T_e, m, hp, d)
        pool.models()  # load everything before the directory goes away
        scfg = SynthesisConfig(ipc=cfg.ipc, iterations=cfg.outer_iterations, batch_size=len(init),
                               ensemble_n=min(2, len(pool)), u=cfg.u, lr=cfg.syn_lr, init_mode="noise",
                               seed=cfg.seed)
        _, history = distill(pool, real, scfg, init=init, callback=tracker.hook)
    return [h.total for h in history]


def taylor_vs_exact_training_study(cfg: StudyConfig | None = None) -> StudyReport:
    """Run both variants from one noise initialization and report the three gap fields.

    Gaps are bi-level minus statistic matching: average meta-loss over the
    evaluation points (the unrolled objective measured on a fixed set of
    initializations for both), average accuracy, and peak accuracy.
    """
    cfg = cfg or StudyConfig()
    t0 = time.perf_counter()
    train = select_classes(load_dataset(cfg.train_dataset, cfg.data_root), cfg.classes)
    test = select_classes(load_dataset(cfg.test_dataset, cfg.data_root), cfg.classes)
    real = take_per_class(train, cfg.train_per_class, seed=derive_seed(cfg.seed, "study-real"))
    probe = build_model(cfg.arch_id, len(cfg.classes), input_shape=real.image_shape)
    check_caps(cfg, len(real), len(probe.bn_layer_ids))

    init = init_synthetic(real, cfg.ipc, "noise", derive_seed(cfg.seed, "study-init"))
    noise_acc = _acc(init.images, init, cfg, test)

    tracks = {}
    curves = {}
    for name, runner in (("bilevel", run_bilevel), ("pool_matching", run_pool_matching)):
        tracker = _Tracker(cfg, init, real, test)
        curves[name] = runner(cfg, init, real, tracker)
        tracks[name] = tracker.points

    def summary(name):
        pts = tracks[name]
        accs = [p["accuracy"] for p in pts]
        return {"loss_curve": curves[name], "eval_points": pts, "final_accuracy": accs[-1],
                "average_accuracy": float(np.mean(accs)), "peak_accuracy": float(np.max(accs)),
                "average_meta_loss": float(np.mean([p["meta_loss"] for p in pts]))}

    a, b = summary("bilevel"), summary("pool_matching")
    gaps = {
        "average_loss_gap": a["average_meta_loss"] - b["average_meta_loss"],
        "average_accuracy_gap": a["average_accuracy"] - b["average_accuracy"],
        "peak_accuracy_gap": a["peak_accuracy"] - b["peak_accuracy"],
    }
    passed = a["final_accuracy"] > noise_acc and b["final_accuracy"] > noise_acc
    return StudyReport(cfg.to_dict(), noise_acc, a, b, gaps, passed, time.perf_counter() - t0)
