"""Exit criteria, one recorded pass/fail line each (see the terminal summary).

Desk-scale runs need CIFAR-10 in the standard ``cifar-10-batches-py``
layout under ``$POOLSYNTH_DATA_ROOT``. Without it those criteria fail with
a data-missing line and the same pipeline is reported on scikit-learn's
digits as supplementary evidence.
"""

import os
import tempfile
import time

import numpy as np
import pytest
import torch

from poolsynth.data import init_synthetic, load_dataset, take_per_class
from poolsynth.errors import DatasetMissingError
from poolsynth.labeling_eval import EvalHP, evaluate, relabel
from poolsynth.models import TrainHP, build_model, refresh_running_stats
from poolsynth.pipeline import DeskConfig, desk_run, distance_diagnostic, make_base
from poolsynth.pool import generate_prior_pool, prior_window
from poolsynth.synthesis import SynthesisConfig, distill, statistic_matching_loss
from poolsynth.theory import StudyConfig, run_checks, taylor_vs_exact_training_study

pytestmark = pytest.mark.acceptance

SHAPE = (3, 8, 8)


def _results_line(results):
    bad = [r for r in results if not r.passed]
    return "; ".join(r.line() for r in (bad or results[:1]))


# -- 1-4: property suites and oracles ------------------------------------------

def test_criterion_1_theory_suite(criterion):
    t0 = time.perf_counter()
    results = run_checks("gradient_bound_sweep") + run_checks("cosine_identity_sweep")
    results += run_checks("covariance_implies_variance") + run_checks("balanced_mean_reduction")
    dt = time.perf_counter() - t0
    ok = all(r.passed for r in results) and dt < 60
    n_ok = sum(r.passed for r in results)
    criterion(1, ok, f"{n_ok}/{len(results)} checks in {dt:.1f}s; {_results_line(results)}")
    assert ok


def test_criterion_2_taylor_scaling(criterion):
    t0 = time.perf_counter()
    results = run_checks("taylor_quadratic_ratio") + run_checks("taylor_toy_ratio")
    dt = time.perf_counter() - t0
    quad, toy = results
    ok = quad.passed and abs(quad.lhs - 4.0) <= 1e-6 and toy.passed and 3.0 <= toy.lhs <= 5.0 and dt < 60
    criterion(2, ok, f"quadratic ratio {quad.lhs:.9f}, toy-bn1 ratio {toy.lhs:.5f} (alpha 1e-3 vs 5e-4), {dt:.1f}s")
    assert ok


def test_criterion_3_gradient_fd(criterion):
    t0 = time.perf_counter()
    ds = load_dataset("gauss-grid-train")
    teacher = refresh_running_stats(build_model("toy-bn1", 4, seed=3, input_shape=SHAPE), ds.images[100:300])
    x = torch.tensor(ds.images[:8], dtype=torch.float64, requires_grad=True)
    y = torch.tensor(ds.labels[:8])
    (g,) = torch.autograd.grad(statistic_matching_loss(x, y, teacher, u=1.0).tensor, [x])
    flat = x.detach().clone().reshape(-1)
    h, worst = 1e-5, 0.0
    for i in np.random.default_rng(0).choice(flat.numel(), 20, replace=False):
        plus, minus = flat.clone(), flat.clone()
        plus[i] += h
        minus[i] -= h
        fd = (statistic_matching_loss(plus.view_as(x), y, teacher).total
              - statistic_matching_loss(minus.view_as(x), y, teacher).total) / (2 * h)
        an = float(g.reshape(-1)[i])
        worst = max(worst, abs(fd - an) / max(abs(an), abs(fd), 1e-8))
    dt = time.perf_counter() - t0
    ok = worst < 1e-3 and dt < 60
    criterion(3, ok, f"max relative error {worst:.2e} over 20 pixels, {dt:.1f}s")
    assert ok


def test_criterion_4_pool_and_relabel(criterion, tmp_path):
    ds = load_dataset("gauss-grid-train")
    stages = prior_window(11, 46, 5)
    pool = generate_prior_pool(build_model("toy-bn1", 4, input_shape=SHAPE), take_per_class(ds, 10, seed=0),
                               11, 46, 5, TrainHP(lr=0.05, batch_size=20), tmp_path / "pool", unit="step")
    formula_ok = len(stages) == 8 and stages[-1] == 46 and [e.stage for e in pool.entries] == stages
    sums, lin = 0.0, 0.0
    for seed in range(5):
        s = init_synthetic(ds, 3, "real", seed)
        a, b = pool.load(seed), pool.load(7 - seed)
        joint = relabel(s, [a, b], "dsa-basic", seed).soft_labels
        avg = 0.5 * (relabel(s, [a], "dsa-basic", seed).soft_labels.astype(np.float64)
                     + relabel(s, [b], "dsa-basic", seed).soft_labels)
        full = relabel(s, pool, "dsa-basic", seed).soft_labels
        sums = max(sums, float(np.max(np.abs(full.sum(1) - 1))), float(np.max(np.abs(joint.sum(1) - 1))))
        lin = max(lin, float(np.max(np.abs(avg - joint))))
    ok = formula_ok and sums <= 1e-5 and lin <= 1e-6
    criterion(4, ok, f"window 11-46/5 -> {len(pool)} entries {stages}; row-sum dev {sums:.1e}; "
                     f"linearity dev {lin:.1e}")
    assert ok


# -- 5-6: desk run ------------------------------------------------------------

def _cifar():
    root = os.environ.get("POOLSYNTH_DATA_ROOT")
    try:
        train = load_dataset("cifar10-train", root)
        test = load_dataset("cifar10-test", root)
    except DatasetMissingError as exc:
        return None, f"CIFAR-10 unavailable ({exc}); set POOLSYNTH_DATA_ROOT to a cifar-10-batches-py parent"
    return (take_per_class(train, 500, seed=0), test), ""


def _fmt(rep):
    return f"{100 * rep.mean:.2f} ± {100 * rep.std:.2f}"


@pytest.fixture(scope="module")
def desk():
    data, why = _cifar()
    out = {"cifar": None, "why": why}
    if data is not None:
        out["cifar"] = desk_run(*data, DeskConfig())
    # supplementary: identical pipeline on digits (8x8), always reported
    out["digits"] = desk_run(load_dataset("digits-train"), load_dataset("digits-test"), DeskConfig())
    return out


def _summary(r):
    return (f"[{r['train']}, {r['train_size']} train, {r['pool_size']}-teacher pool, {r['runtime_s'] / 60:.1f} min] "
            f"random {_fmt(r['random'])}, distilled hard {_fmt(r['distilled_hard'])}, "
            f"static full-pool {_fmt(r['distilled_static_full'])}, "
            f"static single {_fmt(r['distilled_static_single'])}")


@pytest.mark.slow
def test_criterion_5_desk_run_beats_random(criterion, desk):
    digits = desk["digits"]
    gap = 100 * (digits["distilled_hard"].mean - digits["random"].mean)
    print(f"supplementary digits desk run: {_summary(digits)}; distilled - random = {gap:+.2f} points")
    r = desk["cifar"]
    if r is None:
        criterion(5, False, desk["why"])
        pytest.fail(desk["why"])
    gap = 100 * (r["distilled_hard"].mean - r["random"].mean)
    ok = gap >= 5.0 and r["pool_size"] == 8 and r["runtime_s"] < 45 * 60
    criterion(5, ok, f"{_summary(r)}; gap {gap:+.2f} points (need >= +5)")
    assert ok


@pytest.mark.slow
def test_criterion_6_ensemble_relabel(criterion, desk):
    digits = desk["digits"]
    print(f"supplementary digits: static full - hard = "
          f"{100 * (digits['distilled_static_full'].mean - digits['distilled_hard'].mean):+.2f}, "
          f"full - single = "
          f"{100 * (digits['distilled_static_full'].mean - digits['distilled_static_single'].mean):+.2f} points")
    r = desk["cifar"]
    if r is None:
        criterion(6, False, desk["why"])
        pytest.fail(desk["why"])
    delta = 100 * (r["distilled_static_full"].mean - r["distilled_hard"].mean)
    ens = 100 * (r["distilled_static_full"].mean - r["distilled_static_single"].mean)
    ok = delta >= -1.0
    criterion(6, ok, f"static full - hard = {delta:+.2f} (need >= -1); full-pool - single-model = {ens:+.2f} "
                     f"(report only, expected positive)")
    assert ok


# -- 7-9 ----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_taylor_vs_exact_study(criterion):
    rep = taylor_vs_exact_training_study(StudyConfig())
    fields = {"average_loss_gap", "average_accuracy_gap", "peak_accuracy_gap"}
    ok = rep.passed and fields <= set(rep.gaps)
    gaps = ", ".join(f"{k} {v:+.4f}" for k, v in rep.gaps.items())
    criterion(7, ok, f"noise init {100 * rep.noise_baseline_acc:.1f}, bi-level {100 * rep.bilevel['final_accuracy']:.1f}, "
                     f"pool matching {100 * rep.pool_matching['final_accuracy']:.1f}; {gaps}; {rep.runtime_s:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_8_gpu_tier(criterion):
    if not torch.cuda.is_available() or os.environ.get("POOLSYNTH_GPU_TIER") != "1":
        criterion(8, None, "optional GPU tier: needs CUDA, CIFAR-10 and POOLSYNTH_GPU_TIER=1")
        pytest.skip("optional GPU tier")
    root = os.environ.get("POOLSYNTH_DATA_ROOT")
    train, test = load_dataset("cifar10-train", root), load_dataset("cifar10-test", root)
    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory() as d:
        pool = generate_prior_pool(make_base("convnet-3", train, 0), train, 1, 15, 2,
                                   TrainHP(lr=0.05, batch_size=64), d)
        synth, _ = distill(pool, train, SynthesisConfig(ipc=10, iterations=1000, ensemble_n=3, lr=0.01,
                                                        init_mode="real", batch_size=100))
        rep = evaluate(synth, "resnet-lite-18", test, (0, 1, 2),
                       EvalHP(epochs=300, batch_size=64, augment="dsa-basic"), "none")
    hours = (time.perf_counter() - t0) / 3600
    ok = rep.mean >= 0.48 and hours <= 4
    criterion(8, ok, f"resnet-lite-18 {_fmt(rep)} (need >= 48.0), {hours:.2f} h")
    assert ok


@pytest.mark.slow
def test_criterion_9_distance_diagnostic(criterion):
    windows = [(0, 2, 1), (2, 6, 2), (6, 12, 3), (12, 24, 4)]
    cfg = DeskConfig(eval_hp={"epochs": 100, "batch_size": 64, "augment": "dsa-basic"}, seeds=(0, 1))
    out = distance_diagnostic(load_dataset("digits-train"), load_dataset("digits-test"), windows, cfg)
    rows = "; ".join(f"{r['window']}: KL {r['distance']:.3f} acc {100 * r['accuracy']:.1f}" for r in out["rows"])
    ok = len(out["rows"]) >= 4 and np.isfinite(out["spearman"])
    criterion(9, ok, f"digits, spearman {out['spearman']:+.3f} (report only, expected negative); {rows}")
    assert ok
