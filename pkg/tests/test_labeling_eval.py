import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poolsynth.data import SyntheticDataset, init_synthetic, take_per_class
from poolsynth.errors import PoolError, UnknownArchitectureError
from poolsynth.labeling_eval import (EvalHP, EvalReport, cross_arch_evaluate, ensemble_probs, evaluate,
                                     format_table, random_baseline, relabel)
from poolsynth.models import build_model

SHAPE = (3, 8, 8)
FAST = EvalHP(epochs=15, batch_size=16, augment="none", lr=1e-2)


def constant_model(probs):
    m = build_model("toy-bn1", len(probs), input_shape=SHAPE)
    return m.replace({"fc.weight": np.zeros_like(m.state["fc.weight"]),
                      "fc.bias": np.log(np.asarray(probs, dtype=np.float32))})


def _synth2(seed=0):
    rng = np.random.default_rng(seed)
    return SyntheticDataset(rng.uniform(size=(6,) + SHAPE), np.tile([0, 1], 3), 3, 2)


def test_uniform_soft_labels():
    m = build_model("toy-bn1", 2, input_shape=SHAPE)
    zero = m.replace({"fc.weight": np.zeros_like(m.state["fc.weight"]), "fc.bias": np.zeros(2, np.float32)})
    out = relabel(_synth2(), [zero])
    assert np.allclose(out.soft_labels, 0.5, atol=1e-7)


def test_probability_mean():
    out = relabel(_synth2(), [constant_model([0.8, 0.2]), constant_model([0.6, 0.4])])
    assert np.allclose(out.soft_labels, [[0.7, 0.3]] * 6, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(aug=st.sampled_from(["none", "flip", "dsa-basic"]), seed=st.integers(0, 10**6),
       k=st.integers(1, 3))
def test_soft_rows_are_distributions(aug, seed, k):
    from poolsynth.data import load_dataset

    ds = load_dataset("gauss-grid-train")
    teachers = [build_model("toy-bn1", 4, seed=seed + i, input_shape=SHAPE) for i in range(k)]
    out = relabel(init_synthetic(ds, 2, "noise", seed), teachers, aug, seed)
    assert np.all(out.soft_labels >= 0)
    assert np.max(np.abs(out.soft_labels.sum(1) - 1)) <= 1e-5


@settings(max_examples=15, deadline=None)
@given(aug=st.sampled_from(["none", "dsa-basic"]), seed=st.integers(0, 10**6))
def test_relabel_linearity(aug, seed):
    from poolsynth.data import load_dataset

    ds = load_dataset("gauss-grid-train")
    a = build_model("convnet-3", 4, seed=seed, input_shape=SHAPE)
    b = build_model("toy-bn1", 4, seed=seed + 1, input_shape=SHAPE)
    s = init_synthetic(ds, 2, "real", seed)
    avg = 0.5 * (relabel(s, [a], aug, seed).soft_labels.astype(np.float64)
                 + relabel(s, [b], aug, seed).soft_labels)
    joint = relabel(s, [a, b], aug, seed).soft_labels
    assert np.max(np.abs(avg - joint)) <= 1e-6


def test_relabel_class_mismatch():
    with pytest.raises(PoolError):
        relabel(_synth2(), [build_model("toy-bn1", 3, input_shape=SHAPE)])
    with pytest.raises(PoolError):
        relabel(_synth2(), [])


def test_ensemble_probs_float64():
    p = ensemble_probs([constant_model([0.25, 0.75])], np.zeros((2,) + SHAPE, np.float32))
    assert p.dtype.is_floating_point and str(p.dtype) == "torch.float64"


def test_report_statistics_recompute():
    r = EvalReport.from_runs("convnet-3", [0, 1, 2], [0.5, 0.6, 0.8], "h", "none")
    accs = np.array(r.test_accuracies)
    assert r.mean == float(np.mean(accs)) and r.std == float(np.std(accs))
    assert EvalReport.from_dict(r.to_dict()) == r
    assert "63.33 ± 12.47" in format_table([r])


def test_evaluate_does_not_mutate(grid, grid_test, toy_pool):
    synth = relabel(init_synthetic(grid, 3, "real", 0), toy_pool)
    images, soft = synth.images.copy(), synth.soft_labels.copy()
    sums = [m.checksum() for m in toy_pool.models()]
    evaluate(synth, "toy-bn1", grid_test, [0], FAST, "on-the-fly", toy_pool)
    evaluate(synth, "toy-bn1", grid_test, [0], FAST, "static")
    assert np.array_equal(synth.images, images) and np.array_equal(synth.soft_labels, soft)
    assert [m.checksum() for m in toy_pool.models()] == sums


def test_full_fixture_equals_direct_training(grid_small, grid_test):
    rows = [np.flatnonzero(grid_small.labels == k) for k in range(4)]
    order = np.stack(rows, axis=1).reshape(-1)  # ipc-major layout
    synth = SyntheticDataset(grid_small.images[order], grid_small.labels[order], 25, 4)
    a = evaluate(synth, "toy-bn1", grid_test, [0, 1], FAST)
    b = evaluate(grid_small.subset(order), "toy-bn1", grid_test, [0, 1], FAST)
    assert abs(a.mean - b.mean) <= 0.02


def test_real_init_beats_noise(grid, grid_test):
    hp = EvalHP(epochs=30, batch_size=16, augment="none", lr=1e-2)
    real = evaluate(init_synthetic(grid, 10, "real", 0), "convnet-3", grid_test, [0, 1, 2], hp)
    noise = evaluate(init_synthetic(grid, 10, "noise", 0), "convnet-3", grid_test, [0, 1, 2], hp)
    assert real.mean >= noise.mean


def test_mode_preconditions(grid, grid_test):
    synth = init_synthetic(grid, 2, "real", 0)
    with pytest.raises(ValueError):
        evaluate(synth, "toy-bn1", grid_test, [0], FAST, "static")
    with pytest.raises(ValueError):
        evaluate(synth, "toy-bn1", grid_test, [0], FAST, "on-the-fly")
    with pytest.raises(ValueError):
        evaluate(synth, "toy-bn1", grid_test, [0], FAST, "sharpened")
    with pytest.raises(UnknownArchitectureError):
        evaluate(synth, "vit", grid_test, [0], FAST)


def test_cross_arch(grid, grid_test):
    synth = init_synthetic(grid, 2, "real", 0)
    hp = EvalHP(epochs=3, batch_size=8, augment="none")
    reps = cross_arch_evaluate(synth, ["convnet-3", "resnet-lite-18"], grid_test, [0], hp)
    assert [r.arch_id for r in reps] == ["convnet-3", "resnet-lite-18"]
    assert all(r.runtime_s > 0 and len(r.test_accuracies) == 1 for r in reps)
    single = evaluate(synth, "convnet-3", grid_test, [0], hp)
    assert single.test_accuracies == reps[0].test_accuracies
    with pytest.raises(ValueError):
        cross_arch_evaluate(synth, [], grid_test)
    with pytest.raises(UnknownArchitectureError):
        cross_arch_evaluate(synth, ["convnet-3", "mlp"], grid_test)


def test_random_baseline_exhaustive(grid_small, grid_test):
    base = random_baseline(grid_small, 25, "toy-bn1", grid_test, [0, 1], FAST)
    direct = evaluate(grid_small, "toy-bn1", grid_test, [0, 1], FAST)
    assert base.test_accuracies == direct.test_accuracies


def test_random_baseline_seed_sensitivity(grid, grid_test):
    r = random_baseline(grid, 1, "toy-bn1", grid_test, [0, 1, 2, 3, 4], FAST)
    assert r.std > 0


def test_random_baseline_insufficient(toy):
    from poolsynth.errors import InsufficientSamplesError

    with pytest.raises(InsufficientSamplesError):
        random_baseline(toy, 5, "toy-bn1", toy, [0], FAST)


def test_eval_hp_validation():
    with pytest.raises(ValueError):
        EvalHP(augment="autoaugment")
    with pytest.raises(ValueError):
        EvalHP(epochs=0)
