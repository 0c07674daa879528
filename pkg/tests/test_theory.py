import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from poolsynth.data import init_synthetic, take_per_class
from poolsynth.errors import DegenerateConfigError, SizeCapError
from poolsynth.models import build_model
from poolsynth.theory import (CheckResult, StudyConfig, balanced_mean_reduction, bilevel_meta_loss, bound_terms,
                              cosine_identity_check, cosine_identity_sweep, covariance_implies_variance,
                              gradient_bound_equality, gradient_bound_rank1_search, gradient_bound_sweep,
                              gradient_statistic_bound, lipschitz_sweep, multi_step_residual,
                              quadratic_scaling_check, residual_ratio, taylor_residual, toy_scaling_check)
from poolsynth.theory.checks import random_linear_head_instance
from poolsynth.theory.study import check_caps
from poolsynth.theory.suite import CHECKS, check_balanced_fixtures, check_cov_fixtures, run_checks, select


@pytest.fixture(scope="module")
def pair_sets(pair):
    return init_synthetic(pair, 5, "real", 0), take_per_class(pair, 50, seed=0)


def test_check_result_relations():
    assert CheckResult.evaluate("a", 1.0, 1.0 - 1e-10, "<=", 1e-9).passed
    assert not CheckResult.evaluate("a", 1.0, 0.5, "<=", 1e-9).passed
    assert CheckResult.evaluate("a", 4.0000001, 4.0, "ratio", 1e-6).passed
    assert not CheckResult.evaluate("a", 4.1, 4.0, "≈", 1e-6).passed
    with pytest.raises(ValueError):
        CheckResult.evaluate("a", 1, 1, "<", 0)


# -- gradient bound -----------------------------------------------------------

def test_identical_data_gives_zero():
    X_t, Y_t, _, _, probe = random_linear_head_instance(np.random.default_rng(7))
    r = gradient_statistic_bound(X_t, Y_t, X_t, Y_t, probe)
    assert r.passed and r.lhs == pytest.approx(0, abs=1e-20) and r.rhs == pytest.approx(0, abs=1e-20)


def test_bound_lhs_is_gradient_gap():
    """lhs equals ||g_T - g_S||^2 / ||W||^2 with gradients taken by autograd."""
    import torch.nn.functional as F

    X_t, Y_t, X_s, Y_s, probe = random_linear_head_instance(np.random.default_rng(3))
    net = probe.module(torch.float64, fresh=True)

    def grad(X, Y):
        x = torch.tensor(X)
        onehot = F.one_hot(torch.tensor(Y), probe.class_count).double()
        loss = 0.5 * ((net(x) - onehot) ** 2).sum() / len(x)
        return torch.autograd.grad(loss, [net.fc.weight])[0]

    gap = grad(X_t, Y_t) - grad(X_s, Y_s)
    expected = float((gap ** 2).sum() / (net.fc.weight.detach() ** 2).sum())
    assert gradient_statistic_bound(X_t, Y_t, X_s, Y_s, probe).lhs == pytest.approx(expected, rel=1e-10)


def test_literal_bound_sweep():
    """The stated bound, asserted as specified on 100 random instances."""
    r = gradient_bound_sweep(100)
    assert r.passed, r.line()


def test_literal_bound_rank1():
    assert gradient_bound_rank1_search(1000).passed


def test_corrected_bound_always_holds():
    assert gradient_bound_sweep(100, corrected=True).passed
    assert gradient_bound_rank1_search(1000, corrected=True).passed


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_literal_bound_fails_only_through_cross_term(seed):
    """lhs = ||A||-weighted part + ||B||^2/||W||^2 - 2 cross; a violation needs cross < 0."""
    rng = np.random.default_rng(seed)
    fd, c, n = rng.integers(2, 6), rng.integers(2, 4), rng.integers(2, 10)
    Ft, Fs = rng.normal(size=(n, fd)), rng.normal(size=(n + 1, fd))
    Yt, Ys = np.eye(c)[rng.integers(0, c, n)], np.eye(c)[rng.integers(0, c, n + 1)]
    W = rng.normal(size=(fd, c))
    t = bound_terms(Ft, Yt, Fs, Ys, W)
    AW2 = float(((t["A"] @ W) ** 2).sum()) / t["w2"]
    expanded = AW2 + np.linalg.norm(t["B"]) ** 2 / t["w2"] - 2 * t["cross"]
    assert t["lhs"] == pytest.approx(expanded, rel=1e-9, abs=1e-12)
    assert t["lhs"] <= t["rhs_corrected"] + 1e-9
    if t["lhs"] > t["rhs"] + 1e-9:
        assert t["cross"] < 0


def test_equality_case():
    r = gradient_bound_equality()
    assert r.passed and abs(r.lhs - r.rhs) <= 1e-6


def test_zero_W():
    X_t, Y_t, X_s, Y_s, probe = random_linear_head_instance(np.random.default_rng(0))
    with pytest.raises(DegenerateConfigError):
        gradient_statistic_bound(X_t, Y_t, X_s, Y_s, probe, W=np.zeros((probe.state["fc.weight"].shape[::-1])))


def test_bound_needs_linear_head():
    m = build_model("toy-bn1", 2, input_shape=(1, 4, 4))
    with pytest.raises(ValueError):
        gradient_statistic_bound(np.zeros((2, 1, 4, 4)), [0, 1], np.zeros((2, 1, 4, 4)), [0, 1], m)


# -- second moments, class means, cosine --------------------------------------

def test_permutation_and_sign():
    F = np.random.default_rng(2).normal(size=(20, 5))
    perm = covariance_implies_variance(F, F[::-1].copy())
    sign = covariance_implies_variance(F, -F)
    assert perm.passed and perm.lhs <= 1e-12 and sign.passed and sign.lhs <= 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_t=st.integers(1, 30), n_s=st.integers(1, 30), d=st.integers(1, 10))
def test_diagonal_gap_below_full_gap(seed, n_t, n_s, d):
    rng = np.random.default_rng(seed)
    assert covariance_implies_variance(rng.normal(size=(n_t, d)), rng.normal(size=(n_s, d))).passed


def test_fixture_checks_pass():
    assert all(r.passed for r in check_cov_fixtures())
    assert all(r.passed for r in check_balanced_fixtures())


def test_balanced_hand_arithmetic():
    X = np.array([[1.0, 2.0], [3.0, 4.0], [0.0, -2.0], [2.0, 0.0]])
    M = X.T @ np.eye(2)[[0, 0, 1, 1]] / 4
    # class 0 mean (2, 3), class 1 mean (1, -1), each times 1/2
    assert np.allclose(M[:, 0], [1.0, 1.5]) and np.allclose(M[:, 1], [0.5, -0.5])
    assert balanced_mean_reduction(X, [0, 0, 1, 1], class_count=2).passed


def test_balanced_single_class():
    X = np.random.default_rng(1).normal(size=(6, 3))
    assert balanced_mean_reduction(X, [1] * 6, class_count=2, strict=False).passed
    with pytest.raises(ValueError):
        balanced_mean_reduction(X, [1] * 6, class_count=2)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.integers(1, 5), per=st.integers(1, 6), d=st.integers(1, 6))
def test_matched_class_means_match_globally(seed, c, per, d):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(c), per)
    X = rng.normal(size=(c * per, d))
    X2 = np.empty_like(X)
    for k in range(c):
        m = labels == k
        X2[m] = 2 * X[m].mean(0) - X[m]
    assert balanced_mean_reduction(X, labels, class_count=c, other=(X2, labels)).passed


def test_cosine_examples():
    g = np.array([1.0, 2.0, -3.0])
    aligned, anti = cosine_identity_check(g, 2 * g), cosine_identity_check(g, -g)
    assert aligned.lhs == pytest.approx(-1) and aligned.rhs == pytest.approx(-1)
    assert anti.lhs == pytest.approx(1) and anti.rhs == pytest.approx(1)
    sweep = cosine_identity_sweep(1000)
    assert sweep.passed and sweep.lhs < 1e-9
    with pytest.raises(DegenerateConfigError):
        cosine_identity_check(np.zeros(3), g)


def test_lipschitz():
    assert lipschitz_sweep(100).passed


# -- Taylor residuals ---------------------------------------------------------

def test_quadratic_ratio(pair_sets):
    S, T = pair_sets
    lh = build_model("linear-head", 2, input_shape=T.image_shape)
    r = quadratic_scaling_check(lh, S, T, alpha=0.1)
    assert r.passed and abs(r.lhs - 4.0) <= 1e-6


def test_quadratic_multi_step_tends_to_four(pair_sets):
    S, T = pair_sets
    lh = build_model("linear-head", 2, input_shape=T.image_shape)
    ratios = [residual_ratio(lh, S, T, a, m=3, loss="mse") for a in (1e-1, 1e-2, 1e-3)]
    assert abs(ratios[-1] - 4) < abs(ratios[0] - 4) and abs(ratios[-1] - 4) < 0.05


def test_toy_ratio(pair_sets):
    S, T = pair_sets
    toy = build_model("toy-bn1", 2, input_shape=T.image_shape, activation="softplus")
    r = toy_scaling_check(toy, S, T, alpha=1e-3)
    assert r.passed and 3.0 <= r.lhs <= 5.0


def test_alpha_zero(pair_sets):
    S, T = pair_sets
    toy = build_model("toy-bn1", 2, input_shape=T.image_shape)
    r, comp = taylor_residual(toy, S, T, 0.0)
    assert r == 0.0 and comp["loss_before"] == comp["loss_after"] == comp["first_order"]


def test_components(pair_sets):
    S, T = pair_sets
    toy = build_model("toy-bn1", 2, input_shape=T.image_shape, activation="softplus")
    r, comp = taylor_residual(toy, S, T, 1e-2)
    assert r == pytest.approx(abs(comp["loss_after"] - comp["first_order"]))


def test_m1_collapse(pair_sets):
    S, T = pair_sets
    toy = build_model("toy-bn1", 2, input_shape=T.image_shape, activation="softplus")
    assert multi_step_residual(toy, S, T, 1e-2, 1)[0] == taylor_residual(toy, S, T, 1e-2)[0]


def test_residual_preconditions(pair_sets):
    S, T = pair_sets
    toy = build_model("toy-bn1", 2, input_shape=T.image_shape)
    with pytest.raises(ValueError):
        multi_step_residual(toy, S, T, 1e-2, 0)
    with pytest.raises(ValueError):
        taylor_residual(toy, S, T, -1.0)


def test_multi_step_dominance():
    (r,) = CHECKS["multi_step_dominance"]()
    assert r.passed, r.detail


# -- bi-level comparator ------------------------------------------------------

def test_bilevel_gradient_matches_finite_differences(pair):
    S = init_synthetic(pair, 3, "real", 1)
    T = take_per_class(pair, 20, seed=1)
    theta0 = build_model("toy-bn1", 2, seed=2, input_shape=T.image_shape)
    x = torch.tensor(S.images, dtype=torch.float64, requires_grad=True)
    y = torch.tensor(S.hard_labels)
    xr, yr = torch.tensor(T.images, dtype=torch.float64), torch.tensor(T.labels)
    loss = bilevel_meta_loss(x, y, theta0, xr, yr, 1, 1.0)
    (g,) = torch.autograd.grad(loss, [x])
    flat = x.detach().reshape(-1)
    h = 1e-6
    for i in np.random.default_rng(0).choice(flat.numel(), 20, replace=False):
        p, m = flat.clone(), flat.clone()
        p[i] += h
        m[i] -= h
        with torch.no_grad():
            fd = (bilevel_meta_loss(p.view_as(x), y, theta0, xr, yr, 1, 1.0)
                  - bilevel_meta_loss(m.view_as(x), y, theta0, xr, yr, 1, 1.0)) / (2 * h)
        an = float(g.reshape(-1)[i])
        assert abs(float(fd) - an) <= 1e-3 * max(abs(an), 1e-7), (i, float(fd), an)


def test_bilevel_zero_inner_steps(pair):
    S = init_synthetic(pair, 2, "real", 0)
    theta0 = build_model("toy-bn1", 2, input_shape=S.images.shape[1:])
    x = torch.tensor(S.images)
    with pytest.raises(DegenerateConfigError):
        bilevel_meta_loss(x, torch.tensor(S.hard_labels), theta0, x, torch.tensor(S.hard_labels), 0, 1.0)


def test_study_caps():
    with pytest.raises(DegenerateConfigError):
        check_caps(StudyConfig(inner_steps=0), 100, 1)
    with pytest.raises(SizeCapError):
        check_caps(StudyConfig(inner_steps=6), 100, 1)
    with pytest.raises(SizeCapError):
        check_caps(StudyConfig(classes=(0, 1, 2)), 100, 1)
    with pytest.raises(SizeCapError):
        check_caps(StudyConfig(), 501, 1)
    with pytest.raises(SizeCapError):
        check_caps(StudyConfig(), 100, 2)


# -- registry -----------------------------------------------------------------

def test_select():
    assert select("all") == list(CHECKS)
    assert select("gradient_bound_corrected*") == ["gradient_bound_corrected_sweep", "gradient_bound_corrected_rank1"]
    with pytest.raises(KeyError):
        select("nope*")


def test_run_checks_subset():
    results = run_checks("cosine*")
    assert len(results) == 1 and results[0].passed
