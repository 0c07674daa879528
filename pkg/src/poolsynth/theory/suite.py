"""Named registry of every theory check, as run by ``poolsynth verify``."""

from __future__ import annotations

import fnmatch

import numpy as np

from ..data import init_synthetic, load_dataset, select_classes, take_per_class
from ..models import build_model
from . import checks as C
from . import taylor as TY


def _pair_data(seed=0):
    train = select_classes(load_dataset("gauss-grid-train"), (0, 1))
    return init_synthetic(train, 5, "real", seed), take_per_class(train, 50, seed=seed)


def _fixture_features():
    ds = load_dataset("gauss-grid-train")
    probe = build_model("linear-head", ds.class_count, input_shape=ds.image_shape, feature_dim=8)
    return C.linear_head_features(probe, ds.images), ds.labels, ds.class_count


def check_cov_fixtures():
    F, _, _ = _fixture_features()
    rng = np.random.default_rng(0)
    G = np.random.default_rng(1).normal(size=F.shape)
    return [
        C.covariance_implies_variance(F, F[rng.permutation(len(F))]),
        C.covariance_implies_variance(F, -F),
        C.covariance_implies_variance(F[:200], G[:150]),
    ]


def check_balanced_fixtures():
    hand = np.array([[1.0, 2.0], [3.0, 4.0], [0.0, -2.0], [2.0, 0.0]])
    out = [C.balanced_mean_reduction(hand, [0, 0, 1, 1], class_count=2),
           C.balanced_mean_reduction(hand, [0, 0, 0, 0], class_count=2, strict=False)]
    F, y, c = _fixture_features()
    # a second balanced set with identical class means: reflect each class about its mean
    F2 = np.empty_like(F)
    for k in range(c):
        m = y == k
        F2[m] = 2 * F[m].mean(0) - F[m]
    out.append(C.balanced_mean_reduction(F, y, f=lambda a: a, class_count=c, other=(F2, y)))
    return out


def check_taylor_quadratic():
    S, T = _pair_data()
    lh = build_model("linear-head", 2, input_shape=T.image_shape)
    return [TY.quadratic_scaling_check(lh, S, T, alpha=0.1)]


def check_taylor_toy():
    S, T = _pair_data()
    toy = build_model("toy-bn1", 2, input_shape=T.image_shape, activation="softplus")
    return [TY.toy_scaling_check(toy, S, T, alpha=1e-3)]


def check_taylor_alpha_zero():
    S, T = _pair_data()
    toy = build_model("toy-bn1", 2, input_shape=T.image_shape, activation="softplus")
    r, _ = TY.taylor_residual(toy, S, T, 0.0)
    return [C.CheckResult.evaluate("taylor_alpha_zero", r, 0.0, "≈", 0.0)]


def check_multi_step_collapse():
    S, T = _pair_data()
    toy = build_model("toy-bn1", 2, input_shape=T.image_shape, activation="softplus")
    a, _ = TY.taylor_residual(toy, S, T, 1e-2)
    b, _ = TY.multi_step_residual(toy, S, T, 1e-2, 1)
    return [C.CheckResult.evaluate("multi_step_m1_equals_single", b, a, "≈", 0.0)]


def check_multi_step_dominance(trials: int = 100, alpha: float = 1e-2, need: int = 90):
    train = select_classes(load_dataset("gauss-grid-train"), (0, 1))
    T = take_per_class(train, 50, seed=0)
    wins = 0
    for s in range(trials):
        S = init_synthetic(train, 5, "real", s)
        toy = build_model("toy-bn1", 2, seed=s, input_shape=T.image_shape, activation="softplus")
        r1, _ = TY.multi_step_residual(toy, S, T, alpha, 1)
        r5, _ = TY.multi_step_residual(toy, S, T, alpha, 5)
        wins += r5 >= r1
    # lhs = trials short of the requirement, so "<= 0" means passed
    return [C.CheckResult.evaluate("multi_step_m5_ge_m1", need - wins, 0.0, "<=", 0.0, "",
                                   f"{wins}/{trials} trials with residual(m=5) >= residual(m=1)")]


CHECKS = {
    "gradient_bound_sweep": lambda: [C.gradient_bound_sweep(100)],
    "gradient_bound_rank1": lambda: [C.gradient_bound_rank1_search(1000)],
    "gradient_bound_identical": lambda: [C.gradient_statistic_bound(*_identical_instance())],
    "gradient_bound_equality": lambda: [C.gradient_bound_equality()],
    "gradient_bound_corrected_sweep": lambda: [C.gradient_bound_sweep(100, corrected=True)],
    "gradient_bound_corrected_rank1": lambda: [C.gradient_bound_rank1_search(1000, corrected=True)],
    "cosine_identity_sweep": lambda: [C.cosine_identity_sweep(1000)],
    "covariance_implies_variance": check_cov_fixtures,
    "balanced_mean_reduction": check_balanced_fixtures,
    "taylor_quadratic_ratio": check_taylor_quadratic,
    "taylor_toy_ratio": check_taylor_toy,
    "taylor_alpha_zero": check_taylor_alpha_zero,
    "multi_step_collapse": check_multi_step_collapse,
    "multi_step_dominance": check_multi_step_dominance,
    "lipschitz_sweep": lambda: [C.lipschitz_sweep(100)],
}


def _identical_instance():
    rng = np.random.default_rng(7)
    X_t, Y_t, _, _, probe = C.random_linear_head_instance(rng)
    return X_t, Y_t, X_t, Y_t, probe


def select(selector: str | None = None) -> list[str]:
    """Check names matching a glob (``None`` or ``"all"`` selects everything)."""
    if selector in (None, "all", "*"):
        return list(CHECKS)
    names = [n for n in CHECKS if fnmatch.fnmatch(n, selector)]
    if not names:
        raise KeyError(f"no theory check matches {selector!r}; known: {', '.join(CHECKS)}")
    return names


def run_checks(selector: str | None = None) -> list[C.CheckResult]:
    results = []
    for name in select(selector):
        results.extend(CHECKS[name]())
    return results
