"""Closed-form identity and inequality checks on small instances."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np
import torch

from ..errors import DegenerateConfigError, ShapeMismatchError

RELATIONS = ("<=", "≈", "ratio")


@dataclass
class CheckResult:
    check_id: str
    inputs_digest: str
    lhs: float
    rhs: float
    relation: str
    tolerance: float
    passed: bool
    detail: str = ""

    @classmethod
    def evaluate(cls, check_id, lhs, rhs, relation, tolerance, digest="", detail="") -> "CheckResult":
        """``<=``: lhs <= rhs + tol. ``≈`` and ``ratio``: |lhs - rhs| <= tol (for ratio, lhs is the
        observed ratio and rhs its nominal value)."""
        lhs, rhs = float(lhs), float(rhs)
        if relation == "<=":
            ok = lhs <= rhs + tolerance
        elif relation in ("≈", "ratio"):
            ok = abs(lhs - rhs) <= tolerance
        else:
            raise ValueError(f"unknown relation {relation!r}")
        return cls(check_id, digest, lhs, rhs, relation, float(tolerance), bool(ok), detail)

    def to_dict(self):
        return asdict(self)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.check_id}: lhs={self.lhs:.6g} {self.relation} rhs={self.rhs:.6g} "
                f"(tol {self.tolerance:g}) {self.detail}").rstrip()


def digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def combine(check_id, results, detail="") -> CheckResult:
    """Worst case of a sweep: passes only if every member passed."""
    worst = max(results, key=lambda r: (not r.passed, r.lhs - r.rhs))
    n_fail = sum(not r.passed for r in results)
    msg = f"{len(results) - n_fail}/{len(results)} instances pass; worst {worst.check_id}"
    return CheckResult(check_id, digest([r.lhs for r in results], [r.rhs for r in results]), worst.lhs,
                       worst.rhs, worst.relation, worst.tolerance, n_fail == 0,
                       f"{msg}. {detail}".strip())


# -- gradient reduction to feature statistics ----------------------------------

def _second_moment(F):
    return F.T @ F / len(F)


def bound_terms(Ft, Yt, Fs, Ys, W) -> dict:
    """Linear-head gradient-matching quantities in float64.

    With g(X) = (1/N) F^T (F W - Y), the gradient gap is A W - B where A is the
    second-moment gap and B the label-weighted mean gap.
    """
    Ft, Yt, Fs, Ys, W = (np.asarray(a, dtype=np.float64) for a in (Ft, Yt, Fs, Ys, W))
    if Ft.shape[1] != Fs.shape[1] or W.shape[0] != Ft.shape[1]:
        raise ShapeMismatchError(Ft.shape[1:], Fs.shape[1:], what="feature dimension")
    w2 = float((W ** 2).sum())
    if w2 == 0.0:
        raise DegenerateConfigError("the bound divides by ||W||^2; W is zero")
    A = _second_moment(Ft) - _second_moment(Fs)
    B = Ft.T @ Yt / len(Ft) - Fs.T @ Ys / len(Fs)
    gap = A @ W - B
    na, nb = float(np.linalg.norm(A)), float(np.linalg.norm(B))
    return {
        "A": A, "B": B, "w2": w2,
        "lhs": float((gap ** 2).sum()) / w2,
        "rhs": na ** 2 + nb ** 2 / w2,
        "rhs_corrected": (na + nb / np.sqrt(w2)) ** 2,
        "cross": float(np.sum((A @ W) * B)) / w2,
    }


def linear_head_features(probe, images) -> np.ndarray:
    net = probe.module(torch.float64)
    with torch.no_grad():
        return net.features(torch.tensor(np.asarray(images), dtype=torch.float64)).numpy()


def linear_head_W(probe) -> np.ndarray:
    """The trainable map as a [feature_dim, classes] matrix (``fc.weight`` transposed)."""
    return np.asarray(probe.state["fc.weight"], dtype=np.float64).T


def _onehot(y, c):
    y = np.asarray(y)
    return y.astype(np.float64) if y.ndim == 2 else np.eye(c)[y]


def gradient_statistic_bound(X_t, Y_t, X_s, Y_s, probe, W=None, tolerance: float = 1e-9,
                             corrected: bool = False) -> CheckResult:
    """Gradient-matching distance against feature second-moment + mean matching.

    Checks ||g_T - g_S||^2 / ||W||^2 <= ||A||^2 + ||B||^2 / ||W||^2 as stated.
    Expanding the left side leaves a cross term -2<AW, B>/||W||^2 that the
    stated bound drops, so it can fail whenever <AW, B> < 0. ``corrected=True``
    checks the always-valid (||A|| + ||B|| / ||W||)^2 instead.
    """
    if probe.arch_id != "linear-head":
        raise ValueError("gradient_statistic_bound needs a linear-head probe")
    c = probe.class_count
    Ft, Fs = linear_head_features(probe, X_t), linear_head_features(probe, X_s)
    W = linear_head_W(probe) if W is None else np.asarray(W, dtype=np.float64)
    t = bound_terms(Ft, _onehot(Y_t, c), Fs, _onehot(Y_s, c), W)
    rhs = t["rhs_corrected"] if corrected else t["rhs"]
    check = "gradient_bound_corrected" if corrected else "gradient_bound"
    return CheckResult.evaluate(check, t["lhs"], rhs, "<=", tolerance, digest(X_t, X_s, W),
                                f"cross term <AW,B>/||W||^2 = {t['cross']:.3g}")


def equality_case_fixture(seed: int = 0, n: int = 8, fd: int = 4, c: int = 3) -> dict:
    """Feature-level instance where the stated bound is tight.

    Orthogonal feature columns make A rank one along e_0; W is supported on
    row 0 (so ||AW|| = ||A|| ||W||) and chosen orthogonal to B's first row
    (so <AW, B> = 0).
    """
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(n, fd)))
    Ft = q * np.linspace(2.0, 0.5, fd)
    Fs = Ft.copy()
    Fs[:, 0] *= 0.5
    Yt = np.eye(c)[np.arange(n) % c]
    Ys = np.eye(c)[(np.arange(n) + 1) % c]
    B0 = Ft[:, 0] @ Yt / n - Fs[:, 0] @ Ys / n
    v = rng.normal(size=c)
    v -= (v @ B0) / (B0 @ B0) * B0
    W = np.zeros((fd, c))
    W[0] = v
    return {"Ft": Ft, "Yt": Yt, "Fs": Fs, "Ys": Ys, "W": W}


def gradient_bound_equality(seed: int = 0, tolerance: float = 1e-6) -> CheckResult:
    f = equality_case_fixture(seed)
    t = bound_terms(f["Ft"], f["Yt"], f["Fs"], f["Ys"], f["W"])
    return CheckResult.evaluate("gradient_bound_equality", t["lhs"], t["rhs"], "≈", tolerance,
                                digest(f["Ft"], f["Fs"], f["W"]), "AW orthogonal to B, ||AW|| = ||A|| ||W||")


def random_linear_head_instance(rng, image_shape=(1, 4, 4), max_n: int = 16, max_fd: int = 8):
    """One random small instance: (X_t, Y_t, X_s, Y_s, probe)."""
    from ..models import build_model

    fd = int(rng.integers(2, max_fd + 1))
    c = int(rng.integers(2, 5))
    nt, ns = int(rng.integers(2, max_n + 1)), int(rng.integers(2, max_n + 1))
    probe = build_model("linear-head", c, seed=int(rng.integers(2 ** 31)), input_shape=image_shape,
                        feature_dim=fd)
    X_t = rng.uniform(size=(nt,) + tuple(image_shape))
    X_s = rng.uniform(size=(ns,) + tuple(image_shape))
    return X_t, rng.integers(0, c, nt), X_s, rng.integers(0, c, ns), probe


def gradient_bound_sweep(n: int = 100, seed: int = 0, corrected: bool = False) -> CheckResult:
    rng = np.random.default_rng(seed)
    results = [gradient_statistic_bound(*random_linear_head_instance(rng), corrected=corrected) for _ in range(n)]
    name = "gradient_bound_corrected_sweep" if corrected else "gradient_bound_sweep"
    return combine(name, results, f"{n} random linear-head instances")


def gradient_bound_rank1_search(draws: int = 1000, seed: int = 0, corrected: bool = False) -> CheckResult:
    """Fix one instance and search rank-1 W = a b^T for a violation."""
    rng = np.random.default_rng(seed)
    X_t, Y_t, X_s, Y_s, probe = random_linear_head_instance(rng)
    fd = linear_head_W(probe).shape[0]
    results = []
    for _ in range(draws):
        W = np.outer(rng.normal(size=fd), rng.normal(size=probe.class_count))
        results.append(gradient_statistic_bound(X_t, Y_t, X_s, Y_s, probe, W=W, corrected=corrected))
    name = "gradient_bound_corrected_rank1" if corrected else "gradient_bound_rank1"
    return combine(name, results, f"{draws} rank-1 W draws")


# -- second moments and class means --------------------------------------------

def covariance_implies_variance(F_t, F_s, tolerance: float = 1e-9) -> CheckResult:
    """Equal second-moment matrices force equal diagonals; in general diag gap <= full gap."""
    F_t, F_s = np.asarray(F_t, np.float64), np.asarray(F_s, np.float64)
    if F_t.ndim != 2 or F_s.ndim != 2 or F_t.shape[1] != F_s.shape[1]:
        raise ShapeMismatchError(F_t.shape[1:], F_s.shape[1:], what="feature dimension")
    D = _second_moment(F_t) - _second_moment(F_s)
    full = float(np.linalg.norm(D))
    diag = float(np.linalg.norm(np.diag(D)))
    if full <= tolerance:
        return CheckResult.evaluate("covariance_implies_variance", diag, 0.0, "<=", tolerance, digest(F_t, F_s),
                                    "second moments match; diagonal must match")
    return CheckResult.evaluate("covariance_implies_variance", diag, full, "<=", tolerance, digest(F_t, F_s),
                                f"second moments differ (frobenius gap {full:.3g}); diagonal gap reported")


def _features(X, f):
    X = np.asarray(X, np.float64)
    out = f(X) if f is not None else X.reshape(len(X), -1)
    return np.asarray(out, np.float64)


def balanced_mean_reduction(X, labels, f=None, class_count: int | None = None, strict: bool = True,
                            other=None, tolerance: float = 1e-9) -> CheckResult:
    """Label-weighted mean (1/N) F^T Y against per-class means times class fractions.

    With balanced labels the class fractions are all 1/c, so the global mean is
    the average of class means. ``other=(X2, labels2)`` adds the implication
    check: matching class means imply matching global means.
    """
    labels = np.asarray(labels)
    c = int(class_count or labels.max() + 1)
    counts = np.bincount(labels, minlength=c)
    if strict and len(set(counts.tolist())) != 1:
        raise ValueError(f"labels are not balanced: {counts.tolist()}")
    F = _features(X, f)
    N = len(F)
    M = F.T @ np.eye(c)[labels] / N
    dev = 0.0
    for k in range(c):
        if counts[k]:
            mu_k = F[labels == k].mean(0)
            dev = max(dev, float(np.abs(M[:, k] - mu_k * counts[k] / N).max()))
    if not strict and np.count_nonzero(counts) == 1:
        k = int(np.flatnonzero(counts)[0])
        dev = max(dev, float(np.abs(M[:, k] - F.mean(0)).max()))
    if len(set(counts[counts > 0].tolist())) == 1:
        present = counts > 0
        class_means = np.stack([F[labels == k].mean(0) for k in np.flatnonzero(present)])
        dev = max(dev, float(np.abs(class_means.mean(0) - F.mean(0)).max()))
    detail = "column k = class-k mean x n_k/N"
    if other is not None:
        X2, l2 = other
        F2 = _features(X2, f)
        l2 = np.asarray(l2)
        m1 = np.stack([F[labels == k].mean(0) for k in range(c)])
        m2 = np.stack([F2[l2 == k].mean(0) for k in range(c)])
        if np.abs(m1 - m2).max() <= tolerance:
            dev = max(dev, float(np.abs(F.mean(0) - F2.mean(0)).max()))
            detail += "; matched class means give matched global means"
        else:
            detail += "; class means differ, implication vacuous"
    return CheckResult.evaluate("balanced_mean_reduction", dev, 0.0, "≈", tolerance, digest(F, labels), detail)


# -- cosine form ------------------------------------------------------------------

def cosine_identity_check(g_a, g_b, tolerance: float = 1e-9) -> CheckResult:
    """-e_a . e_b = 0.5 ||e_a - e_b||^2 - 1 for unit vectors e."""
    g_a, g_b = np.asarray(g_a, np.float64).ravel(), np.asarray(g_b, np.float64).ravel()
    na, nb = np.linalg.norm(g_a), np.linalg.norm(g_b)
    if na == 0 or nb == 0:
        raise DegenerateConfigError("cosine identity needs nonzero vectors")
    ea, eb = g_a / na, g_b / nb
    return CheckResult.evaluate("cosine_identity", -ea @ eb, 0.5 * np.sum((ea - eb) ** 2) - 1.0, "≈", tolerance,
                                digest(g_a, g_b))


def cosine_identity_sweep(n: int = 1000, seed: int = 0, tolerance: float = 1e-9) -> CheckResult:
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(n):
        d = int(rng.integers(2, 65))
        results.append(cosine_identity_check(rng.normal(size=d), rng.normal(size=d), tolerance))
    devs = [abs(r.lhs - r.rhs) for r in results]
    return CheckResult.evaluate("cosine_identity_sweep", max(devs), 0.0, "≈", tolerance, digest(devs),
                                f"max deviation over {n} pairs, dims 2-64")


# -- Lipschitz bound on the linear head -------------------------------------------

def lipschitz_bound_check(probe, X_t, Y_t, W_s, W_t, tolerance: float = 1e-9) -> CheckResult:
    """||F W_s - Y|| <= beta ||W_s - W_t|| + ||F W_t - Y|| with beta = ||F||_2 (spectral norm).

    Only the triangle and Lipschitz steps are checked; beta is exact because the
    feature map is fixed.
    """
    F = linear_head_features(probe, X_t)
    Y = _onehot(Y_t, probe.class_count)
    W_s, W_t = np.asarray(W_s, np.float64), np.asarray(W_t, np.float64)
    beta = float(np.linalg.norm(F, 2))
    lhs = float(np.linalg.norm(F @ W_s - Y))
    rhs = beta * float(np.linalg.norm(W_s - W_t)) + float(np.linalg.norm(F @ W_t - Y))
    return CheckResult.evaluate("lipschitz_bound", lhs, rhs, "<=", tolerance, digest(F, W_s, W_t),
                                f"beta = {beta:.4g}")


def lipschitz_sweep(n: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(n):
        X_t, Y_t, _, _, probe = random_linear_head_instance(rng)
        shape = linear_head_W(probe).shape
        results.append(lipschitz_bound_check(probe, X_t, Y_t, rng.normal(size=shape), rng.normal(size=shape)))
    return combine("lipschitz_sweep", results, f"{n} random linear-head instances")
