"""First-order Taylor residuals of gradient steps, evaluated in float64."""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
import torch
import torch.nn.functional as F
from torch.func import functional_call

from ..errors import DegenerateConfigError
from .checks import CheckResult, digest


def _arrays(ds):
    labels = ds.hard_labels if hasattr(ds, "hard_labels") else ds.labels
    return torch.tensor(np.asarray(ds.images), dtype=torch.float64), torch.tensor(np.asarray(labels))


@contextmanager
def bn_mode(net, mode):
    bns = net.bn_layers()
    prev = [b.mode for b in bns]
    for b in bns:
        b.mode = mode
    try:
        yield net
    finally:
        for b, m in zip(bns, prev):
            b.mode = m


def trainable_params(model) -> dict:
    """Float64 copies of every parameter, plus the float64 eval module they plug into."""
    net = model.module(torch.float64)
    return net, {n: p.detach().clone() for n, p in net.named_parameters()}


def loss_fn(net, params, x, y, loss: str = "ce"):
    logits = functional_call(net, params, (x,))
    if loss == "ce":
        return F.cross_entropy(logits, y)
    if loss == "mse":
        # (1/2N) ||f - Y||^2, whose gradient in a linear head is (1/N) F^T (F W - Y)
        target = F.one_hot(y, logits.shape[1]).to(logits)
        return 0.5 * ((logits - target) ** 2).sum() / len(x)
    raise ValueError(f"loss must be 'ce' or 'mse', got {loss!r}")


def _grad(net, params, x, y, loss):
    p = {k: v.detach().requires_grad_(True) for k, v in params.items()}
    val = loss_fn(net, p, x, y, loss)
    grads = torch.autograd.grad(val, list(p.values()))
    return dict(zip(p.keys(), grads))


def _dot(a, b):
    return sum((a[k] * b[k]).sum() for k in a)


def _finite(*vals):
    for v in vals:
        if not math.isfinite(float(v)):
            raise FloatingPointError("non-finite loss in Taylor residual")


def taylor_residual(model, grad_source, eval_ds, alpha: float, loss: str = "ce", mode: str = "running"):
    """|l(T; θ - α g_S) - (l(T; θ) - α g_T · g_S)| with g_S from ``grad_source``, g_T from ``eval_ds``.

    Returns ``(residual, components)``; components holds the three scalars.
    """
    return multi_step_residual(model, grad_source, eval_ds, alpha, 1, loss, mode)


def multi_step_residual(model, S, T, alpha: float, m: int, loss: str = "ce", mode: str = "running"):
    """Residual of the first-order estimate after ``m`` sequential steps on ``S``.

    θ_{i+1} = θ_i - α g_i with g_i = ∇ l(S; θ_i); the estimate is
    l(T; θ_0) - α (Σ g_i) · g_T(θ_0).
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    net, theta0 = trainable_params(model)
    xs, ys = _arrays(S)
    xt, yt = _arrays(T)
    with bn_mode(net, mode), torch.enable_grad():
        g_t = _grad(net, theta0, xt, yt, loss)
        theta = dict(theta0)
        g_sum = {k: torch.zeros_like(v) for k, v in theta0.items()}
        for _ in range(m):
            g = _grad(net, theta, xs, ys, loss)
            g_sum = {k: g_sum[k] + g[k] for k in g}
            theta = {k: theta[k] - alpha * g[k] for k in theta}
        with torch.no_grad():
            before = float(loss_fn(net, theta0, xt, yt, loss))
            after = float(loss_fn(net, theta, xt, yt, loss))
    first_order = before - alpha * float(_dot(g_sum, g_t))
    _finite(before, after)
    residual = abs(after - first_order)
    return residual, {"loss_before": before, "loss_after": after, "first_order": first_order}


def residual_ratio(model, S, T, alpha: float, m: int = 1, loss: str = "ce", mode: str = "running") -> float:
    """residual(α) / residual(α / 2)."""
    r1, _ = multi_step_residual(model, S, T, alpha, m, loss, mode)
    r2, _ = multi_step_residual(model, S, T, alpha / 2, m, loss, mode)
    if r2 == 0.0:
        raise DegenerateConfigError("residual at α/2 is exactly zero; ratio undefined")
    return r1 / r2


def quadratic_scaling_check(model, S, T, alpha: float = 0.1, tolerance: float = 1e-6) -> CheckResult:
    """Linear head + squared error is quadratic in W, so halving α quarters the residual."""
    if model.arch_id != "linear-head":
        raise ValueError("the quadratic check needs a linear-head model")
    ratio = residual_ratio(model, S, T, alpha, 1, "mse")
    return CheckResult.evaluate("taylor_quadratic_ratio", ratio, 4.0, "ratio", tolerance,
                                digest(S.images, T.images), f"alpha={alpha:g}")


def toy_scaling_check(model, S, T, alpha: float = 1e-3, low: float = 3.0, high: float = 5.0) -> CheckResult:
    ratio = residual_ratio(model, S, T, alpha, 1, "ce")
    mid, half = (low + high) / 2, (high - low) / 2
    return CheckResult.evaluate("taylor_toy_ratio", ratio, mid, "ratio", half, digest(S.images, T.images),
                                f"alpha {alpha:g} vs {alpha / 2:g} on {model.arch_id}; accept [{low}, {high}]")
