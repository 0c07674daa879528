import json
import zipfile

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from poolsynth.errors import ChecksumError, ShapeMismatchError, UnknownArchitectureError, VersionMismatchError
from poolsynth.models import (ARCHITECTURES, TrainHP, accuracy, build_model, forward_with_stats, load_model,
                              predict_logits, refresh_running_stats, save_model, snapshots_equal, train_epochs,
                              train_steps)

SHAPES = {"linear-head": (3, 8, 8), "toy-bn1": (3, 8, 8), "convnet-3": (3, 8, 8), "resnet-lite-18": (3, 8, 8)}


def test_linear_head_has_no_bn():
    m = build_model("linear-head", 2, input_shape=(3, 8, 8))
    assert m.bn_layer_ids == () and m.bn_stats == []


def test_convnet_has_three_bn_sites():
    m = build_model("convnet-3", 10, input_shape=(3, 32, 32))
    assert len(m.bn_stats) == 3


def test_resnet_bn_count_matches_schema():
    m = build_model("resnet-lite-18", 10, input_shape=(3, 32, 32))
    assert len(m.bn_stats) == ARCHITECTURES["resnet-lite-18"].bn_count() == 20


def test_unknown_arch():
    with pytest.raises(UnknownArchitectureError):
        build_model("vgg", 10)


def test_init_stats_and_stage():
    m = build_model("convnet-3", 4, input_shape=(3, 8, 8))
    assert m.stage == 0
    for _, rm, rv in m.bn_stats:
        assert np.all(rm == 0) and np.all(rv == 1)


def test_duplicated_batch_keeps_statistics(toy):
    # statistics pool over batch and space, so duplicates change nothing
    m = build_model("convnet-3", 2, input_shape=toy.image_shape)
    x = torch.tensor(toy.images[:1], dtype=torch.float64)
    _, two = forward_with_stats(m, x.repeat(2, 1, 1, 1))
    _, six = forward_with_stats(m, x.repeat(6, 1, 1, 1))
    for (_, m2, v2), (_, m6, v6) in zip(two.per_layer, six.per_layer):
        assert torch.allclose(m2, m6, atol=1e-12) and torch.allclose(v2, v6, atol=1e-12)


def test_spatially_constant_input_has_zero_variance_without_padding_effects():
    m = build_model("toy-bn1", 2, input_shape=(1, 4, 4))
    w = np.zeros_like(m.state["conv1.weight"])
    w[:, :, 1, 1] = 1.0  # centre tap only, so padding never enters
    m = m.replace({"conv1.weight": w})
    _, stats = forward_with_stats(m, torch.full((3, 1, 4, 4), 0.3, dtype=torch.float64))
    assert torch.all(stats.per_layer[0][2].abs() < 1e-25)


def _straight_line_convnet(m, x):
    """Independent convnet-3 forward from the raw state; pre-BN channel means per layer."""
    s = {k: torch.tensor(np.array(v), dtype=torch.float64) for k, v in m.state.items()}
    h = (torch.tensor(x, dtype=torch.float64) - s["input_mean"]) / s["input_std"]
    means = []
    for i in (1, 2, 3):
        z = F.conv2d(h, s[f"conv{i}.weight"], padding=1)
        mu = z.mean(dim=(0, 2, 3))
        means.append(mu)
        var = ((z - mu[None, :, None, None]) ** 2).mean(dim=(0, 2, 3))
        rm, rv = s[f"bn{i}.running_mean"], s[f"bn{i}.running_var"]
        z = (z - rm[None, :, None, None]) / torch.sqrt(rv[None, :, None, None] + 1e-5)
        z = z * s[f"bn{i}.weight"][None, :, None, None] + s[f"bn{i}.bias"][None, :, None, None]
        h = F.avg_pool2d(torch.relu(z), 2)
    return means


def test_convnet_means_match_straight_line(toy):
    m = build_model("convnet-3", 2, seed=3, input_shape=toy.image_shape)
    m = train_steps(m, toy, 3, TrainHP(lr=0.05, batch_size=4))
    x = toy.images[[0, 5]]
    _, stats = forward_with_stats(m, torch.tensor(x, dtype=torch.float64))
    for (_, mu, _), ref in zip(stats.per_layer, _straight_line_convnet(m, x)):
        assert torch.allclose(mu, ref, atol=1e-6)


@pytest.mark.parametrize("arch", sorted(ARCHITECTURES))
def test_logit_shape(arch):
    m = build_model(arch, 5, input_shape=SHAPES[arch])
    assert predict_logits(m, np.random.default_rng(0).uniform(size=(3,) + SHAPES[arch])).shape == (3, 5)


def test_shape_mismatch():
    m = build_model("convnet-3", 5, input_shape=(3, 8, 8))
    with pytest.raises(ShapeMismatchError):
        predict_logits(m, np.zeros((2, 1, 8, 8), np.float32))


def test_forward_with_stats_is_pure(grid):
    m = build_model("convnet-3", 4, input_shape=grid.image_shape)
    before = m.checksum()
    a, sa = forward_with_stats(m, grid.images[:10])
    b, sb = forward_with_stats(m, grid.images[:10])
    assert torch.equal(a, b)
    assert all(torch.equal(x[1], y[1]) and torch.equal(x[2], y[2]) for x, y in zip(sa.per_layer, sb.per_layer))
    assert m.checksum() == before


def test_momentum_consistency(grid):
    m = build_model("toy-bn1", 4, input_shape=grid.image_shape)
    x = grid.images[:32]
    _, stats = forward_with_stats(m, x, bn_mode="batch")
    lid, mu, var = stats.per_layer[0]
    mom = 0.1
    new = refresh_running_stats(m, x, momentum=mom)
    rm = dict((k, (a, b)) for k, a, b in new.bn_stats)[lid]
    assert np.allclose(rm[0], (1 - mom) * 0 + mom * mu.numpy(), atol=1e-6)
    assert np.allclose(rm[1], (1 - mom) * 1 + mom * var.numpy(), atol=1e-6)


def test_linear_head_mse_gradient():
    m = build_model("linear-head", 3, seed=1, input_shape=(3, 4, 4), feature_dim=6)
    net = m.module(torch.float64, fresh=True)
    x = torch.tensor(np.random.default_rng(0).uniform(size=(7, 3, 4, 4)))
    Y = F.one_hot(torch.tensor([0, 1, 2, 0, 1, 2, 0]), 3).double()
    W = net.fc.weight  # [c, fd]; f(X) W^T
    loss = 0.5 * ((net(x) - Y) ** 2).sum() / len(x)
    (g,) = torch.autograd.grad(loss, [W])
    feats = net.features(x).detach()
    analytic = (feats.T @ (feats @ W.detach().T - Y) / len(x)).T
    assert torch.allclose(g, analytic, atol=1e-5)


def test_train_zero_steps_identity(toy):
    m = build_model("toy-bn1", 2, input_shape=toy.image_shape)
    assert train_steps(m, toy, 0, TrainHP()) is m


def test_linear_head_separable(toy):
    m = build_model("linear-head", 2, seed=0, input_shape=toy.image_shape)
    m = train_steps(m, toy, 200, TrainHP(lr=0.1, batch_size=8))
    assert accuracy(m, toy) == 1.0


def test_convnet_loss_decreases(grid):
    m = build_model("convnet-3", 4, input_shape=grid.image_shape)
    x, y = torch.tensor(grid.images), torch.tensor(grid.labels)
    before = F.cross_entropy(m.module()(x), y).item()
    m2 = train_epochs(m, grid, 1, TrainHP(lr=0.2, batch_size=32))
    after = F.cross_entropy(m2.module()(x), y).item()
    assert after < before and m2.stage == 1


@settings(max_examples=10, deadline=None)
@given(steps=st.integers(1, 6), lr=st.floats(0.01, 1.0), seed=st.integers(0, 1000))
def test_running_var_nonnegative(steps, lr, seed):
    from poolsynth.data import load_dataset

    ds = load_dataset("gauss-grid-train")
    m = build_model("convnet-3", 4, seed=seed, input_shape=ds.image_shape)
    m = train_steps(m, ds, steps, TrainHP(lr=lr, batch_size=16, seed=seed))
    for _, _, rv in m.bn_stats:
        assert np.all(rv >= 0)


def test_training_deterministic(grid):
    m = build_model("toy-bn1", 4, input_shape=grid.image_shape)
    a = train_steps(m, grid, 5, TrainHP(seed=2))
    b = train_steps(m, grid, 5, TrainHP(seed=2))
    assert snapshots_equal(a, b)


def test_snapshot_immutable():
    m = build_model("toy-bn1", 2, input_shape=(3, 8, 8))
    with pytest.raises(ValueError):
        m.state["fc.weight"][0, 0] = 1.0


@pytest.mark.parametrize("arch", sorted(ARCHITECTURES))
def test_save_load_round_trip(tmp_path, arch):
    m = build_model(arch, 3, seed=4, input_shape=SHAPES[arch])
    m = m.replace(stage=7, note="checkpoint", meta={"k": 1})
    back = load_model(save_model(m, tmp_path / "m.npz"))
    assert snapshots_equal(m, back) and back.meta == {"k": 1}


def _rewrite_manifest(path, edit):
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    manifest = json.loads(arrays["__manifest__"].tobytes().decode())
    edit(manifest, arrays)
    arrays["__manifest__"] = np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def test_load_checksum_failure(tmp_path):
    path = save_model(build_model("toy-bn1", 2, input_shape=(3, 8, 8)), tmp_path / "m.npz")

    def flip(_, arrays):
        w = arrays["p:fc.weight"].copy()
        w.view(np.uint8)[0] ^= 1
        arrays["p:fc.weight"] = w

    _rewrite_manifest(path, flip)
    with pytest.raises(ChecksumError):
        load_model(path)


def test_load_old_version(tmp_path):
    path = save_model(build_model("toy-bn1", 2, input_shape=(3, 8, 8)), tmp_path / "m.npz")
    _rewrite_manifest(path, lambda m, _: m.update(format_version=0))
    with pytest.raises(VersionMismatchError) as exc:
        load_model(path)
    assert exc.value.found == 0 and exc.value.expected == 1
    assert "v0" in str(exc.value) and "v1" in str(exc.value)
