"""Immutable model snapshots, statistic extraction and checkpoint files.

Checkpoint format (version 1)
-----------------------------
A single ``.npz`` archive. Parameters are stored under ``p:<name>``,
buffers (BN running statistics, input normalization, frozen feature maps)
under ``b:<name>``, and ``__manifest__`` holds UTF-8 JSON as a uint8 array::

    {"format_version": 1, "arch_id": ..., "class_count": ..., "stage": ...,
     "note": ..., "spec": {...}, "param_names": [...], "flops": ...,
     "param_count": ..., "checksum": "<sha256 of all tensors>"}

The checksum is :func:`poolsynth.utils.array_checksum` over the state dict
(plain tensor names, no prefixes).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import torch

from ..errors import ChecksumError, ShapeMismatchError, UnknownArchitectureError, VersionMismatchError
from ..utils import array_checksum
from .arch import ARCHITECTURES, ArchSpec, StatBatchNorm2d

FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class FeatureStatistics:
    per_layer: list
    batch_size: int

    @property
    def layer_ids(self):
        return [lid for lid, _, _ in self.per_layer]

    def numpy(self):
        return [(lid, m.detach().cpu().numpy(), v.detach().cpu().numpy()) for lid, m, v in self.per_layer]


@dataclass(frozen=True, eq=False)
class ModelSnapshot:
    """A network's full state at one point of training, as read-only arrays."""

    spec: ArchSpec
    state: dict
    param_names: tuple
    stage: int = 0
    note: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        frozen = {}
        for k, v in self.state.items():
            a = np.array(v, dtype=np.float32)
            a.setflags(write=False)
            frozen[k] = a
        object.__setattr__(self, "state", frozen)
        object.__setattr__(self, "param_names", tuple(self.param_names))

    @property
    def arch_id(self) -> str:
        return self.spec.arch_id

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    @property
    def parameters(self) -> dict:
        return {n: self.state[n] for n in self.param_names}

    @property
    def param_count(self) -> int:
        return int(sum(self.state[n].size for n in self.param_names))

    @property
    def flops(self) -> int:
        return int(ARCHITECTURES[self.arch_id].flops(self.spec))

    @cached_property
    def bn_layer_ids(self) -> tuple:
        return tuple(m.layer_id for m in self.module().bn_layers())

    @property
    def bn_stats(self) -> list:
        return [(lid, self.state[f"{lid}.running_mean"], self.state[f"{lid}.running_var"])
                for lid in self.bn_layer_ids]

    def checksum(self) -> str:
        return array_checksum(self.state)

    def module(self, dtype=torch.float32, fresh: bool = False):
        """Frozen, eval-mode network holding this state (cached per dtype).

        ``fresh=True`` returns a new, trainable copy that the caller owns.
        """
        if fresh:
            return self._materialize(dtype, trainable=True)
        cache = self.__dict__.setdefault("_modules_cache", {})
        if dtype not in cache:
            cache[dtype] = self._materialize(dtype, trainable=False)
        return cache[dtype]

    def _materialize(self, dtype, trainable):
        net = ARCHITECTURES[self.arch_id](self.spec)
        net.load_state_dict({k: torch.tensor(v) for k, v in self.state.items()}, strict=True)
        net = net.to(dtype)
        if not trainable:
            net.eval()
            net.requires_grad_(False)
        return net

    def replace(self, state_updates=None, **fields) -> "ModelSnapshot":
        state = dict(self.state)
        for k, v in (state_updates or {}).items():
            if k not in state:
                raise KeyError(k)
            if np.shape(v) != state[k].shape:
                raise ShapeMismatchError(state[k].shape, np.shape(v), what=k)
            state[k] = v
        kw = dict(spec=self.spec, state=state, param_names=self.param_names, stage=self.stage,
                  note=self.note, meta=dict(self.meta))
        kw.update(fields)
        return ModelSnapshot(**kw)


def snapshot_from_module(net, stage=0, note="", meta=None) -> ModelSnapshot:
    state = {k: v.detach().cpu().float().numpy() for k, v in net.state_dict().items()}
    names = tuple(n for n, _ in net.named_parameters())
    return ModelSnapshot(net.spec, state, names, stage, note, dict(meta or {}))


def build_model(arch_id: str, class_count: int, seed: int = 0, input_shape=(3, 32, 32),
                widths=None, input_norm=None, **options) -> ModelSnapshot:
    """Freshly initialized model; BN running mean 0, running var 1, stage 0."""
    if arch_id not in ARCHITECTURES:
        raise UnknownArchitectureError(arch_id, ARCHITECTURES)
    cls = ARCHITECTURES[arch_id]
    input_shape = tuple(int(s) for s in input_shape)
    wd = cls.default_widths(class_count, input_shape)
    wd.update(widths or {})
    mean, std = input_norm if input_norm is not None else ((), ())
    spec = ArchSpec(arch_id, int(class_count), input_shape, wd, tuple(mean), tuple(std), dict(options))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        net = cls(spec)
    return snapshot_from_module(net, stage=0, meta={"init_seed": int(seed)})


def _as_tensor(images, dtype):
    if isinstance(images, torch.Tensor):
        return images if images.dtype == dtype else images.to(dtype)
    return torch.tensor(np.asarray(images), dtype=dtype)


def check_input(model: ModelSnapshot, x):
    expected = tuple(model.spec.input_shape)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeMismatchError(("B",) + expected, tuple(x.shape))


def forward_with_stats(model: ModelSnapshot, images, dtype=None, bn_mode: str = "running"):
    """Logits plus per-BN-site batch mean / biased variance of the pre-normalization input.

    Normalization uses the stored running statistics (``bn_mode="running"``)
    so the snapshot is never mutated; gradients flow to ``images`` when it
    requires grad.
    """
    if dtype is None:
        dtype = images.dtype if isinstance(images, torch.Tensor) and images.is_floating_point() else torch.float32
    x = _as_tensor(images, dtype)
    check_input(model, x)
    if x.shape[0] < 2:
        raise ValueError("forward_with_stats needs a batch of at least 2 images")
    net = model.module(dtype)
    stats = []
    bns = net.bn_layers()
    prev = [b.mode for b in bns]
    try:
        for b in bns:
            b.mode = bn_mode
        logits = net(x, stats)
    finally:
        for b, m in zip(bns, prev):
            b.mode = m
    return logits, FeatureStatistics(stats, int(x.shape[0]))


@torch.no_grad()
def predict_logits(model: ModelSnapshot, images, batch_size: int = 512) -> torch.Tensor:
    net = model.module()
    x = _as_tensor(images, torch.float32)
    check_input(model, x)
    return torch.cat([net(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def accuracy(model: ModelSnapshot, ds) -> float:
    pred = predict_logits(model, ds.images).argmax(1).numpy()
    return float((pred == ds.labels).mean())


@torch.no_grad()
def refresh_running_stats(model: ModelSnapshot, images, momentum: float = 1.0) -> ModelSnapshot:
    """One training-mode forward on ``images`` with the given BN momentum."""
    net = model.module(fresh=True)
    net.train()
    for b in net.bn_layers():
        b.momentum = momentum
    net(_as_tensor(images, torch.float32))
    return snapshot_from_module(net, model.stage, model.note, model.meta)


def snapshots_equal(a: ModelSnapshot, b: ModelSnapshot) -> bool:
    if a.spec != b.spec or a.stage != b.stage or a.param_names != b.param_names or a.note != b.note:
        return False
    if a.state.keys() != b.state.keys():
        return False
    return all(np.array_equal(a.state[k], b.state[k]) for k in a.state)


# -- checkpoint files ----------------------------------------------------------

def save_model(model: ModelSnapshot, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "arch_id": model.arch_id,
        "class_count": model.class_count,
        "stage": int(model.stage),
        "note": model.note,
        "meta": model.meta,
        "spec": model.spec.to_dict(),
        "param_names": list(model.param_names),
        "flops": model.flops,
        "param_count": model.param_count,
        "checksum": model.checksum(),
    }
    arrays = {}
    for k, v in model.state.items():
        arrays[("p:" if k in model.param_names else "b:") + k] = v
    arrays["__manifest__"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def read_manifest(path) -> dict:
    with np.load(path) as z:
        return json.loads(z["__manifest__"].tobytes().decode())


def load_model(path) -> ModelSnapshot:
    path = Path(path)
    with np.load(path) as z:
        manifest = json.loads(z["__manifest__"].tobytes().decode())
        if manifest.get("format_version") != FORMAT_VERSION:
            raise VersionMismatchError(manifest.get("format_version"), FORMAT_VERSION, str(path))
        state = {k[2:]: z[k] for k in z.files if k[:2] in ("p:", "b:")}
    actual = array_checksum(state)
    if actual != manifest["checksum"]:
        raise ChecksumError(path, manifest["checksum"], actual)
    return ModelSnapshot(ArchSpec.from_dict(manifest["spec"]), state, tuple(manifest["param_names"]),
                         manifest["stage"], manifest.get("note", ""), manifest.get("meta", {}))
