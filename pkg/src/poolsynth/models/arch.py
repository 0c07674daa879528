"""Declarative network definitions with batch-norm statistic taps.

Every architecture is described by an :class:`ArchSpec` whose ``widths``
map is keyed by *dependency group*: a group is a set of channel dimensions
that must be pruned together (a conv's output channels, the BN after it,
the input channels of every consumer, and residual partners). Pruning in
``poolsynth.pool`` only ever edits ``widths`` and slices tensors along the
dims a group lists, so the networks here never need to know about it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

BN_TENSORS = ("weight", "bias", "running_mean", "running_var")


@dataclass(frozen=True)
class ArchSpec:
    arch_id: str
    class_count: int
    input_shape: tuple
    widths: dict = field(default_factory=dict)
    input_mean: tuple = ()
    input_std: tuple = ()
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["input_mean"] = list(self.input_mean)
        d["input_std"] = list(self.input_std)
        return d

    @classmethod
    def from_dict(cls, d) -> "ArchSpec":
        return cls(d["arch_id"], int(d["class_count"]), tuple(d["input_shape"]), dict(d["widths"]),
                   tuple(d["input_mean"]), tuple(d["input_std"]), dict(d.get("options", {})))

    def with_widths(self, widths) -> "ArchSpec":
        return ArchSpec(self.arch_id, self.class_count, self.input_shape, dict(widths),
                        self.input_mean, self.input_std, dict(self.options))


class StatBatchNorm2d(nn.Module):
    """Batch norm with a biased-variance running estimate and a statistics tap.

    ``mode`` overrides ``self.training``: ``"batch"`` normalizes with batch
    statistics without touching the running buffers (used for functional /
    unrolled training), ``"running"`` always uses the stored statistics.
    ``"capture"`` behaves like ``"batch"`` but keeps the (differentiable)
    batch statistics, and ``"replay"`` normalizes later inputs with them.
    When ``stats`` is a list, ``(layer_id, mean, var)`` of the *input* is
    appended to it.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        self.momentum = momentum
        self.eps = eps
        self.layer_id = ""
        self.mode = None
        self.captured = None

    def forward(self, x, stats=None):
        mode = self.mode or ("train" if self.training else "running")
        if stats is not None or mode != "running":
            mean = x.mean(dim=(0, 2, 3))
            var = (x - mean[None, :, None, None]).pow(2).mean(dim=(0, 2, 3))
            if stats is not None:
                stats.append((self.layer_id, mean, var))
        if mode == "train":
            with torch.no_grad():
                m = self.momentum
                self.running_mean.mul_(1 - m).add_(m * mean.detach())
                self.running_var.mul_(1 - m).add_(m * var.detach())
            mu, v = mean, var
        elif mode in ("batch", "capture"):
            mu, v = mean, var
            if mode == "capture":
                self.captured = (mean, var)
        elif mode == "replay":
            mu, v = self.captured
        else:
            mu, v = self.running_mean, self.running_var
        inv = torch.rsqrt(v + self.eps) * self.weight
        return (x - mu[None, :, None, None]) * inv[None, :, None, None] + self.bias[None, :, None, None]


class Network(nn.Module):
    """Common plumbing: input normalization and BN layer bookkeeping."""

    defaults: dict = {}

    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        c = spec.input_shape[0]
        mean = spec.input_mean or (0.5,) * c
        std = spec.input_std or (0.25,) * c
        self.register_buffer("input_mean", torch.tensor(mean, dtype=torch.float32).view(1, c, 1, 1))
        self.register_buffer("input_std", torch.tensor(std, dtype=torch.float32).view(1, c, 1, 1))

    def _name_bn_layers(self):
        for name, mod in self.named_modules():
            if isinstance(mod, StatBatchNorm2d):
                mod.layer_id = name

    def bn_layers(self) -> list[StatBatchNorm2d]:
        return [m for m in self.modules() if isinstance(m, StatBatchNorm2d)]

    def normalize(self, x):
        return (x - self.input_mean) / self.input_std

    @classmethod
    def default_widths(cls, class_count, input_shape) -> dict:
        return dict(cls.defaults)

    @staticmethod
    def dependency_groups(spec) -> dict:
        return {}

    @staticmethod
    def flops(spec) -> int:
        raise NotImplementedError


def _bn_members(prefix):
    return [(f"{prefix}.{t}", 0, 1) for t in BN_TENSORS]


def _conv_out(size, stride):
    return (size + 2 - 3) // stride + 1


class LinearHead(Network):
    """Fixed random feature map (buffer) followed by a trainable bias-free linear layer."""

    def __init__(self, spec):
        super().__init__(spec)
        d = math.prod(spec.input_shape)
        fd = int(spec.options.get("feature_dim", 32))
        self.register_buffer("feature_proj", torch.randn(d, fd) / math.sqrt(d))
        self.fc = nn.Linear(fd, spec.class_count, bias=False)

    def features(self, x):
        return torch.tanh(self.normalize(x).flatten(1) @ self.feature_proj)

    def forward(self, x, stats=None):
        return self.fc(self.features(x))

    @staticmethod
    def flops(spec):
        d = math.prod(spec.input_shape)
        fd = int(spec.options.get("feature_dim", 32))
        return d * fd + fd * spec.class_count


ACTIVATIONS = {"relu": F.relu, "softplus": F.softplus}


class ToyBN1(Network):
    """conv3x3 -> BN -> activation -> global average pool -> linear. One BN site.

    ``options["activation"]`` picks ReLU (default) or softplus; the smooth
    variant is what Taylor-residual scaling checks need, since ReLU kinks add
    first-order error terms.
    """

    defaults = {"conv1": 4}

    def __init__(self, spec):
        super().__init__(spec)
        w = spec.widths["conv1"]
        self.conv1 = nn.Conv2d(spec.input_shape[0], w, 3, padding=1, bias=False)
        self.bn1 = StatBatchNorm2d(w)
        self.fc = nn.Linear(w, spec.class_count)
        self._name_bn_layers()

    def forward(self, x, stats=None):
        act = ACTIVATIONS[self.spec.options.get("activation", "relu")]
        h = act(self.bn1(self.conv1(self.normalize(x)), stats))
        return self.fc(h.mean(dim=(2, 3)))

    @staticmethod
    def dependency_groups(spec):
        return {"conv1": [("conv1.weight", 0, 1), *_bn_members("bn1"), ("fc.weight", 1, 1)]}

    @staticmethod
    def flops(spec):
        c, h, w = spec.input_shape
        k = spec.widths["conv1"]
        return c * k * 9 * h * w + k * spec.class_count


class ConvNet3(Network):
    """Three conv-BN-ReLU-avgpool blocks and a linear classifier on the flattened map."""

    defaults = {"conv1": 32, "conv2": 32, "conv3": 32}
    depth = 3

    def __init__(self, spec):
        super().__init__(spec)
        cin = spec.input_shape[0]
        for i in range(1, self.depth + 1):
            w = spec.widths[f"conv{i}"]
            setattr(self, f"conv{i}", nn.Conv2d(cin, w, 3, padding=1, bias=False))
            setattr(self, f"bn{i}", StatBatchNorm2d(w))
            cin = w
        self.fc = nn.Linear(cin * self.final_area(spec), spec.class_count)
        self._name_bn_layers()

    @classmethod
    def spatial_sizes(cls, spec):
        h, w = spec.input_shape[1:]
        sizes = []
        for _ in range(cls.depth):
            sizes.append((h, w))
            if h >= 2 and w >= 2:
                h, w = h // 2, w // 2
        return sizes, (h, w)

    @classmethod
    def final_area(cls, spec):
        _, (h, w) = cls.spatial_sizes(spec)
        return h * w

    def forward(self, x, stats=None):
        h = self.normalize(x)
        for i in range(1, self.depth + 1):
            h = F.relu(getattr(self, f"bn{i}")(getattr(self, f"conv{i}")(h), stats))
            if h.shape[-1] >= 2 and h.shape[-2] >= 2:
                h = F.avg_pool2d(h, 2)
        return self.fc(h.flatten(1))

    @classmethod
    def dependency_groups(cls, spec):
        groups = {}
        for i in range(1, cls.depth + 1):
            members = [(f"conv{i}.weight", 0, 1), *_bn_members(f"bn{i}")]
            if i < cls.depth:
                members.append((f"conv{i + 1}.weight", 1, 1))
            else:
                members.append(("fc.weight", 1, cls.final_area(spec)))
            groups[f"conv{i}"] = members
        return groups

    @classmethod
    def flops(cls, spec):
        sizes, _ = cls.spatial_sizes(spec)
        cin, total = spec.input_shape[0], 0
        for i, (h, w) in enumerate(sizes, start=1):
            cout = spec.widths[f"conv{i}"]
            total += cin * cout * 9 * h * w
            cin = cout
        return total + cin * cls.final_area(spec) * spec.class_count


class BasicBlock(nn.Module):
    def __init__(self, cin, mid, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, mid, 3, stride=stride, padding=1, bias=False)
        self.bn1 = StatBatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, cout, 3, padding=1, bias=False)
        self.bn2 = StatBatchNorm2d(cout)
        self.downsample = stride != 1 or cin != cout
        if self.downsample:
            self.ds_conv = nn.Conv2d(cin, cout, 1, stride=stride, bias=False)
            self.ds_bn = StatBatchNorm2d(cout)

    def forward(self, x, stats=None):
        out = F.relu(self.bn1(self.conv1(x), stats))
        out = self.bn2(self.conv2(out), stats)
        sc = self.ds_bn(self.ds_conv(x), stats) if self.downsample else x
        return F.relu(out + sc)


class ResNetLite18(Network):
    """ResNet-18 layout (4 stages x 2 basic blocks, 3x3 stem, no maxpool) at reduced width."""

    stage_base = (8, 16, 32, 64)
    blocks_per_stage = 2

    def __init__(self, spec):
        super().__init__(spec)
        wd = spec.widths
        self.stem_conv = nn.Conv2d(spec.input_shape[0], wd["stage1"], 3, padding=1, bias=False)
        self.stem_bn = StatBatchNorm2d(wd["stage1"])
        self.blocks = nn.ModuleDict()
        cin = wd["stage1"]
        for k in range(1, 5):
            for j in range(1, self.blocks_per_stage + 1):
                stride = 2 if (k > 1 and j == 1) else 1
                name = f"s{k}b{j}"
                self.blocks[name] = BasicBlock(cin, wd[name], wd[f"stage{k}"], stride)
                cin = wd[f"stage{k}"]
        self.fc = nn.Linear(cin, spec.class_count)
        self._name_bn_layers()

    @classmethod
    def default_widths(cls, class_count, input_shape):
        widths = {}
        for k, w in enumerate(cls.stage_base, start=1):
            widths[f"stage{k}"] = w
            for j in range(1, cls.blocks_per_stage + 1):
                widths[f"s{k}b{j}"] = w
        return widths

    @classmethod
    def bn_count(cls):
        # stem + two per block + one per downsampling shortcut (stages 2-4)
        return 1 + 2 * 4 * cls.blocks_per_stage + 3

    def forward(self, x, stats=None):
        h = F.relu(self.stem_bn(self.stem_conv(self.normalize(x)), stats))
        for block in self.blocks.values():
            h = block(h, stats)
        return self.fc(h.mean(dim=(2, 3)))

    @classmethod
    def dependency_groups(cls, spec):
        groups = {}
        nb = cls.blocks_per_stage
        for k in range(1, 5):
            members = []
            if k == 1:
                members += [("stem_conv.weight", 0, 1), *_bn_members("stem_bn")]
            else:
                members += [(f"blocks.s{k}b1.ds_conv.weight", 0, 1), *_bn_members(f"blocks.s{k}b1.ds_bn")]
            for j in range(1, nb + 1):
                b = f"blocks.s{k}b{j}"
                members += [(f"{b}.conv2.weight", 0, 1), *_bn_members(f"{b}.bn2")]
                if not (k > 1 and j == 1):
                    members.append((f"{b}.conv1.weight", 1, 1))
            if k < 4:
                members += [(f"blocks.s{k + 1}b1.conv1.weight", 1, 1), (f"blocks.s{k + 1}b1.ds_conv.weight", 1, 1)]
            else:
                members.append(("fc.weight", 1, 1))
            groups[f"stage{k}"] = members
            for j in range(1, nb + 1):
                b = f"blocks.s{k}b{j}"
                groups[f"s{k}b{j}"] = [(f"{b}.conv1.weight", 0, 1), *_bn_members(f"{b}.bn1"),
                                        (f"{b}.conv2.weight", 1, 1)]
        return groups

    @classmethod
    def flops(cls, spec):
        wd = spec.widths
        h, w = spec.input_shape[1:]
        total = spec.input_shape[0] * wd["stage1"] * 9 * h * w
        cin = wd["stage1"]
        for k in range(1, 5):
            for j in range(1, cls.blocks_per_stage + 1):
                stride = 2 if (k > 1 and j == 1) else 1
                ho, wo = _conv_out(h, stride), _conv_out(w, stride)
                mid, cout = wd[f"s{k}b{j}"], wd[f"stage{k}"]
                total += cin * mid * 9 * ho * wo + mid * cout * 9 * ho * wo
                if stride != 1 or cin != cout:
                    total += cin * cout * ho * wo
                h, w, cin = ho, wo, cout
        return total + cin * spec.class_count


ARCHITECTURES = {
    "linear-head": LinearHead,
    "toy-bn1": ToyBN1,
    "convnet-3": ConvNet3,
    "resnet-lite-18": ResNetLite18,
}
