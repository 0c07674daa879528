"""Weak-teacher model pools.

Pool directory layout
---------------------
``manifest.json``::

    {"format_version": 1, "strategy": "prior" | "post", "class_count": int,
     "base_model": "<path or null>",
     "window": {"T_b": int, "T_e": int, "m": int, "unit": "epoch" | "step"} | null,
     "prune_spec": {"target_flops_ratio": float, "finetune_steps": int,
                    "finetune_unit": "epoch" | "step", "group_selection": "random",
                    "seed": int} | null,
     "entries": [{"path": "<sha>.npz", "stage": int, "param_count": int,
                  "flops": int, "note": str, "checksum": "<sha256>"}, ...]}

plus one checkpoint per entry, named by the first 16 hex digits of its
content checksum, so a pool directory can be moved freely.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch.nn.functional as F

from .errors import ChecksumError, InfeasiblePruneError, PoolError, UntrainedBaseWarning, VersionMismatchError
from .models import ARCHITECTURES, ModelSnapshot, Trainer, TrainHP, load_model, predict_logits, save_model

POOL_FORMAT_VERSION = 1


@dataclass
class PoolEntry:
    path: str
    stage: int
    param_count: int
    flops: int
    note: str = ""
    checksum: str = ""


@dataclass
class PruneSpec:
    target_flops_ratio: float
    finetune_steps: int = 0
    finetune_unit: str = "epoch"
    group_selection: str = "random"
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.target_flops_ratio < 1.0):
            raise ValueError(f"target_flops_ratio must lie in (0, 1), got {self.target_flops_ratio}")
        if self.finetune_steps < 0:
            raise ValueError("finetune_steps must be >= 0")
        if self.group_selection != "random":
            raise ValueError("only random group selection is supported")
        if self.finetune_unit not in ("epoch", "step"):
            raise ValueError(f"finetune_unit must be 'epoch' or 'step', got {self.finetune_unit!r}")


@dataclass
class PoolManifest:
    strategy: str
    entries: list
    class_count: int
    root: Path | None = None
    base_model: str | None = None
    window: dict | None = None
    prune_spec: dict | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.entries:
            raise PoolError("a pool needs at least one entry")
        if self.strategy == "prior":
            stages = [e.stage for e in self.entries]
            if any(b <= a for a, b in zip(stages, stages[1:])):
                raise PoolError(f"prior pool stages must increase strictly: {stages}")

    def __len__(self):
        return len(self.entries)

    def load(self, i: int) -> ModelSnapshot:
        """Snapshot ``i``, read from disk on first use and verified against the manifest."""
        if i not in self._cache:
            entry = self.entries[i]
            snap = load_model(Path(self.root) / entry.path)
            if entry.checksum and snap.checksum() != entry.checksum:
                raise ChecksumError(entry.path, entry.checksum, snap.checksum())
            self._cache[i] = snap
        return self._cache[i]

    def models(self) -> list[ModelSnapshot]:
        return [self.load(i) for i in range(len(self))]

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha256("".join(e.checksum for e in self.entries).encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "format_version": POOL_FORMAT_VERSION,
            "strategy": self.strategy,
            "class_count": self.class_count,
            "base_model": self.base_model,
            "window": self.window,
            "prune_spec": self.prune_spec,
            "entries": [asdict(e) for e in self.entries],
        }

    def save(self, root=None) -> Path:
        root = Path(root or self.root)
        root.mkdir(parents=True, exist_ok=True)
        (root / "manifest.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        self.root = root
        return root

    @classmethod
    def load_dir(cls, root) -> "PoolManifest":
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise PoolError(f"no pool manifest at {path}")
        d = json.loads(path.read_text())
        if d.get("format_version") != POOL_FORMAT_VERSION:
            raise VersionMismatchError(d.get("format_version"), POOL_FORMAT_VERSION, str(path))
        entries = [PoolEntry(**e) for e in d["entries"]]
        for e in entries:
            if not (root / e.path).exists():
                raise PoolError(f"pool entry {e.path} listed in {path} is missing")
        return cls(d["strategy"], entries, d["class_count"], root, d.get("base_model"), d.get("window"),
                   d.get("prune_spec"))

    @classmethod
    def from_snapshots(cls, snapshots, root, strategy="prior", **kw) -> "PoolManifest":
        """Write ``snapshots`` into ``root`` and return their manifest."""
        root = Path(root)
        entries = [_write_entry(s, root) for s in snapshots]
        pool = cls(strategy, entries, snapshots[0].class_count, root, **kw)
        pool.save()
        return pool


def _write_entry(snap: ModelSnapshot, root: Path) -> PoolEntry:
    digest = snap.checksum()
    name = f"{digest[:16]}.npz"
    save_model(snap, root / name)
    return PoolEntry(name, int(snap.stage), snap.param_count, snap.flops, snap.note, digest)


def prior_window(T_b: int, T_e: int, m: int) -> list[int]:
    """Cached stages T_b, T_b+m, ..., both ends included when T_e - T_b is a multiple of m."""
    if m < 1:
        raise ValueError("stride m must be >= 1")
    if not (0 <= T_b <= T_e):
        raise ValueError(f"need 0 <= T_b <= T_e, got T_b={T_b}, T_e={T_e}")
    return list(range(T_b, T_e + 1, m))


def generate_prior_pool(base: ModelSnapshot, ds, T_b: int, T_e: int, m: int, hp: TrainHP, out_dir,
                        unit: str = "epoch", max_stage: int | None = None, base_path=None) -> PoolManifest:
    """Train one trajectory from ``base`` and cache a snapshot at every window stage.

    The learning-rate schedule spans the whole trajectory (``T_e`` units).
    """
    stages = prior_window(T_b, T_e, m)
    if max_stage is not None and T_e > max_stage:
        raise PoolError(f"T_e={T_e} exceeds the configured maximum of {max_stage} {unit}s")
    if base.stage > T_b:
        raise PoolError(f"base model is at stage {base.stage}, past T_b={T_b}")
    if unit not in ("epoch", "step"):
        raise ValueError(f"unit must be 'epoch' or 'step', got {unit!r}")
    trainer = Trainer(base, ds, hp)
    per_unit = trainer.steps_per_epoch if unit == "epoch" else 1
    if hp.horizon is None:
        trainer.horizon = (T_e - base.stage) * per_unit
    out_dir = Path(out_dir)
    entries = []
    current = base.stage
    for stage in stages:
        if unit == "epoch":
            trainer.run_epochs(stage - current)
        else:
            trainer.run_steps(stage - current)
        current = stage
        if trainer.steps_done == 0:
            snap = base.replace(note=f"prior {unit} {stage}")
        else:
            snap = trainer.snapshot(stage=stage, note=f"prior {unit} {stage}")
        entries.append(_write_entry(snap, out_dir))
    window = {"T_b": T_b, "T_e": T_e, "m": m, "unit": unit}
    pool = PoolManifest("prior", entries, base.class_count, out_dir, str(base_path) if base_path else None, window)
    pool.save()
    return pool


# -- structural pruning --------------------------------------------------------

def prunable_groups(model: ModelSnapshot) -> dict:
    return ARCHITECTURES[model.arch_id].dependency_groups(model.spec)


def random_prune_plan(model: ModelSnapshot, target_ratio: float, seed: int, min_width: int = 1) -> dict:
    """Choose channels to keep per dependency group.

    Channels are removed one at a time: a group is drawn uniformly among
    those still above ``min_width``, then one of its channels uniformly,
    until the FLOPs estimate drops to ``target_ratio`` times the unpruned
    value. The result overshoots the target by at most one channel.
    """
    groups = prunable_groups(model)
    if not groups:
        raise InfeasiblePruneError(f"{model.arch_id} has no prunable channel groups")
    cls = ARCHITECTURES[model.arch_id]
    rng = np.random.default_rng(seed)
    widths = dict(model.spec.widths)
    alive = {g: list(range(widths[g])) for g in groups}
    base_flops = cls.flops(model.spec)
    target = target_ratio * base_flops
    flops = base_flops
    while flops > target:
        open_groups = [g for g in groups if len(alive[g]) > min_width]
        if not open_groups:
            raise InfeasiblePruneError(
                f"cannot reach {target_ratio:.3f} of base FLOPs; minimum reachable is {flops / base_flops:.3f}")
        g = open_groups[rng.integers(len(open_groups))]
        alive[g].pop(int(rng.integers(len(alive[g]))))
        widths[g] = len(alive[g])
        flops = cls.flops(model.spec.with_widths(widths))
    return {g: np.array(sorted(v), dtype=np.int64) for g, v in alive.items()}


def apply_prune(model: ModelSnapshot, keep: dict, note: str = "") -> ModelSnapshot:
    """Slice every tensor a dependency group touches down to its kept channels."""
    groups = prunable_groups(model)
    state = {k: np.array(v) for k, v in model.state.items()}
    for g, idx in keep.items():
        for name, dim, block in groups[g]:
            sel = idx if block == 1 else (idx[:, None] * block + np.arange(block)[None]).reshape(-1)
            state[name] = np.take(state[name], sel, axis=dim)
    widths = dict(model.spec.widths)
    widths.update({g: len(idx) for g, idx in keep.items()})
    spec = model.spec.with_widths(widths)
    return ModelSnapshot(spec, state, model.param_names, model.stage, note or model.note,
                         {**model.meta, "pruned_from": model.checksum()})


def finetune_schedule(count: int, max_steps: int) -> list[int]:
    """Distinct finetune lengths spread over [0, max_steps] (evenly, repeats only if count > max_steps + 1)."""
    if count == 1:
        return [max_steps]
    return [int(round(i * max_steps / (count - 1))) for i in range(count)]


def generate_post_pool(base: ModelSnapshot, ds, spec: PruneSpec, count: int, hp: TrainHP, out_dir,
                       strict: bool = False, base_path=None) -> PoolManifest:
    """``count`` randomly pruned, briefly finetuned variants of a trained base."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if base.stage == 0:
        msg = "post-generation expects a trained base model (stage > 0)"
        if strict:
            raise PoolError(msg)
        warnings.warn(msg, UntrainedBaseWarning, stacklevel=2)
    out_dir = Path(out_dir)
    lengths = finetune_schedule(count, spec.finetune_steps)
    seen = set()
    entries = []
    for i in range(count):
        attempt = 0
        while True:
            keep = random_prune_plan(base, spec.target_flops_ratio, spec.seed + i + 1000 * attempt)
            sig = tuple((g, tuple(v.tolist())) for g, v in sorted(keep.items()))
            if sig not in seen or attempt >= 20:
                break
            attempt += 1
        seen.add(sig)
        pruned = apply_prune(base, keep, note=f"post variant {i}")
        n = lengths[i]
        if n > 0:
            ft_hp = TrainHP(**{**hp.to_dict(), "seed": hp.seed + i})
            trainer = Trainer(pruned, ds, ft_hp)
            if spec.finetune_unit == "epoch":
                trainer.horizon = ft_hp.horizon or n * trainer.steps_per_epoch
                trainer.run_epochs(n)
            else:
                trainer.horizon = ft_hp.horizon or n
                trainer.run_steps(n)
            pruned = trainer.snapshot(stage=base.stage, note=f"post variant {i} (+{n} {spec.finetune_unit})")
        pruned = pruned.replace(meta={**pruned.meta, "finetune": n, "variant": i})
        entries.append(_write_entry(pruned, out_dir))
    pool = PoolManifest("post", entries, base.class_count, out_dir, str(base_path) if base_path else None,
                        prune_spec=asdict(spec))
    pool.save()
    return pool


# -- sampling and distances ----------------------------------------------------

def sample_indices(pool_size: int, n: int, seed) -> list[int]:
    if not (1 <= n <= pool_size):
        raise PoolError(f"cannot sample n={n} teachers from a pool of {pool_size}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return [int(i) for i in rng.choice(pool_size, size=n, replace=False)]


def sample_teachers(pool: PoolManifest, n: int, seed) -> list[ModelSnapshot]:
    """Uniform draw of ``n`` distinct pool members, loaded on demand."""
    return [pool.load(i) for i in sample_indices(len(pool), n, seed)]


def kl_model_distance(a: ModelSnapshot, b: ModelSnapshot, probe, symmetric: bool = False) -> float:
    """Mean over probe images of KL(softmax(a) || softmax(b))."""
    if a.class_count != b.class_count:
        raise PoolError(f"class-count mismatch: {a.class_count} vs {b.class_count}")
    images = probe.images if hasattr(probe, "images") else probe
    if len(images) == 0:
        raise PoolError("probe set is empty")
    la = F.log_softmax(predict_logits(a, images).double(), dim=1)
    lb = F.log_softmax(predict_logits(b, images).double(), dim=1)
    kl = (la.exp() * (la - lb)).sum(1)
    if symmetric:
        kl = 0.5 * (kl + (lb.exp() * (lb - la)).sum(1))
    return float(kl.clamp_min(0.0).mean())


def pool_distance(pool: PoolManifest, student: ModelSnapshot, probe) -> float:
    """Average KL distance between a student and every pool member."""
    return float(np.mean([kl_model_distance(student, t, probe) for t in pool.models()]))


def distance_accuracy_correlation(distances, accuracies) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(distances, accuracies).statistic)
