"""Datasets: loading, imbalanced subsampling and synthetic-set initialization.

Images are channels-first float32 arrays in [0, 1]. Per-channel
normalization lives in the models, not here.

Dataset roots
-------------
``cifar10-{train,test}``
    ``<root>/cifar-10-batches-py/{data_batch_1..5,test_batch}`` (the
    standard python pickle release).
``cifar100-{train,test}``
    ``<root>/cifar-100-python/{train,test}`` (fine labels).
``digits-{train,test}``
    scikit-learn's bundled 8x8 digits, split 80/20 per class in file order.
``toy-2class``, ``gauss-grid-{train,test}``
    fixture format: ``<name>.npz`` (``images``, ``labels``) plus a sidecar
    ``<name>.json`` with ``{name, class_count, shape, checksum}``. Fixtures
    ship inside the package and are used when ``root`` does not hold them.
"""

from __future__ import annotations

import json
import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptRecordError,
    DatasetMissingError,
    EmptyClassError,
    InsufficientSamplesError,
    ChecksumError,
    VersionMismatchError,
)
from .utils import array_checksum

FIXTURE_DIR = Path(__file__).parent / "fixtures"
SYNTH_FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = ""

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got shape {images.shape}")
        if len(images) == 0:
            raise ValueError("dataset is empty")
        if labels.shape != (len(images),):
            raise ValueError(f"labels shape {labels.shape} does not match {len(images)} images")
        bad = np.flatnonzero((labels < 0) | (labels >= self.class_count))
        if bad.size:
            raise CorruptRecordError(int(bad[0]), f"label {labels[bad[0]]} outside [0, {self.class_count})")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def class_indices(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == k) for k in range(self.class_count)]

    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def subset(self, idx, name=None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_count, name or self.name)


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    images: np.ndarray
    hard_labels: np.ndarray
    ipc: int
    class_count: int
    soft_labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float32)
        hard = np.array(self.hard_labels, dtype=np.int64)
        if len(images) != self.ipc * self.class_count:
            raise ValueError(f"N_s={len(images)} != ipc*c={self.ipc * self.class_count}")
        counts = np.bincount(hard, minlength=self.class_count)
        if hard.shape != (len(images),) or len(counts) != self.class_count or np.any(counts != self.ipc):
            raise ValueError(f"hard labels are not balanced at ipc={self.ipc}: {counts.tolist()}")
        if not np.all(np.isfinite(images)):
            raise ValueError("synthetic images contain non-finite values")
        soft = self.soft_labels
        if soft is not None:
            soft = np.array(soft, dtype=np.float32)
            if soft.shape != (len(images), self.class_count):
                raise ValueError(f"soft_labels shape {soft.shape} != {(len(images), self.class_count)}")
            if np.any(soft < 0) or np.max(np.abs(soft.sum(1) - 1.0)) > 1e-5:
                raise ValueError("soft label rows must be nonnegative and sum to 1")
            soft.setflags(write=False)
        images.setflags(write=False)
        hard.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "hard_labels", hard)
        object.__setattr__(self, "soft_labels", soft)

    def __len__(self):
        return len(self.hard_labels)

    def with_images(self, images) -> "SyntheticDataset":
        return SyntheticDataset(images, self.hard_labels, self.ipc, self.class_count, self.soft_labels, dict(self.meta))

    def with_soft_labels(self, soft) -> "SyntheticDataset":
        return SyntheticDataset(self.images, self.hard_labels, self.ipc, self.class_count, soft, dict(self.meta))

    def as_labeled(self, name="synthetic") -> LabeledDataset:
        return LabeledDataset(np.clip(self.images, 0.0, 1.0), self.hard_labels, self.class_count, name)

    def checksum(self) -> str:
        arrays = {"images": self.images, "hard_labels": self.hard_labels}
        if self.soft_labels is not None:
            arrays["soft_labels"] = self.soft_labels
        return array_checksum(arrays)


# -- loading -----------------------------------------------------------------

CIFAR_SPLITS = {
    "cifar10-train": ("cifar-10-batches-py", [f"data_batch_{i}" for i in range(1, 6)], b"labels", 10),
    "cifar10-test": ("cifar-10-batches-py", ["test_batch"], b"labels", 10),
    "cifar100-train": ("cifar-100-python", ["train"], b"fine_labels", 100),
    "cifar100-test": ("cifar-100-python", ["test"], b"fine_labels", 100),
}
FIXTURES = ("toy-2class", "gauss-grid-train", "gauss-grid-test")
DATASETS = tuple(CIFAR_SPLITS) + ("digits-train", "digits-test") + FIXTURES


def load_dataset(name: str, root=None) -> LabeledDataset:
    """Load a registered dataset id; see the module docstring for layouts."""
    if name in CIFAR_SPLITS:
        if root is None:
            raise DatasetMissingError("<no root>", f"{name} needs a data root")
        return _load_cifar(name, Path(root))
    if name in ("digits-train", "digits-test"):
        return _load_digits(name)
    if name in FIXTURES:
        base = Path(root) if root is not None else FIXTURE_DIR
        if not (base / f"{name}.npz").exists() and root is not None:
            base = FIXTURE_DIR
        return read_fixture(base / f"{name}.npz")
    raise KeyError(f"unknown dataset {name!r}; registered: {', '.join(DATASETS)}")


def _load_cifar(name, root: Path) -> LabeledDataset:
    folder, files, label_key, classes = CIFAR_SPLITS[name]
    data, labels = [], []
    offset = 0
    for fname in files:
        path = root / folder / fname
        if not path.exists():
            raise DatasetMissingError(path)
        with open(path, "rb") as f:
            try:
                batch = pickle.load(f, encoding="bytes")
            except Exception as exc:  # noqa: BLE001 - any unpickling failure is corruption
                raise CorruptRecordError(offset, f"{path.name} is unreadable: {exc}") from exc
        x = np.asarray(batch[b"data"])
        y = np.asarray(batch[label_key])
        if x.ndim != 2 or x.shape[1] != 3072 or len(y) != len(x):
            raise CorruptRecordError(offset, f"{path.name}: bad array shapes {x.shape}/{y.shape}")
        bad = np.flatnonzero((y < 0) | (y >= classes))
        if bad.size:
            raise CorruptRecordError(offset + int(bad[0]), f"label {y[bad[0]]} out of range")
        data.append(x)
        labels.append(y)
        offset += len(x)
    images = np.concatenate(data).reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return LabeledDataset(images, np.concatenate(labels), classes, name)


def _load_digits(name) -> LabeledDataset:
    from sklearn.datasets import load_digits

    d = load_digits()
    images = (d.images / 16.0).astype(np.float32)[:, None]
    labels = d.target.astype(np.int64)
    train_idx, test_idx = [], []
    for k in range(10):
        idx = np.flatnonzero(labels == k)
        cut = int(round(0.8 * len(idx)))
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    idx = np.sort(np.concatenate(train_idx if name == "digits-train" else test_idx))
    return LabeledDataset(images[idx], labels[idx], 10, name)


def write_fixture(ds: LabeledDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{ds.name}.npz"
    np.savez(path, images=ds.images, labels=ds.labels)
    manifest = {
        "name": ds.name,
        "class_count": int(ds.class_count),
        "shape": list(ds.images.shape),
        "checksum": array_checksum({"images": ds.images, "labels": ds.labels}),
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_fixture(path) -> LabeledDataset:
    path = Path(path)
    side = path.with_suffix(".json")
    for p in (path, side):
        if not p.exists():
            raise DatasetMissingError(p)
    manifest = json.loads(side.read_text())
    with np.load(path) as z:
        images, labels = z["images"], z["labels"]
    if list(images.shape) != list(manifest["shape"]):
        raise CorruptRecordError(0, f"stored shape {images.shape} != manifest {manifest['shape']}")
    actual = array_checksum({"images": images, "labels": labels})
    if actual != manifest["checksum"]:
        raise ChecksumError(path, manifest["checksum"], actual)
    return LabeledDataset(images, labels, int(manifest["class_count"]), manifest["name"])


# -- subsets -----------------------------------------------------------------

def take_per_class(ds: LabeledDataset, n: int, seed: int | None = None, name=None) -> LabeledDataset:
    """Balanced subset with ``n`` images per class (first ``n`` if seed is None)."""
    rng = None if seed is None else np.random.default_rng(seed)
    keep = []
    for k, idx in enumerate(ds.class_indices()):
        if len(idx) < n:
            raise InsufficientSamplesError({k: len(idx)})
        keep.append(np.sort(rng.choice(idx, n, replace=False)) if rng is not None else idx[:n])
    return ds.subset(np.sort(np.concatenate(keep)), name or f"{ds.name}[{n}/class]")


def select_classes(ds: LabeledDataset, classes, name=None) -> LabeledDataset:
    """Restrict to ``classes`` and relabel them 0..len(classes)-1."""
    classes = list(classes)
    mask = np.isin(ds.labels, classes)
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.array([remap[int(y)] for y in ds.labels[mask]], dtype=np.int64)
    return LabeledDataset(ds.images[mask], labels, len(classes), name or ds.name)


def subsample_imbalanced(ds: LabeledDataset, min_frac: float, max_frac: float, seed: int) -> LabeledDataset:
    """Keep ``ceil(frac_k * n_k)`` samples of class k, ``frac_k ~ U[min_frac, max_frac]``."""
    if not (0.0 < min_frac <= max_frac <= 1.0):
        raise ValueError(f"need 0 < min_frac <= max_frac <= 1, got {min_frac}, {max_frac}")
    rng = np.random.default_rng(seed)
    fracs = rng.uniform(min_frac, max_frac, size=ds.class_count)
    keep = []
    for k, idx in enumerate(ds.class_indices()):
        n_keep = math.ceil(fracs[k] * len(idx) - 1e-9)
        if n_keep == 0:
            raise EmptyClassError(f"class {k} would be left with 0 samples")
        # which members survive is random; relative order is preserved
        keep.append(np.sort(rng.permutation(idx)[:n_keep]))
    return ds.subset(np.sort(np.concatenate(keep)), f"{ds.name}[imb {min_frac:g}-{max_frac:g}]")


def init_synthetic(ds: LabeledDataset, ipc: int, mode: str = "real", seed: int = 0) -> SyntheticDataset:
    """Balanced synthetic set laid out ipc-major: row ``i*c + k`` is image i of class k."""
    if ipc < 1:
        raise ValueError("ipc must be >= 1")
    c = ds.class_count
    hard = np.tile(np.arange(c, dtype=np.int64), ipc)
    rng = np.random.default_rng(seed)
    if mode == "noise":
        images = rng.uniform(0.0, 1.0, size=(ipc * c,) + ds.image_shape).astype(np.float32)
    elif mode == "real":
        per_class = ds.class_indices()
        short = {k: len(idx) for k, idx in enumerate(per_class) if len(idx) < ipc}
        if short:
            raise InsufficientSamplesError(short)
        chosen = np.stack([rng.choice(idx, ipc, replace=False) for idx in per_class], axis=1)
        images = ds.images[chosen.reshape(-1)].copy()
    else:
        raise ValueError(f"unknown init mode {mode!r}; expected 'noise' or 'real'")
    return SyntheticDataset(images, hard, ipc, c, meta={"init_mode": mode, "seed": seed, "source": ds.name})


def channel_stats(ds: LabeledDataset) -> tuple[list, list]:
    mean = ds.images.mean(axis=(0, 2, 3))
    std = ds.images.std(axis=(0, 2, 3))
    return mean.astype(float).tolist(), np.maximum(std, 1e-3).astype(float).tolist()


# -- synthetic set persistence -----------------------------------------------

def save_synthetic(synth: SyntheticDataset, directory, extra: dict | None = None, history=None) -> Path:
    """Write ``synthetic.npz`` + ``manifest.json`` (+ ``loss_history.jsonl``)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {"images": synth.images, "hard_labels": synth.hard_labels}
    if synth.soft_labels is not None:
        arrays["soft_labels"] = synth.soft_labels
    np.savez(directory / "synthetic.npz", **arrays)
    manifest = {
        "format_version": SYNTH_FORMAT_VERSION,
        "ipc": int(synth.ipc),
        "class_count": int(synth.class_count),
        "has_soft_labels": synth.soft_labels is not None,
        "checksum": array_checksum(arrays),
        "meta": synth.meta,
        "loss_history": None,
        "pool_checksum": None,
        "config_hash": None,
    }
    if history is not None:
        with open(directory / "loss_history.jsonl", "w") as f:
            for i, row in enumerate(history):
                f.write(json.dumps({"iter": i, "mean_term": row.mean_term, "var_term": row.var_term,
                                    "ce_term": row.ce_term, "total": row.total}) + "\n")
        manifest["loss_history"] = "loss_history.jsonl"
    manifest.update(extra or {})
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return directory


def load_synthetic(directory) -> SyntheticDataset:
    directory = Path(directory)
    mpath, apath = directory / "manifest.json", directory / "synthetic.npz"
    for p in (mpath, apath):
        if not p.exists():
            raise DatasetMissingError(p)
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != SYNTH_FORMAT_VERSION:
        raise VersionMismatchError(manifest.get("format_version"), SYNTH_FORMAT_VERSION, str(mpath))
    with np.load(apath) as z:
        arrays = {k: z[k] for k in z.files}
    actual = array_checksum(arrays)
    if actual != manifest["checksum"]:
        raise ChecksumError(apath, manifest["checksum"], actual)
    return SyntheticDataset(arrays["images"], arrays["hard_labels"], manifest["ipc"], manifest["class_count"],
                            arrays.get("soft_labels"), manifest.get("meta", {}))
