"""Hashing, seed derivation and determinism helpers."""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np
import torch

DETERMINISTIC_ENV = "POOLSYNTH_DETERMINISTIC"


def array_checksum(arrays: dict) -> str:
    """sha256 over (name, dtype, shape, bytes) of every array, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(np.asarray(arrays[name]))
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def derive_seed(seed: int, *tags) -> int:
    """Expand a top-level seed into an independent per-phase seed.

    ``derive_seed(s, "pool")`` is the first 4 bytes of sha256("s:pool") read
    big-endian and masked to 31 bits.
    """
    key = ":".join([str(int(seed))] + [str(t) for t in tags])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:4], "big") & 0x7FFFFFFF


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def set_deterministic(enabled: bool | None = None) -> bool:
    """Switch torch into deterministic mode.

    With ``enabled=None`` the ``POOLSYNTH_DETERMINISTIC`` environment variable
    decides ("1"/"true" turns it on). Returns the resulting state.
    """
    if enabled is None:
        enabled = os.environ.get(DETERMINISTIC_ENV, "").lower() in ("1", "true", "yes")
    torch.use_deterministic_algorithms(bool(enabled))
    if enabled:
        torch.set_num_threads(1)
    return bool(enabled)
