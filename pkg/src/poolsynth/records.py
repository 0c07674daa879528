"""Experiment records, output-directory locking and collision checks."""

from __future__ import annotations

import datetime as _dt
import json
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import PoolSynthError
from .utils import config_hash

RECORD_FILE = "record.json"
LOCK_FILE = ".lock"


class OutputCollisionError(PoolSynthError, FileExistsError):
    pass


class LockedError(PoolSynthError, RuntimeError):
    pass


@dataclass
class ExperimentRecord:
    """One command invocation and the artifacts it produced.

    ``id`` hashes the command, config, artifacts and parents, so two
    deterministic replays of one command yield the same id.
    """

    command: str
    config: dict
    inputs: dict  # artifact path -> checksum
    outputs: dict  # artifact name -> {"path", "checksum"}
    metrics: dict = field(default_factory=dict)
    parents: list = field(default_factory=list)
    argv: list = field(default_factory=list)
    deterministic: bool = False
    created_at: str = ""
    runtime_s: float = 0.0
    id: str = ""

    def __post_init__(self):
        if not self.created_at:
            self.created_at = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        if not self.id:
            self.id = self.content_id()

    def content_id(self) -> str:
        # metrics carry runtimes, so only the artifact checksums enter the id
        skip = ("id", "created_at", "runtime_s", "metrics", "argv")
        body = {k: v for k, v in asdict(self).items() if k not in skip}
        return config_hash(body)[:20]

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, directory) -> Path:
        path = Path(directory) / RECORD_FILE
        path.write_text(json.dumps(self.to_dict(), indent=2, default=str) + "\n")
        return path

    @classmethod
    def read(cls, directory) -> "ExperimentRecord":
        path = Path(directory)
        path = path if path.name == RECORD_FILE else path / RECORD_FILE
        return cls(**json.loads(path.read_text()))


def parent_id(artifact_dir) -> str | None:
    """Record id stored next to an input artifact, if any."""
    p = Path(artifact_dir) / RECORD_FILE
    if not p.exists():
        return None
    return json.loads(p.read_text()).get("id")


def lineage(directory) -> list[ExperimentRecord]:
    """Follow a record's first parent through the given directory tree.

    Parents are located through the ``inputs`` paths recorded at write time.
    """
    chain = []
    rec = ExperimentRecord.read(directory)
    while True:
        chain.append(rec)
        nxt = None
        for path in rec.inputs:
            pid = parent_id(path)
            if pid is not None and pid in rec.parents:
                nxt = ExperimentRecord.read(path)
                break
        if nxt is None:
            return chain
        rec = nxt


def check_output_dir(path, force: bool = False) -> Path:
    """Refuse a non-empty output directory unless ``force``."""
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise OutputCollisionError(f"output path {p} exists and is not a directory")
    if p.exists() and any(q.name != LOCK_FILE for q in p.iterdir()) and not force:
        raise OutputCollisionError(f"output directory {p} is not empty; pass --force to overwrite")
    p.mkdir(parents=True, exist_ok=True)
    return p


@contextmanager
def output_lock(directory):
    """Exclusive lock on an output directory via an O_EXCL lock file."""
    path = Path(directory) / LOCK_FILE
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockedError(f"{directory} is locked by another process ({path}); remove it if stale") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        try:
            path.unlink()
        except FileNotFoundError:
            pass
