"""Persist run artifacts to the run directory.

Datasets and checkpoints use one binary container:

    magic (8 bytes) | version (uint32 LE) | header length (uint32 LE)
    | JSON header (UTF-8) | payload (float64 LE) | SHA-256 of all preceding bytes

Headers never carry timestamps, so the same inputs always produce the same
bytes. Metrics are append-only NDJSON, read back through DuckDB for reports.
"""

import hashlib
import json
import logging
import os
import struct
import time
from pathlib import Path

import duckdb
import numpy as np
import pandas as pd
import yaml

from pipeline.quality import dataset_schema, validate
from pipeline.target import Dataset, TargetSpec
from spin.errors import StorageError
from spin.score_net import Architecture, ScoreModelParams

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DATASET_MAGIC = b"SPINDATA"
CHECKPOINT_MAGIC = b"SPINCKPT"
METRICS_SCHEMA_VERSION = 1

_PREFIX = struct.Struct("<8sII")
_DIGEST_SIZE = 32


def write_container(path: str | Path, magic: bytes, header: dict, payload: np.ndarray) -> str:
    """Write a container atomically (temp file, then rename). Returns the hex digest."""
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = (
        _PREFIX.pack(magic, FORMAT_VERSION, len(header_bytes))
        + header_bytes
        + np.ascontiguousarray(payload, dtype="<f8").tobytes()
    )
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(body + digest)
        os.replace(tmp, path)
    except OSError as e:
        raise StorageError(f"could not write {path}: {e}") from e
    return digest.hex()


def read_container(path: str | Path, magic: bytes) -> tuple[dict, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise StorageError(f"could not read {path}: {e}") from e
    if len(raw) < _PREFIX.size + _DIGEST_SIZE:
        raise StorageError(f"{path} is truncated ({len(raw)} bytes)")
    found_magic, version, header_len = _PREFIX.unpack_from(raw)
    if found_magic != magic:
        raise StorageError(f"{path}: expected magic {magic!r}, found {found_magic!r}")
    if version != FORMAT_VERSION:
        raise StorageError(f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})")
    body, digest = raw[:-_DIGEST_SIZE], raw[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise StorageError(f"{path}: checksum mismatch (file corrupt or truncated)")
    start = _PREFIX.size
    if start + header_len > len(body) or (len(body) - start - header_len) % 8:
        raise StorageError(f"{path}: header length {header_len} inconsistent with file size")
    try:
        header = json.loads(body[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise StorageError(f"{path}: unreadable header") from e
    payload = np.frombuffer(body[start + header_len :], dtype="<f8").astype(np.float64)
    return header, payload


# --- datasets ------------------------------------------------------------------


def save_dataset(dataset: Dataset, path: str | Path) -> str:
    n, d = dataset.x0.shape
    header = {
        "d": d,
        "C": dataset.spec.num_conditions,
        "N": n,
        "seed": dataset.seed,
        "spec": dataset.spec.to_dict(),
    }
    payload = np.concatenate([dataset.labels.astype(np.float64), dataset.x0.ravel()])
    return write_container(path, DATASET_MAGIC, header, payload)


def load_dataset(path: str | Path) -> Dataset:
    header, payload = read_container(path, DATASET_MAGIC)
    n, d = int(header["N"]), int(header["d"])
    if n == 0:
        raise StorageError(f"{path}: dataset is empty")
    if payload.size != n * (d + 1):
        raise StorageError(f"{path}: payload holds {payload.size} values, header promises {n * (d + 1)}")
    spec = TargetSpec.from_dict(header["spec"])
    dataset = Dataset(payload[n:].reshape(n, d).copy(), payload[:n].astype(np.int64), int(header["seed"]), spec)
    validate(dataset.to_frame(), dataset_schema(spec))
    return dataset


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(params: ScoreModelParams, path: str | Path, T: int, meta: dict | None = None) -> str:
    header = {
        "arch": params.arch.to_dict(),
        "d": params.arch.data_dim,
        "C": params.arch.num_conditions,
        "T": T,
        "P": params.num_params,
        "meta": meta or {},
    }
    return write_container(path, CHECKPOINT_MAGIC, header, params.flatten())


def load_checkpoint(path: str | Path) -> tuple[ScoreModelParams, dict]:
    header, payload = read_container(path, CHECKPOINT_MAGIC)
    arch = Architecture.from_dict(header["arch"])
    if payload.size != arch.num_params:
        raise StorageError(f"{path}: {payload.size} parameters stored, architecture needs {arch.num_params}")
    return ScoreModelParams.unflatten(arch, payload), header


def file_digest(path: str | Path) -> str:
    """The trailing SHA-256 of a container, as hex."""
    raw = Path(path).read_bytes()
    return raw[-_DIGEST_SIZE:].hex()


# --- metrics, reports, samples ---------------------------------------------------


def append_metrics(path: str | Path, kind: str, **fields) -> None:
    record = {"schema_version": METRICS_SCHEMA_VERSION, "kind": kind, "wall_time": time.time(), **fields}
    try:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    except OSError as e:
        raise StorageError(f"could not append to {path}: {e}") from e


def read_metrics(path: str | Path, kind: str | None = None) -> pd.DataFrame:
    """Load metrics.jsonl through DuckDB; optionally keep one record kind."""
    path = Path(path)
    if not path.exists() or path.stat().st_size == 0:
        return pd.DataFrame()
    source = str(path).replace("'", "''")
    try:
        # sample_size = -1: eval and win-rate keys first appear deep into long runs
        df = duckdb.query(
            f"SELECT * FROM read_json_auto('{source}', format = 'newline_delimited', sample_size = -1)"
        ).df()
    except duckdb.Error as e:
        raise StorageError(f"could not read metrics {path}: {e}") from e
    if kind is not None:
        df = df[df["kind"] == kind].reset_index(drop=True)
    return df


def write_yaml(path: str | Path, payload: dict) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(yaml.safe_dump(payload, sort_keys=True), encoding="utf-8")
    except OSError as e:
        raise StorageError(f"could not write {path}: {e}") from e


def save_samples(path: str | Path, x0: np.ndarray, labels: np.ndarray, trajectory: np.ndarray | None = None) -> None:
    """Samples as CSV; with a trajectory, one row per (sample, step)."""
    d = x0.shape[1]
    if trajectory is None:
        frame = pd.DataFrame(x0, columns=[f"x_{i}" for i in range(d)])
        frame.insert(0, "condition", labels)
    else:
        T1, n, _ = trajectory.shape
        frame = pd.DataFrame(trajectory.transpose(1, 0, 2).reshape(n * T1, d), columns=[f"x_{i}" for i in range(d)])
        frame.insert(0, "step", np.tile(np.arange(T1), n))
        frame.insert(0, "sample", np.repeat(np.arange(n), T1))
        frame.insert(1, "condition", np.repeat(labels, T1))
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format="%.17g")
    except OSError as e:
        raise StorageError(f"could not write {path}: {e}") from e


def _pid_alive(pid: int) -> bool:
    if pid <= 0:
        return False
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        # Exists, owned by another user.
        return True
    return True


class RunLock:
    """Exclusive lock file guarding a run directory against a second process.

    The file holds the owner's pid. A lock whose owner no longer exists (the
    process was killed before it could clean up) is stale and gets replaced.
    """

    def __init__(self, run_dir: str | Path):
        self.path = Path(run_dir) / "run.lock"
        self._fd: int | None = None

    def owner(self) -> int | None:
        """Pid recorded in the lock file, or None when it is missing or unreadable."""
        try:
            return int(self.path.read_text(encoding="utf-8").strip())
        except (OSError, ValueError):
            return None

    def _create(self) -> int:
        return os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)

    def __enter__(self) -> "RunLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = self._create()
        except FileExistsError:
            self._fd = self._replace_stale()
        except OSError as e:
            raise StorageError(f"could not create lock {self.path}: {e}") from e
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def _replace_stale(self) -> int:
        pid = self.owner()
        if pid is None or _pid_alive(pid):
            held_by = f"pid {pid}" if pid is not None else "an unknown process"
            raise StorageError(f"run directory {self.path.parent} is locked by {held_by} ({self.path})")
        logger.warning("Removing stale lock %s left by pid %d", self.path, pid)
        self.path.unlink(missing_ok=True)
        try:
            return self._create()
        except OSError as e:
            raise StorageError(f"run directory {self.path.parent} is locked by another process ({self.path})") from e

    def __exit__(self, *exc) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        self.path.unlink(missing_ok=True)
