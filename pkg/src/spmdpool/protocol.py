"""On-disk contract between the master and its workers.

Workdir layout (all names relative to the root, ranks undecorated decimal)::

    filelock<i>         zero-byte lock; present while worker i runs
    fileworker<i>.spec  WorkerSpec written by the master
    out<i>.res          ResultRecord written by worker i
    fileworker<i>.log   worker i's stderr

Spec file::

    SPMDSPEC 1
    rank 0
    inf 0.0
    sup 2500.0
    step 0.001
    expr y = 5432.060708*cos((sin(x^9.876))^-1.2345)
    store true
    out out0.res

Result file::

    SPMDRES 1
    rank 1
    status ok | error
    cpu_seconds 2.5
    count 2
    store true | false
    message "json string"        (only when status is error)
    data                         (only when store is true)
    <count little-endian binary64 values>

Reals are written in their shortest round-tripping decimal form; every line
ends in LF. Results are written to a temporary file, fsynced, and renamed
into place, and a lock is only released after that, so a master that sees a
lock disappear always finds a complete result file.
"""

from __future__ import annotations

import json
import math
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "FormatError",
    "IoError",
    "ResultRecord",
    "WorkdirLayout",
    "WorkerSpec",
    "create_locks",
    "decode_result",
    "decode_spec",
    "encode_result",
    "encode_spec",
    "load_result",
    "load_spec",
    "persist_result",
    "persist_spec",
    "poll_once",
    "release_lock",
]

SPEC_MAGIC = "SPMDSPEC"
RESULT_MAGIC = "SPMDRES"
VERSION = 1

_PAYLOAD_DTYPE = np.dtype("<f8")
_FILE_RE = re.compile(r"^(filelock|fileworker|out)(\d+)(\.spec|\.res|\.log)?$")


class FormatError(ValueError):
    pass


class IoError(OSError):
    pass


@dataclass(frozen=True)
class WorkdirLayout:
    root: Path

    def __post_init__(self) -> None:
        object.__setattr__(self, "root", Path(self.root))

    @staticmethod
    def lock_name(rank: int) -> str:
        return f"filelock{rank}"

    @staticmethod
    def spec_name(rank: int) -> str:
        return f"fileworker{rank}.spec"

    @staticmethod
    def result_name(rank: int) -> str:
        return f"out{rank}.res"

    @staticmethod
    def log_name(rank: int) -> str:
        return f"fileworker{rank}.log"

    def lock_path(self, rank: int) -> Path:
        return self.root / self.lock_name(rank)

    def spec_path(self, rank: int) -> Path:
        return self.root / self.spec_name(rank)

    def result_path(self, rank: int) -> Path:
        return self.root / self.result_name(rank)

    def log_path(self, rank: int) -> Path:
        return self.root / self.log_name(rank)


@dataclass(frozen=True)
class WorkerSpec:
    rank: int
    inf: float
    sup: float
    step: float
    expr: str
    store: bool
    out_path: str
    version: int = VERSION


@dataclass(eq=False)
class ResultRecord:
    """One worker's outcome.

    ``payload`` is None when values were not stored (no-store runs and
    error records); ``count`` always holds the number of values computed.
    """

    rank: int
    ok: bool
    cpu_seconds: float
    count: int
    payload: np.ndarray | None = None
    message: str | None = None

    @property
    def stored(self) -> bool:
        return self.payload is not None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ResultRecord):
            return NotImplemented
        if self.stored != other.stored:
            return False
        if self.stored and self.payload.astype(_PAYLOAD_DTYPE).tobytes() != other.payload.astype(
            _PAYLOAD_DTYPE
        ).tobytes():
            return False
        return (
            self.rank == other.rank
            and self.ok == other.ok
            and _bits(self.cpu_seconds) == _bits(other.cpu_seconds)
            and self.count == other.count
            and self.message == other.message
        )


def _bits(v: float) -> bytes:
    return np.float64(v).tobytes()


# ---------------------------------------------------------------------------
# atomic writes


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


def atomic_write(path: Path, data: bytes) -> None:
    """Write ``data`` to a temp file beside ``path``, fsync, rename over it."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    except OSError as exc:
        raise IoError(exc.errno, f"cannot create temporary file in {path.parent}: {exc.strerror}") from exc
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise IoError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc
    _fsync_dir(path.parent)


# ---------------------------------------------------------------------------
# locks


def create_locks(layout: WorkdirLayout, nproc: int) -> None:
    """Create zero-byte locks 0..nproc-1 and clear every stale run artifact.

    Old results are removed for all ranks, not just ranks >= nproc, so a
    gather can never pick up a record from a previous run.
    """
    root = layout.root
    if not root.is_dir():
        raise IoError(2, f"workdir does not exist: {root}")
    try:
        for entry in os.listdir(root):
            m = _FILE_RE.match(entry)
            if m is None:
                if entry.startswith((".out", ".fileworker")) and entry.endswith(".tmp"):
                    os.unlink(root / entry)
                continue
            rank = int(m.group(2))
            kind = m.group(1) + (m.group(3) or "")
            if kind == "out.res" or rank >= nproc:
                os.unlink(root / entry)
        for i in range(nproc):
            with open(layout.lock_path(i), "wb"):
                pass
    except OSError as exc:
        raise IoError(exc.errno, f"cannot prepare workdir {root}: {exc.strerror}") from exc


def poll_once(layout: WorkdirLayout, pending: set[int]) -> set[int]:
    """Ranks of ``pending`` whose lock file can still be opened (or exists)."""
    still = set()
    for rank in pending:
        try:
            with open(layout.lock_path(rank), "rb"):
                pass
        except FileNotFoundError:
            continue
        except OSError:
            # Exists but unreadable: the worker is not done with it.
            pass
        still.add(rank)
    return still


def release_lock(layout: WorkdirLayout, rank: int) -> None:
    path = layout.lock_path(rank)
    try:
        os.unlink(path)
    except FileNotFoundError:
        return
    except OSError as exc:
        raise IoError(exc.errno, f"cannot release {path}: {exc.strerror}") from exc
    _fsync_dir(layout.root)


# ---------------------------------------------------------------------------
# text header helpers


def _real(v: float) -> str:
    return repr(float(v))


def _parse_real(key: str, text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise FormatError(f"field {key!r}: not a real number: {text!r}") from None


def _parse_int(key: str, text: str) -> int:
    if not re.fullmatch(r"-?\d+", text):
        raise FormatError(f"field {key!r}: not an integer: {text!r}")
    return int(text)


def _parse_bool(key: str, text: str) -> bool:
    if text not in ("true", "false"):
        raise FormatError(f"field {key!r}: expected true or false, got {text!r}")
    return text == "true"


class _Lines:
    """Sequential reader of LF-terminated ``key value`` header lines."""

    def __init__(self, data: bytes, magic: str) -> None:
        self.data = data
        self.pos = 0
        header = self.line("header")
        if header is None:
            raise FormatError(f"empty file, expected '{magic} {VERSION}'")
        parts = header.split(" ")
        if len(parts) != 2 or parts[0] != magic:
            raise FormatError(f"bad magic: expected '{magic}', got {header!r}")
        if parts[1] != str(VERSION):
            raise FormatError(f"unsupported version {parts[1]!r}")

    def line(self, key: str) -> str | None:
        if self.pos >= len(self.data):
            return None
        end = self.data.find(b"\n", self.pos)
        if end < 0:
            raise FormatError(f"truncated field {key!r}: line not terminated")
        raw = self.data[self.pos : end]
        self.pos = end + 1
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"field {key!r}: not valid UTF-8") from None

    def field(self, key: str) -> str:
        start = self.pos
        text = self.line(key)
        if text is None:
            raise FormatError(f"missing field {key!r}")
        name, sep, value = text.partition(" ")
        if name != key or not sep:
            self.pos = start
            raise FormatError(f"expected field {key!r}, got {text!r}")
        return value


# ---------------------------------------------------------------------------
# worker specs


def encode_spec(spec: WorkerSpec) -> bytes:
    if "\n" in spec.expr or "\r" in spec.expr:
        raise FormatError("expr must be a single line")
    if "\n" in spec.out_path:
        raise FormatError("out path must be a single line")
    lines = [
        f"{SPEC_MAGIC} {spec.version}",
        f"rank {spec.rank}",
        f"inf {_real(spec.inf)}",
        f"sup {_real(spec.sup)}",
        f"step {_real(spec.step)}",
        f"expr {spec.expr}",
        f"store {'true' if spec.store else 'false'}",
        f"out {spec.out_path}",
    ]
    return ("\n".join(lines) + "\n").encode("utf-8")


def decode_spec(data: bytes) -> WorkerSpec:
    r = _Lines(data, SPEC_MAGIC)
    rank = _parse_int("rank", r.field("rank"))
    inf = _parse_real("inf", r.field("inf"))
    sup = _parse_real("sup", r.field("sup"))
    step = _parse_real("step", r.field("step"))
    expr = r.field("expr")
    store = _parse_bool("store", r.field("store"))
    out = r.field("out")
    if r.pos != len(data):
        raise FormatError("trailing data after field 'out'")
    if rank < 0:
        raise FormatError(f"field 'rank': negative rank {rank}")
    if not (math.isfinite(step) and step > 0):
        raise FormatError(f"field 'step': must be finite and > 0, got {step!r}")
    if not (math.isfinite(inf) and math.isfinite(sup)):
        raise FormatError("fields 'inf'/'sup' must be finite")
    return WorkerSpec(rank, inf, sup, step, expr, store, out)


def persist_spec(layout: WorkdirLayout, spec: WorkerSpec) -> Path:
    path = layout.spec_path(spec.rank)
    atomic_write(path, encode_spec(spec))
    return path


def load_spec(path: str | os.PathLike) -> WorkerSpec:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(exc.errno, f"cannot read spec {path}: {exc.strerror}") from exc
    return decode_spec(data)


# ---------------------------------------------------------------------------
# results


def encode_result(rec: ResultRecord) -> bytes:
    if rec.count < 0:
        raise FormatError("count must be >= 0")
    lines = [
        f"{RESULT_MAGIC} {VERSION}",
        f"rank {rec.rank}",
        f"status {'ok' if rec.ok else 'error'}",
        f"cpu_seconds {_real(rec.cpu_seconds)}",
        f"count {rec.count}",
        f"store {'true' if rec.stored else 'false'}",
    ]
    if not rec.ok:
        if rec.stored:
            raise FormatError("an error record carries no payload")
        lines.append("message " + json.dumps(rec.message or ""))
    body = b""
    if rec.stored:
        payload = np.ascontiguousarray(rec.payload, dtype=_PAYLOAD_DTYPE).reshape(-1)
        if payload.size != rec.count:
            raise FormatError(f"count {rec.count} does not match payload length {payload.size}")
        lines.append("data")
        body = payload.tobytes()
    return ("\n".join(lines) + "\n").encode("utf-8") + body


def decode_result(data: bytes) -> ResultRecord:
    r = _Lines(data, RESULT_MAGIC)
    rank = _parse_int("rank", r.field("rank"))
    status = r.field("status")
    if status not in ("ok", "error"):
        raise FormatError(f"field 'status': expected ok or error, got {status!r}")
    ok = status == "ok"
    cpu = _parse_real("cpu_seconds", r.field("cpu_seconds"))
    count = _parse_int("count", r.field("count"))
    if count < 0:
        raise FormatError(f"field 'count': negative count {count}")
    stored = _parse_bool("store", r.field("store"))
    message = None
    if not ok:
        raw = r.field("message")
        try:
            message = json.loads(raw)
        except ValueError:
            raise FormatError(f"field 'message': bad string {raw!r}") from None
    payload = None
    if stored:
        if r.line("data") != "data":
            raise FormatError("missing 'data' line before payload")
        body = data[r.pos :]
        if len(body) != count * _PAYLOAD_DTYPE.itemsize:
            raise FormatError(
                f"payload holds {len(body)} bytes, count {count} needs {count * 8}"
            )
        payload = np.frombuffer(body, dtype=_PAYLOAD_DTYPE).astype(np.float64, copy=True)
    elif r.pos != len(data):
        raise FormatError("trailing data after header of a no-store result")
    return ResultRecord(rank, ok, cpu, count, payload, message)


def persist_result(layout: WorkdirLayout, rec: ResultRecord, name: str | None = None) -> Path:
    """Atomically write ``rec`` as ``name`` (default ``out<rank>.res``) under the root."""
    path = layout.root / (name or layout.result_name(rec.rank))
    atomic_write(path, encode_result(rec))
    return path


def load_result(path: str | os.PathLike) -> ResultRecord:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(exc.errno, f"cannot read result {path}: {exc.strerror}") from exc
    return decode_result(data)
