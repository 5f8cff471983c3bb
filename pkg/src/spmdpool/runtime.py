"""Master orchestration and the worker entry point.

The master writes one lock and one spec per rank, launches one background
process per rank, and watches only the lock files: a rank is done when its
lock can no longer be opened. Workers persist their result (temp file,
fsync, rename) before deleting their lock.
"""

from __future__ import annotations

import logging
import os
import signal
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

import spmdpool
from spmdpool.expr import ExprError, evaluate_range, parse
from spmdpool.metrics import mean_worker_cpu
from spmdpool.partition import PartitionParams, Subrange, check_divisible, expand_colon, make_partition
from spmdpool.protocol import (
    FormatError,
    IoError,
    ResultRecord,
    WorkdirLayout,
    WorkerSpec,
    create_locks,
    load_result,
    load_spec,
    persist_result,
    persist_spec,
    poll_once,
    release_lock,
)

__all__ = [
    "EXIT_COMPUTE_ERROR",
    "EXIT_OK",
    "EXIT_SPEC_ERROR",
    "RunConfig",
    "RunError",
    "RunReport",
    "RunTimeout",
    "SpawnError",
    "WorkerError",
    "gather_results",
    "run_master",
    "run_worker",
    "spawn_workers",
]

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_SPEC_ERROR = 2
EXIT_COMPUTE_ERROR = 3


class RunError(RuntimeError):
    pass


class SpawnError(RunError):
    pass


class WorkerError(RunError):
    """One or more ranks failed; ``failures`` maps rank to message."""

    def __init__(self, failures: dict[int, str]) -> None:
        self.failures = dict(sorted(failures.items()))
        detail = "; ".join(f"rank {r}: {m}" for r, m in self.failures.items())
        super().__init__(f"worker failure: {detail}")


class RunTimeout(RunError, TimeoutError):
    """Locks still present at the deadline; ``pending`` lists their ranks."""

    def __init__(self, pending: Sequence[int], timeout: float, diagnostics: dict[int, str]) -> None:
        self.pending = sorted(pending)
        self.diagnostics = diagnostics
        detail = "; ".join(f"rank {r}: {diagnostics.get(r, 'no diagnostics')}" for r in self.pending)
        super().__init__(
            f"timed out after {timeout:g} s waiting for rank(s) "
            f"{', '.join(map(str, self.pending))} ({detail})"
        )


def default_launcher() -> list[str]:
    return [sys.executable, "-m", "spmdpool"]


@dataclass
class RunConfig:
    nproc: int
    maxvalue: float
    step: float
    compute: str
    store: bool = True
    workdir: Path = field(default_factory=Path.cwd)
    poll_interval: float = 0.1
    timeout: float = 600.0
    #: argv prefix that starts this program; ``worker --spec <path>`` is appended.
    launcher: Sequence[str] | None = None

    def partition_params(self) -> PartitionParams:
        return PartitionParams(self.nproc, float(self.maxvalue), float(self.step))

    def validate(self) -> None:
        self.partition_params().validate()
        parse(self.compute)
        if self.poll_interval <= 0:
            raise ValueError("poll_interval must be > 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")


@dataclass
class RunReport:
    config: RunConfig
    elapsedtime: float
    totaltime: float
    executiontime: float
    worker_cpu: list[float]
    result_count: int
    results: np.ndarray | None = None


# ---------------------------------------------------------------------------
# worker side


def _fail(layout: WorkdirLayout, spec: WorkerSpec, message: str, cpu: float, code: int) -> int:
    print(f"worker {spec.rank}: {message}", file=sys.stderr)
    rec = ResultRecord(spec.rank, False, cpu, 0, None, message)
    try:
        persist_result(layout, rec, spec.out_path)
    except (IoError, FormatError) as exc:
        # Keep the lock: a released lock must always have a result behind it.
        print(f"worker {spec.rank}: cannot persist error record: {exc}", file=sys.stderr)
        return code
    try:
        release_lock(layout, spec.rank)
    except IoError as exc:
        print(f"worker {spec.rank}: {exc}", file=sys.stderr)
    return code


def run_worker(spec_path: str | os.PathLike) -> int:
    """Compute one rank's share; returns the process exit status."""
    spec_path = Path(spec_path)
    try:
        spec = load_spec(spec_path)
    except (FormatError, IoError) as exc:
        print(f"worker: bad spec {spec_path}: {exc}", file=sys.stderr)
        return EXIT_SPEC_ERROR
    layout = WorkdirLayout(spec_path.parent)

    try:
        compute = parse(spec.expr)
    except ExprError as exc:
        return _fail(layout, spec, f"cannot parse expression: {exc}", 0.0, EXIT_SPEC_ERROR)

    t1 = 0.0
    try:
        xs = expand_colon(Subrange(spec.rank, spec.inf, spec.sup, spec.step))
        t1 = time.process_time()
        ys = evaluate_range(compute, xs)
        t2 = time.process_time() - t1
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        cpu = time.process_time() - t1 if t1 else 0.0
        return _fail(layout, spec, str(exc), cpu, EXIT_COMPUTE_ERROR)

    rec = ResultRecord(spec.rank, True, t2, int(ys.size), ys if spec.store else None)
    try:
        persist_result(layout, rec, spec.out_path)
        release_lock(layout, spec.rank)
    except (IoError, FormatError) as exc:
        print(f"worker {spec.rank}: {exc}", file=sys.stderr)
        return EXIT_COMPUTE_ERROR
    return EXIT_OK


# ---------------------------------------------------------------------------
# master side


def _child_env() -> dict[str, str]:
    env = dict(os.environ)
    src = str(Path(spmdpool.__file__).resolve().parent.parent)
    env["PYTHONPATH"] = os.pathsep.join(p for p in (src, env.get("PYTHONPATH")) if p)
    return env


def _remove_locks(layout: WorkdirLayout, ranks) -> None:
    for rank in ranks:
        try:
            release_lock(layout, rank)
        except IoError as exc:
            log.warning("could not remove lock for rank %d: %s", rank, exc)


def _stop(handles: Sequence[subprocess.Popen]) -> None:
    for h in handles:
        if h.poll() is None:
            h.kill()
    for h in handles:
        try:
            h.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass


def spawn_workers(
    config: RunConfig, layout: WorkdirLayout, spec_paths: Sequence[Path]
) -> list[subprocess.Popen]:
    """Start one detached background worker per spec file."""
    launcher = list(config.launcher) if config.launcher else default_launcher()
    env = _child_env()
    handles: list[subprocess.Popen] = []
    try:
        for rank, path in enumerate(spec_paths):
            with open(layout.log_path(rank), "wb") as errlog:
                handles.append(
                    subprocess.Popen(
                        [*launcher, "worker", "--spec", str(path)],
                        stdin=subprocess.DEVNULL,
                        stdout=subprocess.DEVNULL,
                        stderr=errlog,
                        cwd=layout.root,
                        env=env,
                        start_new_session=True,
                    )
                )
    except OSError as exc:
        _stop(handles)
        _remove_locks(layout, range(len(spec_paths)))
        raise SpawnError(f"cannot launch worker {launcher[0]!r}: {exc}") from exc
    return handles


def _describe(handle: subprocess.Popen | None, layout: WorkdirLayout, rank: int) -> str:
    if handle is None:
        return "no process handle"
    code = handle.poll()
    if code is None:
        text = "worker still running"
    elif code < 0:
        try:
            text = f"worker killed by {signal.Signals(-code).name}"
        except ValueError:
            text = f"worker killed by signal {-code}"
    else:
        text = f"worker exited with status {code}"
    try:
        tail = layout.log_path(rank).read_text(errors="replace").strip().splitlines()
    except OSError:
        tail = []
    if tail:
        text += f", last log line: {tail[-1]}"
    return text


def _load_records(layout: WorkdirLayout, nproc: int) -> list[ResultRecord]:
    records = []
    failures = {}
    for rank in range(nproc):
        try:
            rec = load_result(layout.result_path(rank))
        except (FormatError, IoError) as exc:
            failures[rank] = f"unreadable result: {exc}"
            continue
        if rec.rank != rank:
            failures[rank] = f"result file names rank {rec.rank}"
        elif not rec.ok:
            failures[rank] = rec.message or "unspecified error"
        records.append(rec)
    if failures:
        raise WorkerError(failures)
    return records


def _merge(records: Sequence[ResultRecord], store: bool) -> np.ndarray | None:
    if not store:
        return None
    missing = {r.rank: "result has no payload" for r in records if not r.stored}
    if missing:
        raise WorkerError(missing)
    return np.concatenate([r.payload for r in records]) if records else np.empty(0)


def gather_results(
    layout: WorkdirLayout, nproc: int, store: bool
) -> tuple[np.ndarray | None, list[float]]:
    """Merged payload in rank order (None without store) and per-rank CPU."""
    records = _load_records(layout, nproc)
    return _merge(records, store), [r.cpu_seconds for r in records]


def run_master(
    config: RunConfig,
    on_spawn: Callable[[list[subprocess.Popen]], None] | None = None,
) -> RunReport:
    """Run one experiment end to end.

    ``on_spawn`` is called with the worker handles right after launch; it
    exists for fault-injection tests.
    """
    config.validate()
    params = config.partition_params()
    if not check_divisible(params):
        log.warning(
            "maxvalue/nproc = %r is not a whole number of steps of %r; "
            "subrange boundaries may differ from the sequential range",
            params.maxvalue / params.nproc,
            params.step,
        )
    layout = WorkdirLayout(Path(config.workdir))
    create_locks(layout, config.nproc)
    try:
        paths = [
            persist_spec(
                layout,
                WorkerSpec(
                    sr.rank,
                    sr.inf,
                    sr.sup,
                    sr.step,
                    config.compute,
                    config.store,
                    layout.result_name(sr.rank),
                ),
            )
            for sr in make_partition(params)
        ]
    except Exception:
        _remove_locks(layout, range(config.nproc))
        raise

    cpu_mark = time.process_time()
    wall_mark = time.perf_counter()
    handles = spawn_workers(config, layout, paths)
    if on_spawn is not None:
        on_spawn(handles)

    pending = set(range(config.nproc))
    while pending:
        time.sleep(config.poll_interval)
        pending = poll_once(layout, pending)
        if pending and time.perf_counter() - wall_mark >= config.timeout:
            diagnostics = {r: _describe(handles[r], layout, r) for r in sorted(pending)}
            _stop([handles[r] for r in pending])
            _remove_locks(layout, pending)
            _stop(handles)
            raise RunTimeout(pending, config.timeout, diagnostics)

    try:
        records = _load_records(layout, config.nproc)
        merged = _merge(records, config.store)
    finally:
        elapsedtime = time.perf_counter() - wall_mark
        totaltime = time.process_time() - cpu_mark
        for h in handles:
            try:
                h.wait(timeout=10)
            except subprocess.TimeoutExpired:
                log.warning("worker pid %d still running after releasing its lock", h.pid)

    worker_cpu = [r.cpu_seconds for r in records]
    return RunReport(
        config=config,
        elapsedtime=elapsedtime,
        totaltime=totaltime,
        executiontime=mean_worker_cpu(worker_cpu),
        worker_cpu=worker_cpu,
        result_count=sum(r.count for r in records),
        results=merged,
    )
