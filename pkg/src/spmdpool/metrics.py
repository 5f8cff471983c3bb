"""Speedups, benchmark sweeps over the (m, nproc) grid, and table rendering."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from spmdpool.expr import WORKLOAD

__all__ = [
    "METRICS",
    "BenchBase",
    "BenchGrid",
    "EmptyInput",
    "NonPositiveTime",
    "SpeedupReport",
    "bench_sweep",
    "mean_worker_cpu",
    "parse_csv",
    "render_table",
    "round2",
    "speedup",
    "speedup_report",
    "to_csv",
]

log = logging.getLogger(__name__)

#: metric name -> (RunReport attribute, table caption)
METRICS = {
    "worker_cpu_mean": ("executiontime", "Mean worker CPU time per process"),
    "master_total": ("totaltime", "Total master CPU time"),
    "elapsed": ("elapsedtime", "Elapsed wall-clock time"),
}

CSV_HEADER = ["metric", "store", "m", "nproc", "mean_seconds", "reps"]
MISSING = "—"


class EmptyInput(ValueError):
    pass


class NonPositiveTime(ValueError):
    pass


def mean_worker_cpu(t2s: Sequence[float]) -> float:
    """Arithmetic mean, accumulated left to right in binary64."""
    if len(t2s) == 0:
        raise EmptyInput("no worker CPU times")
    total = 0.0
    for t in t2s:
        if t < 0:
            raise ValueError(f"negative CPU time {t!r}")
        total += t
    return total / len(t2s)


def speedup(t_base: float, t_p: float) -> float:
    if not (t_base > 0 and t_p > 0):
        raise NonPositiveTime(f"times must be > 0, got {t_base!r} and {t_p!r}")
    return t_base / t_p


@dataclass
class BenchGrid:
    """Means over ``reps`` runs of one metric, keyed ``rows[m][nproc]``.

    A cell holding None is a configuration whose runs failed; ``notes``
    says why.
    """

    metric: str
    store: bool
    rows: dict[int, dict[int, float | None]]
    reps: int = 4
    notes: dict[tuple[int, int], str] = field(default_factory=dict, compare=False)

    def nprocs(self) -> list[int]:
        return sorted({p for row in self.rows.values() for p in row})


@dataclass
class SpeedupReport:
    baseline: float
    per_nproc: dict[int, float]
    best_nproc: int
    best_ratio: float


def speedup_report(row: Mapping[int, float | None]) -> SpeedupReport:
    """Speedups of one grid row against its own nproc=1 cell.

    Failed cells are skipped; ties for the best ratio go to the smaller nproc.
    """
    baseline = row.get(1)
    if baseline is None:
        raise EmptyInput("row has no nproc=1 baseline")
    per = {p: speedup(baseline, t) for p, t in sorted(row.items()) if t is not None}
    best = max(per, key=lambda p: (per[p], -p))
    return SpeedupReport(baseline, per, best, per[best])


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class BenchBase:
    base_maxvalue: float = 10000.0
    step: float = 0.001
    compute: str = WORKLOAD
    workdir: Path = field(default_factory=Path.cwd)
    poll_interval: float = 0.1
    timeout: float = 600.0


def _mean(values: Sequence[float]) -> float:
    total = 0.0
    for v in values:
        total += v
    return total / len(values)


def bench_sweep(
    m_list: Iterable[int],
    nproc_list: Iterable[int],
    reps: int = 4,
    store: bool = True,
    base: BenchBase | None = None,
    runner: Callable | None = None,
) -> dict[str, BenchGrid]:
    """Run every (m, nproc) configuration ``reps`` times, one run at a time.

    Returns one grid per metric in :data:`METRICS`. A configuration whose
    run raises a run error is recorded as a missing cell with a note.
    """
    from spmdpool.runtime import RunConfig, RunError, run_master

    if reps < 1:
        raise ValueError("reps must be >= 1")
    base = base or BenchBase()
    runner = runner or run_master
    m_list, nproc_list = list(m_list), list(nproc_list)
    grids = {name: BenchGrid(name, store, {}, reps) for name in METRICS}
    for m in m_list:
        for g in grids.values():
            g.rows[m] = {}
        for nproc in nproc_list:
            observed: dict[str, list[float]] = {name: [] for name in METRICS}
            failure = None
            for rep in range(reps):
                config = RunConfig(
                    nproc=nproc,
                    maxvalue=m * base.base_maxvalue,
                    step=base.step,
                    compute=base.compute,
                    store=store,
                    workdir=Path(base.workdir),
                    poll_interval=base.poll_interval,
                    timeout=base.timeout,
                )
                try:
                    report = runner(config)
                except (RunError, OSError) as exc:
                    failure = f"rep {rep + 1}: {exc}"
                    log.warning("m=%s nproc=%s failed: %s", m, nproc, exc)
                    break
                for name, (attr, _) in METRICS.items():
                    observed[name].append(getattr(report, attr))
                log.info(
                    "m=%s nproc=%s rep=%d elapsed=%.3f", m, nproc, rep + 1, report.elapsedtime
                )
            for name, g in grids.items():
                if failure is None:
                    g.rows[m][nproc] = _mean(observed[name])
                else:
                    g.rows[m][nproc] = None
                    g.notes[(m, nproc)] = failure
    return grids


# ---------------------------------------------------------------------------
# rendering


def round2(value: float) -> str:
    """Two decimals, halves rounded away from zero (on the shortest repr)."""
    return str(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def _caption(grid: BenchGrid) -> str:
    what = METRICS.get(grid.metric, (None, grid.metric))[1]
    storage = "with data storage" if grid.store else "no data storage"
    return f"{what} (s), {storage}, mean of {grid.reps} run(s)"


def render_table(grid: BenchGrid, fmt: str = "paper") -> str:
    if fmt == "csv":
        return to_csv([grid])
    if fmt != "paper":
        raise ValueError(f"unknown table format {fmt!r}")
    cols = grid.nprocs()
    lines = [_caption(grid), " ".join(["m |", *map(str, cols)])]
    for m in sorted(grid.rows):
        row = grid.rows[m]
        cells = [MISSING if row.get(p) is None else round2(row[p]) for p in cols]
        lines.append(" ".join([f"{m} |", *cells]))
    return "\n".join(lines) + "\n"


def to_csv(grids: Iterable[BenchGrid]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for g in grids:
        for m in sorted(g.rows):
            for p in sorted(g.rows[m]):
                v = g.rows[m][p]
                w.writerow(
                    [g.metric, "true" if g.store else "false", m, p, "" if v is None else repr(v), g.reps]
                )
    return buf.getvalue()


def parse_csv(text: str) -> list[BenchGrid]:
    """Inverse of :func:`to_csv`; one grid per (metric, store) in file order."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != CSV_HEADER:
        raise ValueError(f"bad CSV header {header!r}, expected {CSV_HEADER!r}")
    grids: dict[tuple[str, bool], BenchGrid] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise ValueError(f"line {lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
        metric, store_s, m_s, p_s, mean_s, reps_s = row
        if store_s not in ("true", "false"):
            raise ValueError(f"line {lineno}: store must be true or false")
        key = (metric, store_s == "true")
        reps = int(reps_s)
        g = grids.setdefault(key, BenchGrid(metric, key[1], {}, reps))
        if g.reps != reps:
            raise ValueError(f"line {lineno}: mixed reps within {metric}/{store_s}")
        g.rows.setdefault(int(m_s), {})[int(p_s)] = float(mean_s) if mean_s else None
    return list(grids.values())
