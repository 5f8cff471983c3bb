import math
import sys
import time

import numpy as np
import pytest

from helpers import bits, delayed_launcher
from spmdpool.expr import WORKLOAD, evaluate_range, parse
from spmdpool.partition import PartitionParams, expand_colon, make_partition
from spmdpool.protocol import (
    ResultRecord,
    WorkdirLayout,
    WorkerSpec,
    create_locks,
    load_result,
    persist_result,
    persist_spec,
)
from spmdpool.runtime import (
    RunConfig,
    RunTimeout,
    SpawnError,
    WorkerError,
    gather_results,
    run_master,
    run_worker,
)


def one_rank(workdir, rank=0, nproc=1, maxvalue=10.0, step=0.001, expr=WORKLOAD, store=True):
    layout = WorkdirLayout(workdir)
    create_locks(layout, nproc)
    sr = make_partition(PartitionParams(nproc, maxvalue, step))[rank]
    path = persist_spec(layout, WorkerSpec(rank, sr.inf, sr.sup, sr.step, expr, store, f"out{rank}.res"))
    return layout, path


class TestWorker:
    def test_computes_and_releases(self, workdir):
        layout, path = one_rank(workdir, maxvalue=1.0)
        assert run_worker(path) == 0
        assert not layout.lock_path(0).exists()
        rec = load_result(layout.result_path(0))
        xs = expand_colon(make_partition(PartitionParams(1, 1.0, 0.001))[0])
        assert rec.ok and rec.count == 1001 and rec.cpu_seconds >= 0
        assert bits(rec.payload) == bits(evaluate_range(parse(WORKLOAD), xs))

    def test_rank0_of_four_at_benchmark_scale(self, workdir):
        layout, path = one_rank(workdir, rank=0, nproc=4, maxvalue=10000.0, store=False)
        assert run_worker(path) == 0
        rec = load_result(layout.result_path(0))
        assert rec.count == 2500001
        assert rec.payload is None

    def test_first_value_is_nan(self, workdir):
        layout, path = one_rank(workdir, rank=0, nproc=4, maxvalue=4.0)
        assert run_worker(path) == 0
        assert math.isnan(load_result(layout.result_path(0)).payload[0])

    def test_unknown_variable(self, workdir):
        layout, path = one_rank(workdir, expr="y = q")
        assert run_worker(path) == 3
        rec = load_result(layout.result_path(0))
        assert not rec.ok and "unknown variable q" in rec.message
        assert not layout.lock_path(0).exists()

    def test_parse_error_writes_record(self, workdir):
        layout, path = one_rank(workdir, expr="y = (x")
        assert run_worker(path) == 2
        assert not load_result(layout.result_path(0)).ok
        assert not layout.lock_path(0).exists()

    def test_bad_spec_keeps_lock(self, workdir):
        layout = WorkdirLayout(workdir)
        create_locks(layout, 1)
        path = layout.spec_path(0)
        path.write_bytes(b"SPMDSPEC 1\nrank 0\n")
        assert run_worker(path) == 2
        assert layout.lock_path(0).exists()
        assert not layout.result_path(0).exists()


class TestGather:
    def test_rank_order(self, workdir):
        layout = WorkdirLayout(workdir)
        for rank, vals in [(1, [3.0, 4.0]), (0, [1.0, 2.0])]:
            persist_result(layout, ResultRecord(rank, True, rank + 0.5, 2, np.array(vals)))
        merged, cpu = gather_results(layout, 2, store=True)
        assert merged.tolist() == [1.0, 2.0, 3.0, 4.0]
        assert cpu == [0.5, 1.5]

    def test_no_store(self, workdir):
        layout = WorkdirLayout(workdir)
        persist_result(layout, ResultRecord(0, True, 1.0, 5))
        assert gather_results(layout, 1, store=False) == (None, [1.0])

    def test_failures_collected(self, workdir):
        layout = WorkdirLayout(workdir)
        persist_result(layout, ResultRecord(0, False, 0.0, 0, None, "boom"))
        with pytest.raises(WorkerError) as info:
            gather_results(layout, 2, store=True)
        assert info.value.failures[0] == "boom"
        assert "unreadable" in info.value.failures[1]


class TestMaster:
    def test_small_run(self, workdir):
        report = run_master(RunConfig(2, 10, 1, "y = x", workdir=workdir))
        assert report.results.tolist() == [float(v) for v in range(11)]
        assert report.result_count == 11
        assert not list(workdir.glob("filelock*"))
        assert report.elapsedtime > 0 and report.totaltime >= 0

    def test_execution_time_is_mean_of_worker_cpu(self, workdir):
        report = run_master(RunConfig(3, 3.0, 0.001, WORKLOAD, workdir=workdir))
        total = 0.0
        for t in report.worker_cpu:
            total += t
        assert report.executiontime == total / 3
        assert len(report.worker_cpu) == 3

    def test_no_store_run(self, workdir):
        report = run_master(RunConfig(2, 10, 1, "y = x", store=False, workdir=workdir))
        assert report.results is None and report.result_count == 11

    def test_merge_order_ignores_finish_order(self, workdir):
        # later ranks finish first
        cfg = RunConfig(3, 30, 1, "y = x^2", workdir=workdir, launcher=delayed_launcher({0: 1.5, 1: 0.7}))
        report = run_master(cfg)
        assert report.results.tolist() == [float(v * v) for v in range(31)]

    def test_spawn_failure_cleans_up(self, workdir):
        cfg = RunConfig(2, 10, 1, "y = x", workdir=workdir, launcher=[str(workdir / "no-such-binary")])
        with pytest.raises(SpawnError):
            run_master(cfg)
        assert not list(workdir.glob("filelock*"))

    def test_timeout_names_rank(self, workdir):
        cfg = RunConfig(
            2, 10, 1, "y = x", workdir=workdir, timeout=2.0, launcher=delayed_launcher({1: 60})
        )
        t0 = time.perf_counter()
        with pytest.raises(RunTimeout) as info:
            run_master(cfg)
        assert time.perf_counter() - t0 <= 2.0 + 2 * cfg.poll_interval + 0.5
        assert info.value.pending == [1]
        assert "rank 1" in str(info.value)
        assert not list(workdir.glob("filelock*"))

    def test_worker_error_surfaces_message(self, workdir):
        with pytest.raises(WorkerError, match="unknown variable q") as info:
            run_master(RunConfig(2, 10, 1, "y = q", workdir=workdir))
        assert set(info.value.failures) == {0, 1}

    def test_stale_results_do_not_leak(self, workdir):
        run_master(RunConfig(4, 8, 1, "y = x", workdir=workdir))
        report = run_master(RunConfig(2, 8, 1, "y = x + 1", workdir=workdir))
        assert report.results.tolist() == [float(v + 1) for v in range(9)]
        assert sorted(p.name for p in workdir.glob("out*.res")) == ["out0.res", "out1.res"]

    @pytest.mark.slow
    def test_benchmark_scale_count(self, workdir):
        report = run_master(RunConfig(4, 10000, 0.001, WORKLOAD, store=False, workdir=workdir))
        assert report.result_count == 10000001


def test_worker_subprocess_uses_this_interpreter():
    from spmdpool.runtime import default_launcher

    assert default_launcher()[0] == sys.executable
