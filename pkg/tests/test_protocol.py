import math
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spmdpool import protocol
from spmdpool.protocol import (
    FormatError,
    IoError,
    ResultRecord,
    WorkdirLayout,
    WorkerSpec,
    create_locks,
    decode_result,
    decode_spec,
    encode_result,
    encode_spec,
    load_result,
    persist_result,
    persist_spec,
    poll_once,
    release_lock,
)
from spmdpool.runtime import run_worker


@pytest.fixture
def layout(tmp_path):
    return WorkdirLayout(tmp_path)


def spec(rank=0, inf=0.0, sup=2500.0, step=0.001, expr="y = x", store=True):
    return WorkerSpec(rank, inf, sup, step, expr, store, f"out{rank}.res")


class TestLocks:
    def test_create_three(self, layout):
        create_locks(layout, 3)
        for i in range(3):
            assert layout.lock_path(i).stat().st_size == 0
        assert sorted(p.name for p in layout.root.iterdir()) == ["filelock0", "filelock1", "filelock2"]

    def test_stale_artifacts_removed(self, layout):
        root = layout.root
        for name in ["out0.res", "out5.res", "filelock7", "fileworker4.spec", "fileworker6.log",
                     ".out1.res.abc.tmp", "notes.txt", "fileworker1.spec"]:
            (root / name).write_bytes(b"x")
        create_locks(layout, 2)
        assert sorted(p.name for p in root.iterdir()) == [
            "filelock0", "filelock1", "fileworker1.spec", "notes.txt",
        ]

    def test_missing_root(self, tmp_path):
        with pytest.raises(IoError):
            create_locks(WorkdirLayout(tmp_path / "nope"), 2)

    def test_poll(self, layout):
        create_locks(layout, 3)
        assert poll_once(layout, {0, 1, 2}) == {0, 1, 2}
        release_lock(layout, 1)
        assert poll_once(layout, {0, 1, 2}) == {0, 2}
        assert poll_once(layout, set()) == set()

    def test_release_is_idempotent(self, layout):
        create_locks(layout, 1)
        release_lock(layout, 0)
        release_lock(layout, 0)
        assert not layout.lock_path(0).exists()


class TestSpecFormat:
    def test_header_layout(self):
        data = encode_spec(spec())
        assert data.startswith(b"SPMDSPEC 1\nrank 0\n")
        assert data == (
            b"SPMDSPEC 1\nrank 0\ninf 0.0\nsup 2500.0\nstep 0.001\n"
            b"expr y = x\nstore true\nout out0.res\n"
        )

    def test_round_trip_keeps_bits(self):
        s = spec(rank=1, inf=2500.001, sup=5000.0, expr="y = 5432.060708*cos((sin(x^9.876))^-1.2345)")
        back = decode_spec(encode_spec(s))
        assert back == s
        assert struct.pack("<d", back.inf) == struct.pack("<d", 2500.001)

    @pytest.mark.parametrize(
        "cut, field",
        [(len(b"SPMDSPEC 1\nrank 0\n"), "inf"), (len(b"SPMDSPEC 1\nrank 0\ninf 0."), "inf")],
    )
    def test_truncated_names_field(self, cut, field):
        with pytest.raises(FormatError, match=f"'{field}'"):
            decode_spec(encode_spec(spec())[:cut])

    @pytest.mark.parametrize(
        "data",
        [b"", b"SPMDSPEC 2\n", b"SPMDRES 1\n", encode_spec(spec()) + b"junk\n",
         encode_spec(spec()).replace(b"store true", b"store yes"),
         encode_spec(spec()).replace(b"step 0.001", b"step 0.0")],
    )
    def test_rejects_malformed(self, data):
        with pytest.raises(FormatError):
            decode_spec(data)

    def test_multiline_expr_rejected(self):
        with pytest.raises(FormatError):
            encode_spec(spec(expr="y = x\nz"))

    @given(
        st.integers(0, 10**6),
        st.floats(allow_nan=False, allow_infinity=False),
        st.floats(allow_nan=False, allow_infinity=False),
        st.floats(min_value=1e-300, max_value=1e300),
        st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\n\r"), max_size=40),
        st.booleans(),
    )
    def test_round_trip_property(self, rank, inf, sup, step, expr, store):
        s = WorkerSpec(rank, inf, sup, step, expr, store, f"out{rank}.res")
        back = decode_spec(encode_spec(s))
        assert back == s
        assert struct.pack("<3d", back.inf, back.sup, back.step) == struct.pack("<3d", inf, sup, step)


class TestResultFormat:
    def test_no_store_ends_after_header(self):
        data = encode_result(ResultRecord(2, True, 1.5, 7))
        assert data == b"SPMDRES 1\nrank 2\nstatus ok\ncpu_seconds 1.5\ncount 7\nstore false\n"
        assert decode_result(data) == ResultRecord(2, True, 1.5, 7)

    def test_error_record(self):
        rec = ResultRecord(0, False, 0.25, 0, None, 'unknown variable q\n"quoted"')
        assert decode_result(encode_result(rec)) == rec

    def test_error_with_payload_rejected(self):
        with pytest.raises(FormatError):
            encode_result(ResultRecord(0, False, 0.0, 1, np.zeros(1), "boom"))

    def test_nan_payload_bits_preserved(self):
        quiet = np.frombuffer(struct.pack("<Q", 0x7FF8000000000123), "<f8")[0]
        payload = np.array([math.nan, quiet, -0.0, math.inf, 5e-324])
        back = decode_result(encode_result(ResultRecord(0, True, 1.0, 5, payload)))
        assert back.payload.tobytes() == payload.astype("<f8").tobytes()

    def test_payload_little_endian(self):
        data = encode_result(ResultRecord(0, True, 0.0, 1, np.array([1.0])))
        assert data.endswith(b"data\n" + struct.pack("<d", 1.0))

    @pytest.mark.parametrize("cut", [1, 8, 20])
    def test_short_payload(self, cut):
        data = encode_result(ResultRecord(0, True, 0.0, 4, np.arange(4.0)))
        with pytest.raises(FormatError):
            decode_result(data[:-cut])

    def test_count_mismatch(self):
        with pytest.raises(FormatError):
            encode_result(ResultRecord(0, True, 0.0, 3, np.arange(4.0)))

    def test_random_doubles_round_trip(self, layout):
        rng = np.random.default_rng(11)
        payload = rng.integers(0, 2**64, 100_000, dtype=np.uint64).view(np.float64)
        rec = ResultRecord(3, True, 12.5, payload.size, payload)
        path = persist_result(layout, rec)
        assert path.name == "out3.res"
        back = load_result(path)
        assert back.payload.tobytes() == payload.tobytes()
        assert back == rec

    @given(st.lists(st.floats(allow_nan=True), max_size=50), st.floats(0, 1e6), st.booleans())
    @settings(max_examples=100)
    def test_round_trip_property(self, values, cpu, store):
        payload = np.array(values, dtype=np.float64) if store else None
        rec = ResultRecord(1, True, cpu, len(values), payload)
        assert decode_result(encode_result(rec)) == rec


def test_persist_spec_path(layout):
    path = persist_spec(layout, spec(rank=4))
    assert path == layout.root / "fileworker4.spec"
    assert decode_spec(path.read_bytes()) == spec(rank=4)
    assert not [p for p in layout.root.iterdir() if p.name.endswith(".tmp")]


def test_result_persisted_before_lock_released(layout, monkeypatch):
    """The worker's journal: write, fsync, rename, then (and only then) unlink the lock."""
    create_locks(layout, 1)
    path = persist_spec(layout, spec(sup=0.01))
    events = []
    real_replace, real_unlink, real_fsync = os.replace, os.unlink, os.fsync

    def replace(src, dst):
        events.append(("replace", os.path.basename(dst)))
        return real_replace(src, dst)

    def unlink(p, *a, **k):
        events.append(("unlink", os.path.basename(p)))
        return real_unlink(p, *a, **k)

    def fsync(fd):
        events.append(("fsync",))
        return real_fsync(fd)

    monkeypatch.setattr(protocol.os, "replace", replace)
    monkeypatch.setattr(protocol.os, "unlink", unlink)
    monkeypatch.setattr(protocol.os, "fsync", fsync)

    assert run_worker(path) == 0
    i_replace = events.index(("replace", "out0.res"))
    i_unlink = events.index(("unlink", "filelock0"))
    assert ("fsync",) in events[:i_replace]
    assert i_replace < i_unlink
    # the rename itself is made durable before the lock goes away
    assert ("fsync",) in events[i_replace:i_unlink]
    assert load_result(layout.result_path(0)).count == 11
