import socket
import threading
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowal.core import ConnectionLost, FlowRecord, LabelSet, MissingColumn, UnknownLabel
from flowal.ingest import (
    ClassSampler,
    IngestConfig,
    load_initial_dataset,
    preprocess,
    read_offline,
    read_stream,
    read_text,
    sample_by_class,
    threaded,
)

LABELS = LabelSet(["DoH", "TLS"])
CFG = IngestConfig("unused.csv", ["bytes", "packets"], label_column="label")


def test_reads_three_rows_with_ground_truth():
    text = "bytes,packets,label\n100,3,DoH\n2000,12,TLS\n5,1,TLS\n"
    records = list(read_text(text, CFG, LABELS))
    assert [r.record_id for r in records] == [0, 1, 2]
    assert [r.ground_truth for r in records] == ["DoH", "TLS", "TLS"]
    assert records[1].fields["bytes"] == 2000.0


def test_missing_column_in_header():
    with pytest.raises(MissingColumn):
        list(read_text("bytes,label\n100,DoH\n", CFG, LABELS))


def test_non_numeric_value_is_dropped_and_counted():
    reader = read_text("bytes,packets,label\nabc,3,DoH\n10,1,TLS\n", CFG, LABELS)
    records = list(reader)
    assert len(records) == 1 and records[0].record_id == 1
    assert reader.dropped == 1


def test_wrong_row_length_and_non_finite_are_dropped():
    reader = read_text("bytes,packets,label\n1,2\n1,inf,DoH\n1,2,TLS\n", CFG, LABELS)
    assert len(list(reader)) == 1
    assert reader.dropped == 2


def test_headerless_input_is_missing_column():
    with pytest.raises(MissingColumn):
        list(read_text("100,3,DoH\n200,4,TLS\n", CFG, LABELS))


def test_unknown_label_raises():
    with pytest.raises(UnknownLabel):
        list(read_text("bytes,packets,label\n1,2,HTTP\n", CFG, LABELS))


def test_id_column_and_restart_offset(tmp_path):
    path = tmp_path / "flows.csv"
    path.write_text("id,bytes,packets,label\n10,1,1,DoH\n11,2,2,TLS\n12,3,3,DoH\n")
    cfg = IngestConfig(str(path), ["bytes", "packets"], "label", id_column="id")
    assert [r.record_id for r in read_offline(cfg, LABELS)] == [10, 11, 12]
    assert [r.record_id for r in read_offline(cfg, LABELS, start_after=11)] == [12]


def test_empty_file_yields_nothing(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    assert list(read_offline(IngestConfig(str(path), ["bytes"]))) == []


def test_config_validation():
    with pytest.raises(ValueError):
        IngestConfig("x", [])
    with pytest.raises(ValueError):
        IngestConfig("x", ["a"], sampling={"DoH": 1.5})
    assert IngestConfig("tcp://127.0.0.1:9", ["a"]).is_stream
    assert not IngestConfig("flows.csv", ["a"]).is_stream


def _serve(lines, delay):
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)
    port = srv.getsockname()[1]

    def run():
        conn, _ = srv.accept()
        with conn:
            for line in lines:
                conn.sendall(line.encode())
                time.sleep(delay)
        srv.close()

    threading.Thread(target=run, daemon=True).start()
    return f"tcp://127.0.0.1:{port}"


def test_stream_yields_in_arrival_order_and_ends_on_close():
    endpoint = _serve(["bytes,packets,label\n", "1,1,DoH\n", "2,2,TLS\n"], delay=0.3)
    cfg = IngestConfig(endpoint, ["bytes", "packets"], "label")
    t0 = time.monotonic()
    records = list(read_stream(cfg, LABELS))
    assert [r.fields["bytes"] for r in records] == [1.0, 2.0]
    assert time.monotonic() - t0 >= 0.5


def test_stream_through_bounded_queue():
    endpoint = _serve(["bytes,packets,label\n"] + [f"{i},1,DoH\n" for i in range(50)], delay=0.0)
    cfg = IngestConfig(endpoint, ["bytes", "packets"], "label", queue_capacity=4)
    out = list(threaded(read_stream(cfg, LABELS), cfg.queue_capacity))
    assert [r.record_id for r in out] == list(range(50))


def test_unreachable_stream_is_connection_lost():
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    port = srv.getsockname()[1]
    srv.close()
    with pytest.raises(ConnectionLost):
        list(read_stream(IngestConfig(f"tcp://127.0.0.1:{port}", ["a"]), connect_timeout=1.0))


def test_threaded_reraises_producer_errors():
    def gen():
        yield 1
        raise ConnectionLost("gone")

    it = threaded(gen(), 2)
    assert next(it) == 1
    with pytest.raises(ConnectionLost):
        next(it)


def _records(classes):
    return [FlowRecord(i, {"x": 1.0}, c) for i, c in enumerate(classes)]


def test_sampler_zero_ratio_keeps_nothing():
    assert sample_by_class(_records(["TLS"] * 10), {"TLS": 0.0}, 0) == []


def test_sampler_empty_map_is_identity():
    recs = _records(["TLS", "DoH"] * 5)
    assert sample_by_class(recs, {}, 0) == recs


def test_sampler_half_ratio_count():
    kept = sample_by_class(_records(["A"] * 10_000), {"A": 0.5}, 42)
    # same generator simulated directly: (default_rng(42).random(10000) < 0.5).sum()
    assert len(kept) == 5015
    assert 4700 <= len(kept) <= 5300


@given(st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_sampler_state_round_trip(ratio, seed):
    recs = _records(["A", "B"] * 20)
    s1 = ClassSampler({"A": ratio}, seed)
    first = [s1.keep(r) for r in recs[:20]]
    state = s1.get_state()
    rest = [s1.keep(r) for r in recs[20:]]
    s2 = ClassSampler({"A": ratio}, 0)
    s2.set_state(state)
    assert [s2.keep(r) for r in recs[20:]] == rest
    assert all(k for k, r in zip(first, recs) if r.ground_truth == "B")


def test_preprocess_extracts_in_column_order():
    r = FlowRecord(0, {"bytes": 100, "packets": 3})
    assert preprocess(r, CFG).values.tolist() == [100.0, 3.0]


def test_preprocess_missing_column():
    with pytest.raises(MissingColumn):
        preprocess(FlowRecord(0, {"bytes": 100}), CFG)


def test_preprocess_scientific_notation():
    r = FlowRecord(0, {"bytes": "1e3", "packets": "2"})
    assert preprocess(r, CFG).values.tolist() == [1000.0, 2.0]


def test_preprocess_log1p_is_signed():
    cfg = IngestConfig("x", ["a", "b"], transform="log1p")
    v = preprocess(FlowRecord(0, {"a": np.e - 1, "b": -(np.e - 1)}), cfg).values
    assert v.tolist() == pytest.approx([1.0, -1.0])


def test_initial_dataset_gets_negative_ids(tmp_path):
    path = tmp_path / "d0.csv"
    path.write_text("bytes,packets,label\n1,1,DoH\n2,2,TLS\n")
    ds = load_initial_dataset(str(path), CFG, LABELS)
    assert ds.record_ids() == [-1, -2]
    assert ds.counts_by_name() == {"DoH": 1, "TLS": 1}
