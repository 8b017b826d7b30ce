import io
import math
import statistics

import pytest
from hypothesis import given
from hypothesis import strategies as st

from linkweave.metrics import (
    TraceRecord,
    average_summaries,
    bandwidth_series,
    format_summary,
    moving_average,
    percentile,
    read_trace,
    summarize,
    trace_to_csv,
    write_trace,
)


def delivered(t, size, link=0, seq=0, latency=None):
    return TraceRecord(t, link, "delivered", seq, size, latency)


def test_single_delivery_window_rate():
    assert moving_average([delivered(100_000, 1400)], 100_000) == [(100_000, 14_000.0)]


def test_window_excludes_old_deliveries():
    trace = [delivered(0, 1000), delivered(100_000, 1000), delivered(150_000, 1000)]
    assert [r for _, r in moving_average(trace, 100_000)] == [10_000, 10_000, 20_000]


def test_bad_window():
    with pytest.raises(ValueError):
        moving_average([], 0)


def test_longer_window_is_smoother():
    trace = []
    t = 0
    for i in range(3000):
        t += 1000 if i % 10 else 40_000
        trace.append(delivered(t, 1200))
    rows = bandwidth_series(trace)
    short = statistics.pvariance(r[1] for r in rows[1500:])
    long = statistics.pvariance(r[2] for r in rows[1500:])
    assert long <= short


@given(st.lists(st.integers(1, 1400), min_size=1, max_size=200))
def test_integral_of_rate_is_bytes(sizes):
    # deliveries on a fixed grid: summing rate * window over disjoint windows gives total bytes
    trace = [delivered(i * 1000, s) for i, s in enumerate(sizes)]
    rates = moving_average(trace, 1000)
    assert sum(r * 1000 / 1e6 for _, r in rates) == pytest.approx(sum(sizes))


def test_percentile_nearest_rank():
    assert percentile([5, 1, 4, 2, 3], 50) == 3
    assert percentile(list(range(1, 101)), 99) == 99
    assert percentile([7], 99) == 7
    assert math.isnan(percentile([], 50))


def test_csv_round_trip():
    trace = [TraceRecord(0, 1, "sent", 0, 1200), delivered(5, 1200, 1, 0, 5)]
    buf = io.StringIO()
    write_trace(trace, buf)
    assert buf.getvalue().splitlines()[:2] == ["t_us,link_id,event,seq,size,latency_us", "0,1,sent,0,1200,"]
    buf.seek(0)
    assert read_trace(buf) == trace
    assert trace_to_csv(trace) == buf.getvalue()
    with pytest.raises(ValueError):
        read_trace(io.StringIO("a,b\n"))


def test_summary():
    trace = [TraceRecord(0, 0, "sent", 0, 1000)]
    trace += [delivered(t, 1000, link=i % 2, seq=i, latency=t) for i, t in enumerate(range(100_000, 1_100_001, 100_000))]
    trace.append(TraceRecord(50, 0, "retransmit", 0, 1000))
    s = summarize(trace)
    assert s["delivered_bytes"] == 11_000
    assert s["goodput_Bps"] == pytest.approx(10_000)
    assert s["first_byte_us"] == 100_000
    assert s["steady_goodput_Bps"] == pytest.approx(10_000)
    assert s["retransmits"] == 1
    assert s["latency_p50_us"] == 600_000
    assert s["link0_goodput_Bps"] + s["link1_goodput_Bps"] == pytest.approx(s["goodput_Bps"])


def test_empty_summary():
    assert summarize([])["goodput_Bps"] == 0


def test_average_and_format():
    avg = average_summaries([{"a": 1.0, "b": 2.0}, {"a": 3.0}])
    assert avg == {"a": 2.0, "b": 2.0}
    assert format_summary({"a": 2.0, "c": 1.25}) == "a: 2\nc: 1.250\n"
