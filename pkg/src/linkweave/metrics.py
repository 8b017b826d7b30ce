"""Trace records, moving-average bandwidth series and run summaries."""

from __future__ import annotations

import csv
import io
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, TextIO, Tuple

from .link_model import US_PER_S

TRACE_HEADER = ("t_us", "link_id", "event", "seq", "size", "latency_us")
EVENTS = ("sent", "delivered", "acked", "retransmit")


class TraceRecord(NamedTuple):
    t_us: int
    link_id: int
    event: str
    seq: int
    size: int
    latency_us: Optional[int] = None


def write_trace(records: Iterable[TraceRecord], out: TextIO) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for r in records:
        writer.writerow((r.t_us, r.link_id, r.event, r.seq, r.size, "" if r.latency_us is None else r.latency_us))


def read_trace(src: TextIO) -> List[TraceRecord]:
    reader = csv.reader(src)
    header = next(reader, None)
    if tuple(header or ()) != TRACE_HEADER:
        raise ValueError(f"unexpected trace header {header!r}")
    out = []
    for row in reader:
        t, link, event, seq, size, latency = row
        out.append(TraceRecord(int(t), int(link), event, int(seq), int(size), int(latency) if latency else None))
    return out


def trace_to_csv(records: Iterable[TraceRecord]) -> str:
    buf = io.StringIO()
    write_trace(records, buf)
    return buf.getvalue()


def moving_average(trace: Iterable[TraceRecord], window_us: int) -> List[Tuple[int, float]]:
    """Delivered bytes per second over the trailing ``window_us``, at every delivery."""
    if window_us <= 0:
        raise ValueError("window must be positive")
    deliveries = [(r.t_us, r.size) for r in trace if r.event == "delivered"]
    out = []
    total = 0
    lo = 0
    for t, size in deliveries:
        total += size
        while deliveries[lo][0] <= t - window_us:
            total -= deliveries[lo][1]
            lo += 1
        out.append((t, total * US_PER_S / window_us))
    return out


def bandwidth_series(trace: Sequence[TraceRecord], windows_us: Sequence[int] = (100_000, 1_000_000)) -> List[Tuple]:
    """One row per delivery: time followed by the rate for each window."""
    series = [moving_average(trace, w) for w in windows_us]
    if not series or not series[0]:
        return []
    return [(pts[0][0],) + tuple(s[i][1] for s in series) for i, pts in enumerate(zip(*series))]


def percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile; ``q`` in [0, 100]."""
    if not values:
        return float("nan")
    ordered = sorted(values)
    rank = max(1, -(-len(ordered) * q // 100))
    return ordered[int(rank) - 1]


def summarize(trace: Sequence[TraceRecord]) -> Dict[str, float]:
    delivered = [r for r in trace if r.event == "delivered"]
    sent = [r for r in trace if r.event == "sent"]
    summary: Dict[str, float] = {
        "delivered_bytes": float(sum(r.size for r in delivered)),
        "retransmits": float(sum(1 for r in trace if r.event == "retransmit")),
    }
    if not delivered:
        summary.update(goodput_Bps=0.0, steady_goodput_Bps=0.0)
        return summary
    start = sent[0].t_us if sent else delivered[0].t_us
    first, last = delivered[0].t_us, delivered[-1].t_us
    span = max(1, last - start)
    summary["goodput_Bps"] = summary["delivered_bytes"] * US_PER_S / span
    # steady state: the second half of the delivery span
    cut = first + (last - first) // 2
    tail = sum(r.size for r in delivered if r.t_us > cut)
    summary["steady_goodput_Bps"] = tail * US_PER_S / max(1, last - cut)
    per_link: Dict[int, int] = {}
    for r in delivered:
        per_link[r.link_id] = per_link.get(r.link_id, 0) + r.size
    for link_id in sorted(per_link):
        summary[f"link{link_id}_goodput_Bps"] = per_link[link_id] * US_PER_S / span
    latencies = [r.latency_us for r in delivered if r.latency_us is not None]
    summary["latency_p50_us"] = float(percentile(latencies, 50))
    summary["latency_p99_us"] = float(percentile(latencies, 99))
    summary["first_byte_us"] = float(first - start)
    return summary


def average_summaries(summaries: Sequence[Dict[str, float]]) -> Dict[str, float]:
    keys: List[str] = []
    for s in summaries:
        keys.extend(k for k in s if k not in keys)
    out = {}
    for k in keys:
        vals = [s[k] for s in summaries if k in s]
        out[k] = sum(vals) / len(vals)
    return out


def format_summary(summary: Dict[str, float]) -> str:
    lines = []
    for k, v in summary.items():
        lines.append(f"{k}: {int(v)}" if float(v).is_integer() else f"{k}: {v:.3f}")
    return "\n".join(lines) + "\n"
