import pytest
from hypothesis import given
from hypothesis import strategies as st

from linkweave.link_model import LinkState, LinkStatus
from linkweave.reliability import (
    INITIAL_RTO_US,
    MAX_SEQ,
    MIN_RTO_US,
    NO_SEQ,
    ProtocolError,
    RecvTracker,
    SendTracker,
    rto_for,
)
from linkweave.scheduler import ScheduledPacket


def send(tracker, n, now=0, link_id=0, rto=1_000_000):
    out = []
    for _ in range(n):
        p = ScheduledPacket(b"x" * 100)
        tracker.on_transmit(p, link_id, now, rto)
        out.append(p)
    return out


class TestSendTracker:
    def test_sequential_ids(self):
        t = SendTracker()
        assert [p.seq for p in send(t, 3)] == [0, 1, 2]

    def test_retransmit_keeps_seq_and_refreshes_deadline(self):
        t = SendTracker()
        pkts = send(t, 6)
        p = pkts[5]
        t.on_transmit(p, 1, 500_000, 1_000_000)
        assert p.seq == 5
        assert t.unacked[5].rto_deadline == 1_500_000
        assert t.next_seq == 6

    def test_exhausted_sequence_space(self):
        t = SendTracker()
        t.next_seq = MAX_SEQ + 1
        with pytest.raises(ProtocolError):
            t.assign_seq(ScheduledPacket(b"x"))

    def test_cumulative_ack(self):
        t = SendTracker()
        send(t, 3)
        removed, _ = t.on_ack(1, 10)
        assert sorted(e.packet.seq for e in removed) == [0, 1]
        assert list(t.unacked) == [2]

    def test_repeated_ack_is_noop(self):
        t = SendTracker()
        send(t, 3)
        t.on_ack(1, 10)
        assert t.on_ack(1, 20) == ([], {})
        assert list(t.unacked) == [2]

    def test_rtt_sample_subtracts_hold_delay(self):
        t = SendTracker()
        send(t, 1, now=100_000, link_id=7)
        _, samples = t.on_ack(0, 300_000, hold_delay_us=20_000)
        assert samples == {7: 180_000}

    def test_one_sample_per_link_newest_packet(self):
        t = SendTracker()
        send(t, 1, now=0, link_id=0)
        send(t, 1, now=50, link_id=1)
        send(t, 1, now=80, link_id=0)
        _, samples = t.on_ack(2, 1000)
        assert samples == {0: 920, 1: 950}

    def test_karn_excludes_retransmissions(self):
        t = SendTracker()
        (p,) = send(t, 1, rto=100)
        assert [e.packet for e in t.check_retransmit(100)] == [p]
        t.on_transmit(p, 1, 150, 100)
        _, samples = t.on_ack(0, 200)
        assert samples == {}

    def test_ack_beyond_sent_is_protocol_error(self):
        t = SendTracker()
        send(t, 2)
        with pytest.raises(ProtocolError):
            t.on_ack(2, 0)

    def test_deadlines(self):
        t = SendTracker()
        send(t, 1, now=0, rto=1_000_000)
        assert t.check_retransmit(900_000) == []
        expired = t.check_retransmit(1_100_000)
        assert [e.packet.seq for e in expired] == [0]
        assert expired[0].packet.retransmit_count == 1
        assert t.unacked == {}

    def test_expired_in_seq_order(self):
        t = SendTracker()
        a = ScheduledPacket(b"a")
        b = ScheduledPacket(b"b")
        t.on_transmit(a, 0, 0, 500)
        t.on_transmit(b, 0, 0, 100)
        assert [e.packet.seq for e in t.check_retransmit(1000)] == [0, 1]

    def test_next_deadline_skips_stale(self):
        t = SendTracker()
        send(t, 2, now=0, rto=100)
        t.on_ack(0, 10)
        assert t.next_deadline() == 100
        t.on_ack(1, 20)
        assert t.next_deadline() is None


class TestRecvTracker:
    def test_in_order(self):
        r = RecvTracker()
        for s in (0, 1, 2):
            r.on_receive(s)
        assert r.cumulative == 2

    def test_gap_then_fill(self):
        r = RecvTracker()
        for s in (0, 1, 3):
            r.on_receive(s)
        assert r.cumulative == 1 and r.received == {3}
        r.on_receive(2)
        assert r.cumulative == 3 and r.received == set()

    def test_duplicate_is_noop(self):
        r = RecvTracker()
        assert r.on_receive(1) is True
        before = (r.cumulative, set(r.received))
        assert r.on_receive(1) is False
        assert (r.cumulative, r.received) == before

    @given(st.lists(st.integers(0, 60)))
    def test_cumulative_monotone_and_consistent(self, seqs):
        r = RecvTracker()
        prev = r.cumulative
        seen = set()
        for s in seqs:
            r.on_receive(s)
            seen.add(s)
            assert r.cumulative >= prev
            prev = r.cumulative
            assert all(x > r.cumulative for x in r.received)
            expected = -1
            while expected + 1 in seen:
                expected += 1
            assert r.cumulative == expected

    def test_ack_interval(self):
        r = RecvTracker(ack_interval_us=25_000)
        r.on_receive(0, 100, now=0)
        assert r.maybe_emit_ack(10_000) is None
        ack = r.maybe_emit_ack(30_000)
        assert ack is not None and ack.cum_seq == 0

    def test_ack_byte_threshold(self):
        r = RecvTracker(ack_interval_us=25_000, ack_bytes_threshold=65536)
        r.mark_ack_sent(0)
        for i in range(55):
            r.on_receive(i, 1200, now=5000)
        assert r.maybe_emit_ack(5000) is not None

    def test_nothing_received_gives_no_ack(self):
        assert RecvTracker().maybe_emit_ack(10**9) is None

    def test_timestamp_echo(self):
        r = RecvTracker()
        r.on_receive(0, 10, now=1000, link_id=2, sent_at=400)
        ack = r.make_ack(1300, 2)
        assert (ack.echo_ts_us, ack.hold_delay_us) == (400, 300)
        assert r.make_ack(1300, 5).echo_ts_us == NO_SEQ

    def test_nothing_in_order_yet(self):
        r = RecvTracker()
        r.on_receive(3)
        assert r.make_ack(0).cum_seq == NO_SEQ


class TestRto:
    def test_floor(self):
        link = LinkState(0, srtt_us=1000.0)
        assert rto_for(link) == MIN_RTO_US

    def test_four_srtt(self):
        link = LinkState(0, srtt_us=100_000.0)
        assert rto_for(link) == 400_000

    def test_initial(self):
        assert rto_for(LinkState(0)) == INITIAL_RTO_US

    def test_covers_slowest_usable_link(self):
        fast = LinkState(0, srtt_us=20_000.0)
        slow = LinkState(1, srtt_us=600_000.0)
        assert rto_for(fast, [fast, slow]) == 2_400_000
        slow.status = LinkStatus.FAILED
        assert rto_for(fast, [fast, slow]) == MIN_RTO_US

    def test_unsampled_link_with_traffic(self):
        fast = LinkState(0, srtt_us=20_000.0)
        quiet = LinkState(1)
        assert rto_for(fast, [fast, quiet]) == MIN_RTO_US
        quiet.in_flight = 10.0
        assert rto_for(fast, [fast, quiet]) == INITIAL_RTO_US
