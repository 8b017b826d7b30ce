import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from linkweave.link_model import LinkCharacteristic, LinkState
from linkweave.reorder_flow import ChannelWindow, ReorderBuffer, ReorderOverflow, required_capacity
from linkweave.reliability import ProtocolError


class TestReorderBuffer:
    def test_in_order_release(self):
        buf = ReorderBuffer(1 << 20)
        assert buf.insert(0, b"p0") == [b"p0"]
        assert buf.next_expected == 1

    def test_gap_fill_releases_run(self):
        buf = ReorderBuffer(1 << 20)
        assert buf.insert(2, b"p2") == []
        assert buf.insert(1, b"p1") == []
        assert buf.held_bytes == 4
        assert buf.insert(0, b"p0") == [b"p0", b"p1", b"p2"]
        assert buf.held_bytes == 0 and buf.held == {}

    def test_old_seq_ignored(self):
        buf = ReorderBuffer(1 << 20)
        buf.insert(0, b"a")
        assert buf.insert(0, b"a") == []

    def test_overflow(self):
        buf = ReorderBuffer(10)
        buf.insert(1, b"x" * 10)
        with pytest.raises(ReorderOverflow):
            buf.insert(2, b"y")
        assert isinstance(ReorderOverflow(), ProtocolError)

    @given(st.permutations(list(range(40))), st.lists(st.integers(0, 39), max_size=20))
    def test_stream_reassembled_under_reordering_and_duplicates(self, order, dups):
        chunks = [bytes([i]) * (i % 7 + 1) for i in range(40)]
        arrivals = list(order) + dups
        random.Random(len(dups)).shuffle(arrivals)
        buf = ReorderBuffer(1 << 20)
        out = []
        for seq in arrivals + list(range(40)):
            out.extend(buf.insert(seq, chunks[seq]))
            assert all(s >= buf.next_expected for s in buf.held)
            assert buf.held_bytes == sum(size for _, size in buf.held.values())
        assert b"".join(out) == b"".join(chunks)


def lnk(bw):
    return LinkState(0, LinkCharacteristic(1000, bw))


class TestRequiredCapacity:
    def test_fastest_link_doubled(self):
        assert required_capacity(1_000_000, [lnk(87_500)]) == 175_000

    def test_two_links(self):
        assert required_capacity(500_000, [lnk(87_500), lnk(200_000)]) == 200_000

    def test_floor(self):
        assert required_capacity(1_000_000, [lnk(1)]) == 65536
        assert required_capacity(1_000_000, []) == 65536


class TestChannelWindow:
    def test_consume(self):
        w = ChannelWindow(1, send_window=5000)
        assert w.consume_send(1200)
        assert w.send_window == 3800

    def test_blocked_leaves_window(self):
        w = ChannelWindow(1, send_window=1000)
        assert not w.consume_send(1200)
        assert w.send_window == 1000
        w = ChannelWindow(1, send_window=0)
        assert not w.consume_send(1)

    def test_grant_at_half(self):
        w = ChannelWindow(1)
        w.on_data(70_000)
        assert w.grant(70_000) == 70_000
        assert w.recv_window == 131072

    def test_small_consumption_no_grant(self):
        assert ChannelWindow(1).grant(1000) is None

    def test_peer_overrunning_window(self):
        w = ChannelWindow(1, initial_window=100)
        with pytest.raises(ProtocolError):
            w.on_data(101)

    @given(st.lists(st.integers(1, 40_000), max_size=60))
    def test_grants_never_exceed_consumption(self, consumed):
        w = ChannelWindow(1)
        granted = 0
        for c in consumed:
            inc = w.grant(c)
            granted += inc or 0
            assert granted <= w.total_consumed
        assert granted == w.total_granted
        assert w.total_granted <= w.total_consumed + w.initial_window
