"""Sequence numbering, cumulative acknowledgements and retransmission timeouts."""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Set, Tuple

from .link_model import LinkState
from .scheduler import ScheduledPacket

NO_SEQ = 2**64 - 1  # wire value for "nothing received yet"
MAX_SEQ = 2**64 - 2

ACK_INTERVAL_US = 25_000
ACK_BYTES_THRESHOLD = 64 * 1024
MIN_RTO_US = 200_000
INITIAL_RTO_US = 3_000_000
RTO_SRTT_FACTOR = 4
FAILED_AFTER_TIMEOUTS = 3


class ProtocolError(Exception):
    pass


def rto_for(link: LinkState, others: Iterable[LinkState] = ()) -> int:
    """Timeout for a packet carried by ``link``.

    A cumulative ACK for a packet cannot arrive before every earlier packet
    has, whichever link carried them, so the timeout also covers the
    slowest other usable link. A link with no RTT sample yet forces the
    initial timeout while it may still have bytes in flight.
    """
    if link.srtt_us is None:
        return INITIAL_RTO_US
    slowest = link.srtt_us
    for other in others:
        if other is link or not other.usable:
            continue
        if other.srtt_us is None:
            if other.in_flight > 0:
                return INITIAL_RTO_US
        elif other.srtt_us > slowest:
            slowest = other.srtt_us
    return max(MIN_RTO_US, int(RTO_SRTT_FACTOR * slowest))


@dataclass(eq=False)
class Unacked:
    packet: ScheduledPacket
    sent_at: int
    link_id: int
    rto_deadline: int
    stamp: int = 0


class SendTracker:
    """Sender half: hands out sequence ids and tracks unacknowledged transmissions.

    Ids follow stream order (they are taken when data enters the waiting
    queue), which is what lets the receiver rebuild the byte stream.
    """

    def __init__(self) -> None:
        self.next_seq = 0
        self.acked_cum = -1
        self.unacked: Dict[int, Unacked] = {}
        self._deadlines: List[Tuple[int, int, int]] = []
        self._stamp = 0

    def assign_seq(self, packet: ScheduledPacket) -> int:
        if packet.seq is not None:
            return packet.seq
        if self.next_seq > MAX_SEQ:
            raise ProtocolError("sequence space exhausted")
        packet.seq = self.next_seq
        self.next_seq += 1
        return packet.seq

    def on_transmit(self, packet: ScheduledPacket, link_id: int, now: int, rto: int) -> Unacked:
        seq = self.assign_seq(packet)
        packet.max_rto_us = max(packet.max_rto_us, rto)
        self._stamp += 1
        entry = Unacked(packet, now, link_id, now + rto, self._stamp)
        self.unacked[seq] = entry
        heapq.heappush(self._deadlines, (entry.rto_deadline, seq, entry.stamp))
        return entry

    def on_ack(self, ack_cum: int, now: int, hold_delay_us: int = 0) -> Tuple[List[Unacked], Dict[int, int]]:
        """Drop every entry up to ``ack_cum``.

        Returns the removed entries and one RTT sample per link, taken from the
        newest acknowledged packet that link carried; retransmitted packets
        give no sample.
        """
        if ack_cum >= self.next_seq:
            raise ProtocolError(f"ack {ack_cum} beyond last assigned seq {self.next_seq - 1}")
        if ack_cum <= self.acked_cum:
            return [], {}
        removed: List[Unacked] = []
        if len(self.unacked) <= ack_cum - self.acked_cum:
            seqs = [s for s in self.unacked if s <= ack_cum]
        else:
            seqs = [s for s in range(self.acked_cum + 1, ack_cum + 1) if s in self.unacked]
        for seq in seqs:
            removed.append(self.unacked.pop(seq))
        self.acked_cum = ack_cum
        newest: Dict[int, Unacked] = {}
        for entry in removed:
            if entry.packet.retransmit_count:
                continue
            best = newest.get(entry.link_id)
            if best is None or entry.packet.seq > best.packet.seq:
                newest[entry.link_id] = entry
        samples = {}
        for link_id, entry in newest.items():
            rtt = now - entry.sent_at - hold_delay_us
            if rtt > 0:
                samples[link_id] = rtt
        return removed, samples

    def check_retransmit(self, now: int) -> List[Unacked]:
        """Pop every entry whose deadline has passed, oldest seq first."""
        expired = []
        heap = self._deadlines
        while heap and heap[0][0] <= now:
            _, seq, stamp = heapq.heappop(heap)
            entry = self.unacked.get(seq)
            if entry is None or entry.stamp != stamp:
                continue
            del self.unacked[seq]
            entry.packet.retransmit_count += 1
            expired.append(entry)
        expired.sort(key=lambda e: e.packet.seq)
        return expired

    def next_deadline(self) -> Optional[int]:
        heap = self._deadlines
        while heap:
            deadline, seq, stamp = heap[0]
            entry = self.unacked.get(seq)
            if entry is not None and entry.stamp == stamp:
                return deadline
            heapq.heappop(heap)
        return None


@dataclass(frozen=True)
class Ack:
    cum_seq: int  # NO_SEQ when nothing has been received in order
    echo_ts_us: int  # sender timestamp of the echoed DATA, NO_SEQ if none
    hold_delay_us: int


@dataclass
class _Arrival:
    sent_at: int
    arrived_at: int


class RecvTracker:
    """Receiver half: cumulative receipt state and ACK pacing."""

    def __init__(self, ack_interval_us: int = ACK_INTERVAL_US, ack_bytes_threshold: int = ACK_BYTES_THRESHOLD) -> None:
        self.cumulative = -1
        self.received: Set[int] = set()
        self.last_ack_sent_at = 0
        self.bytes_since_ack = 0
        self.unacked_arrivals = 0
        self.ack_interval_us = ack_interval_us
        self.ack_bytes_threshold = ack_bytes_threshold
        self._latest: Dict[Optional[int], _Arrival] = {}

    def on_receive(
        self,
        seq: int,
        size: int = 0,
        now: int = 0,
        link_id: Optional[int] = None,
        sent_at: Optional[int] = None,
    ) -> bool:
        """Record an arrival; returns False for duplicates."""
        self.bytes_since_ack += size
        self.unacked_arrivals += 1
        if sent_at is not None:
            arrival = _Arrival(sent_at, now)
            self._latest[link_id] = arrival
            self._latest[None] = arrival
        if seq <= self.cumulative or seq in self.received:
            return False
        if seq == self.cumulative + 1:
            self.cumulative = seq
            received = self.received
            while self.cumulative + 1 in received:
                self.cumulative += 1
                received.discard(self.cumulative)
        else:
            self.received.add(seq)
        return True

    def ack_due(self, now: int) -> bool:
        if not self.unacked_arrivals:
            return False
        return now - self.last_ack_sent_at >= self.ack_interval_us or self.bytes_since_ack >= self.ack_bytes_threshold

    def next_ack_deadline(self) -> Optional[int]:
        if not self.unacked_arrivals:
            return None
        return self.last_ack_sent_at + self.ack_interval_us

    def make_ack(self, now: int, link_id: Optional[int] = None) -> Ack:
        cum = NO_SEQ if self.cumulative < 0 else self.cumulative
        arrival = self._latest.get(link_id)
        if arrival is None:
            return Ack(cum, NO_SEQ, 0)
        return Ack(cum, arrival.sent_at, now - arrival.arrived_at)

    def mark_ack_sent(self, now: int) -> None:
        self.last_ack_sent_at = now
        self.bytes_since_ack = 0
        self.unacked_arrivals = 0
        # each echo is used once so stale arrivals do not yield inflated samples
        self._latest.clear()

    def maybe_emit_ack(self, now: int) -> Optional[Ack]:
        if not self.ack_due(now):
            return None
        ack = self.make_ack(now)
        self.mark_ack_sent(now)
        return ack
