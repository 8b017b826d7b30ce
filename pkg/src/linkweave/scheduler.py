"""Waiting queue and Earliest-Delivery-Path-First packet assignment.

Each queued packet is assigned to the link on which it would arrive first,
given every link's characteristic and the bytes already headed its way. A
link that becomes ready only takes packets assigned to it, so it may idle
while the queue still holds data meant for a faster link.
"""

from __future__ import annotations

import bisect
import heapq
from collections import deque
from dataclasses import dataclass
from typing import Deque, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

from .link_model import LinkState

CHUNK_SIZE = 1200
QUEUE_CAPACITY = 256


class Backpressure(Exception):
    """The waiting queue is at capacity; the caller must pause ingestion."""


class NoUsableLink(Exception):
    """Every link is failed; scheduling is stalled."""


@dataclass(eq=False)
class ScheduledPacket:
    payload: bytes
    channel: int = 0
    seq: Optional[int] = None
    assigned_link: Optional[int] = None
    enqueued_at: int = 0
    retransmit_count: int = 0
    queued: bool = False
    max_rto_us: int = 0

    @property
    def size(self) -> int:
        return len(self.payload)


Assignment = List[Tuple[ScheduledPacket, int]]


class WaitingQueue:
    """Bounded FIFO of packets awaiting a link.

    Re-queued packets sit ahead of fresh ones, ordered by sequence ID so the
    oldest gap in the peer's reorder buffer is always filled first. Removal
    from the middle is lazy: a removed packet is flagged and skipped, and
    the backing containers are compacted once dead entries dominate.
    """

    def __init__(self, capacity: int = QUEUE_CAPACITY, chunk_size: int = CHUNK_SIZE) -> None:
        self.capacity = capacity
        self.chunk_size = chunk_size
        self._requeued: List[ScheduledPacket] = []
        self._items: Deque[ScheduledPacket] = deque()
        self._live = 0

    def __len__(self) -> int:
        return self._live

    def __iter__(self) -> Iterator[ScheduledPacket]:
        for p in self._requeued:
            if p.queued:
                yield p
        for p in self._items:
            if p.queued:
                yield p

    @property
    def full(self) -> bool:
        return self._live >= self.capacity

    def enqueue(self, payload: bytes, now: int = 0, channel: int = 0, seq: Optional[int] = None) -> ScheduledPacket:
        if not 1 <= len(payload) <= self.chunk_size:
            raise ValueError(f"payload length {len(payload)} outside [1, {self.chunk_size}]")
        if self.full:
            raise Backpressure()
        packet = ScheduledPacket(payload, channel=channel, seq=seq, enqueued_at=now, queued=True)
        self._items.append(packet)
        self._live += 1
        return packet

    def push_front(self, packet: ScheduledPacket) -> None:
        # Retransmissions bypass the bound: refusing them would lose data.
        if packet.queued:
            raise ValueError("packet is already queued")
        packet.queued = True
        packet.assigned_link = None
        bisect.insort(self._requeued, packet, key=lambda p: -1 if p.seq is None else p.seq)
        self._live += 1

    def remove(self, packet: ScheduledPacket) -> None:
        if not packet.queued:
            return
        packet.queued = False
        self._live -= 1
        if len(self._items) + len(self._requeued) > 2 * self._live + 64:
            self._requeued = [p for p in self._requeued if p.queued]
            self._items = deque(p for p in self._items if p.queued)

    def front(self) -> Optional[ScheduledPacket]:
        requeued = self._requeued
        while requeued and not requeued[0].queued:
            requeued.pop(0)
        if requeued:
            return requeued[0]
        items = self._items
        while items and not items[0].queued:
            items.popleft()
        return items[0] if items else None


def _usable_links(links: Iterable[LinkState]) -> List[LinkState]:
    return sorted((link for link in links if link.usable), key=lambda link: link.link_id)


def schedule_naive(packets: Sequence[ScheduledPacket], links: Iterable[LinkState]) -> Assignment:
    """Per-packet argmin of estimated delivery over a scratch copy of in-flight bytes.

    The links' own in-flight estimates are left untouched. Ties go to the
    lowest link id.
    """
    if not packets:
        return []
    usable = _usable_links(links)
    if not usable:
        raise NoUsableLink()
    scratch = {link.link_id: link.in_flight for link in usable}
    out: Assignment = []
    for packet in packets:
        size = packet.size
        best = min(usable, key=lambda link: (link.estimated_delivery(size, scratch[link.link_id]), link.link_id))
        scratch[best.link_id] += size
        out.append((packet, best.link_id))
    return out


def schedule_heap(packets: Sequence[ScheduledPacket], links: Iterable[LinkState]) -> Assignment:
    """Same assignment as :func:`schedule_naive` using a min-heap of links.

    Heap keys are computed with the size of the packet about to be assigned,
    so the two agree whenever packets have uniform size.
    """
    if not packets:
        return []
    usable = _usable_links(links)
    if not usable:
        raise NoUsableLink()
    by_id = {link.link_id: link for link in usable}
    scratch = {link.link_id: link.in_flight for link in usable}
    size = packets[0].size
    heap = [(link.estimated_delivery(size, scratch[link.link_id]), link.link_id) for link in usable]
    heapq.heapify(heap)
    out: Assignment = []
    last = len(packets) - 1
    for i, packet in enumerate(packets):
        _, link_id = heapq.heappop(heap)
        scratch[link_id] += packet.size
        out.append((packet, link_id))
        next_size = packets[i + 1].size if i < last else packet.size
        heapq.heappush(heap, (by_id[link_id].estimated_delivery(next_size, scratch[link_id]), link_id))
    return out


class EdpfScheduler:
    """Caches an assignment of the waiting queue and hands packets to ready links.

    A full pass reruns only after :meth:`invalidate`; packets appended in
    between are assigned incrementally against the current in-flight
    estimate plus the bytes already assigned to each link.
    """

    name = "edpf"

    def __init__(self, links: Mapping[int, LinkState], queue: WaitingQueue) -> None:
        self.links = links
        self.queue = queue
        self._assigned: Dict[int, Deque[ScheduledPacket]] = {}
        self._pending: Dict[int, float] = {}
        self._dirty = True
        self.stalled = False
        self.passes = 0

    def invalidate(self) -> None:
        self._dirty = True

    def reschedule(self, now: int) -> Assignment:
        for link in self.links.values():
            link.decay(now)
        self._assigned = {link_id: deque() for link_id in self.links}
        self._pending = dict.fromkeys(self.links, 0.0)
        packets = list(self.queue)
        try:
            pairs = schedule_heap(packets, self.links.values())
            self.stalled = False
        except NoUsableLink:
            pairs = []
            self.stalled = True
        for packet in packets:
            packet.assigned_link = None
        for packet, link_id in pairs:
            packet.assigned_link = link_id
            self._assigned[link_id].append(packet)
            self._pending[link_id] += packet.size
        self._dirty = False
        self.passes += 1
        return pairs

    def on_enqueued(self, packet: ScheduledPacket, now: int) -> None:
        if self._dirty:
            return
        best_key = None
        best_id = None
        size = packet.size
        for link_id in sorted(self.links):
            link = self.links[link_id]
            if not link.usable:
                continue
            key = link.estimated_delivery(size, link.decay(now) + self._pending.get(link_id, 0.0))
            if best_key is None or key < best_key:
                best_key, best_id = key, link_id
        if best_id is None:
            self.stalled = True
            return
        packet.assigned_link = best_id
        self._assigned.setdefault(best_id, deque()).append(packet)
        self._pending[best_id] = self._pending.get(best_id, 0.0) + size

    def next_packet_for(self, link_id: int, now: int) -> Optional[ScheduledPacket]:
        if link_id not in self.links:
            raise KeyError(f"unknown link {link_id}")
        if self._dirty:
            self.reschedule(now)
        queue = self._assigned.get(link_id)
        while queue:
            packet = queue.popleft()
            if not packet.queued or packet.assigned_link != link_id:
                continue
            self._pending[link_id] -= packet.size
            self.queue.remove(packet)
            self.links[link_id].record_sent(packet.size, now)
            return packet
        return None


class RoundRobinScheduler:
    """Dumb striping: whichever link is ready takes the front packet."""

    name = "dumb"

    def __init__(self, links: Mapping[int, LinkState], queue: WaitingQueue) -> None:
        self.links = links
        self.queue = queue
        self.stalled = False
        self.passes = 0

    def invalidate(self) -> None:
        pass

    def reschedule(self, now: int) -> Assignment:
        return []

    def on_enqueued(self, packet: ScheduledPacket, now: int) -> None:
        pass

    def next_packet_for(self, link_id: int, now: int) -> Optional[ScheduledPacket]:
        if link_id not in self.links:
            raise KeyError(f"unknown link {link_id}")
        packet = self.queue.front()
        if packet is None:
            return None
        packet.assigned_link = link_id
        self.queue.remove(packet)
        self.links[link_id].record_sent(packet.size, now)
        return packet


SCHEDULERS = {EdpfScheduler.name: EdpfScheduler, RoundRobinScheduler.name: RoundRobinScheduler}
