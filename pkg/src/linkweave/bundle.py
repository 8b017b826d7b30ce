"""Sans-IO bundle endpoint.

One :class:`BundleEndpoint` owns the waiting queue, the scheduler, both
halves of the reliability layer and the reorder buffer for one side of a
bundle. It never touches sockets or clocks: drivers (the simulator, the
asyncio transport) feed it bytes, writability and timer callbacks together
with the current time in microseconds, and it writes frames to the
:class:`LinkPort` objects it was given.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Protocol, Set

from .link_model import INITIAL_BANDWIDTH, INITIAL_LATENCY_US, LinkCharacteristic, LinkState, LinkStatus
from .metrics import TraceRecord
from .reliability import (
    ACK_BYTES_THRESHOLD,
    ACK_INTERVAL_US,
    FAILED_AFTER_TIMEOUTS,
    NO_SEQ,
    Ack,
    ProtocolError,
    RecvTracker,
    SendTracker,
    rto_for,
)
from .reorder_flow import ReorderBuffer
from .scheduler import CHUNK_SIZE, QUEUE_CAPACITY, SCHEDULERS, ScheduledPacket, WaitingQueue
from .transport.codec import Data, Decoder, Frame, Hello, encode

log = logging.getLogger(__name__)

DEFAULT_REORDER_CAPACITY = 16 * 1024 * 1024


@dataclass
class BundleConfig:
    chunk_size: int = CHUNK_SIZE
    queue_capacity: int = QUEUE_CAPACITY
    ack_interval_us: int = ACK_INTERVAL_US
    ack_bytes_threshold: int = ACK_BYTES_THRESHOLD
    reorder_capacity: int = DEFAULT_REORDER_CAPACITY
    scheduler: str = "edpf"
    sample_interval_us: int = 100_000
    initial_latency_us: float = INITIAL_LATENCY_US
    initial_bandwidth: float = INITIAL_BANDWIDTH


class LinkPort(Protocol):
    def writable(self) -> bool:
        """Room for a full DATA frame. When False the driver later calls
        :meth:`BundleEndpoint.on_writable`."""

    def write(self, data: bytes) -> None:
        ...

    def buffered(self) -> int:
        """Bytes accepted but not yet drained by the transport."""


class _Slot:
    __slots__ = ("state", "port", "decoder", "written", "sample_start", "sample_base", "sample_full")

    def __init__(self, state: LinkState) -> None:
        self.state = state
        self.port: Optional[LinkPort] = None
        self.decoder = Decoder()
        self.written = 0
        self.sample_start: Optional[int] = None
        self.sample_base = 0
        self.sample_full = False


class BundleEndpoint:
    def __init__(
        self,
        config: Optional[BundleConfig] = None,
        *,
        on_deliver: Optional[Callable[[int, bytes], None]] = None,
        on_writable: Optional[Callable[[int], None]] = None,
        on_trace: Optional[Callable[[TraceRecord], None]] = None,
    ) -> None:
        self.config = config or BundleConfig()
        cfg = self.config
        self.links: Dict[int, LinkState] = {}
        self._slots: Dict[int, _Slot] = {}
        self.queue = WaitingQueue(cfg.queue_capacity, cfg.chunk_size)
        self.scheduler = SCHEDULERS[cfg.scheduler](self.links, self.queue)
        self.sender = SendTracker()
        self.receiver = RecvTracker(cfg.ack_interval_us, cfg.ack_bytes_threshold)
        self.reorder = ReorderBuffer(cfg.reorder_capacity)
        self.on_deliver = on_deliver
        self.on_writable_cb = on_writable
        self.on_trace = on_trace
        self._requeued: Set[ScheduledPacket] = set()
        self._app_blocked = False
        self._writing = False
        self._rr = 0
        self.retransmits = 0
        self.bytes_delivered = 0

    # links

    def attach_link(self, link_id: int, port: LinkPort, now: int) -> None:
        """A transport connection for ``link_id`` is up (first time or after reconnect)."""
        slot = self._slots.get(link_id)
        if slot is None:
            char = LinkCharacteristic(self.config.initial_latency_us, self.config.initial_bandwidth)
            slot = _Slot(LinkState(link_id, char, last_decay_at=now))
            self._slots[link_id] = slot
            self.links[link_id] = slot.state
        else:
            slot.state.reset_after_reconnect(now)
        slot.port = port
        slot.decoder = Decoder()
        slot.written = 0
        slot.sample_start = None
        self.scheduler.invalidate()
        self._service(now)

    def detach_link(self, link_id: int, now: int) -> None:
        """The transport for ``link_id`` went down; its unacked data waits for RTO."""
        slot = self._slots.get(link_id)
        if slot is None or slot.port is None:
            return
        slot.port = None
        slot.sample_start = None
        slot.state.status = LinkStatus.FAILED
        self.scheduler.invalidate()
        self._service(now)

    def link_up(self, link_id: int) -> bool:
        slot = self._slots.get(link_id)
        return slot is not None and slot.port is not None

    # application side

    def write(self, data: bytes, now: int, channel: int = 0) -> int:
        """Queue as much of ``data`` as fits; returns the number of bytes accepted."""
        chunk = self.config.chunk_size
        queue = self.queue
        was_empty = not len(queue)
        view = memoryview(data)
        accepted = 0
        total = len(data)
        while accepted < total and not queue.full:
            piece = bytes(view[accepted : accepted + chunk])
            packet = queue.enqueue(piece, now, channel)
            self.sender.assign_seq(packet)
            self.scheduler.on_enqueued(packet, now)
            accepted += len(piece)
        if accepted < total or queue.full:
            self._app_blocked = True
        if was_empty and accepted:
            self.scheduler.invalidate()
        # the writable callback must not re-enter the caller before it has
        # accounted for ``accepted``; it fires on the next event instead
        self._writing = True
        try:
            self._service(now)
        finally:
            self._writing = False
        return accepted

    @property
    def can_write(self) -> bool:
        return not self.queue.full

    def want_writable(self) -> None:
        """Ask for an ``on_writable`` callback once the queue has room again."""
        self._app_blocked = True

    # transport side

    def receive(self, link_id: int, data: bytes, now: int) -> None:
        """Raw bytes read from a link. Raises CodecError/ProtocolError on garbage."""
        slot = self._slots[link_id]
        for frame in slot.decoder.feed(data):
            self._handle(link_id, frame, now)
        self._service(now)

    def receive_frame(self, link_id: int, frame: Frame, now: int) -> None:
        self._handle(link_id, frame, now)
        self._service(now)

    def on_writable(self, link_id: int, now: int) -> None:
        slot = self._slots.get(link_id)
        if slot is None or slot.port is None:
            return
        if slot.state.status is LinkStatus.BUSY:
            slot.state.status = LinkStatus.READY
        self._close_sample(slot, now)
        self._service(now)

    def on_timer(self, now: int) -> None:
        expired = self.sender.check_retransmit(now)
        if expired:
            for entry in expired:
                packet = entry.packet
                self.queue.push_front(packet)
                self._requeued.add(packet)
                self.retransmits += 1
                self._trace(now, entry.link_id, "retransmit", packet.seq, packet.size)
            for link_id in sorted({e.link_id for e in expired}):
                self._suspect(link_id)
            self.scheduler.invalidate()
        self._service(now)

    def next_deadline(self) -> Optional[int]:
        deadlines = [d for d in (self.sender.next_deadline(), self.receiver.next_ack_deadline()) if d is not None]
        return min(deadlines) if deadlines else None

    # internals

    def _trace(self, t: int, link_id: int, event: str, seq: int, size: int, latency: Optional[int] = None) -> None:
        if self.on_trace is not None:
            self.on_trace(TraceRecord(t, link_id, event, seq, size, latency))

    def _handle(self, link_id: int, frame: Frame, now: int) -> None:
        kind = type(frame)
        if kind is Data:
            self._on_data(link_id, frame, now)
        elif kind is Ack:
            self._on_ack(link_id, frame, now)
        elif kind is Hello:
            pass
        else:
            raise ProtocolError(f"{kind.__name__} frame outside the control channel")

    def _on_data(self, link_id: int, frame: Data, now: int) -> None:
        size = len(frame.payload)
        if not self.receiver.on_receive(frame.seq, size, now, link_id, frame.sent_at_us):
            return
        item = (frame.seq, frame.channel, frame.payload, link_id, frame.sent_at_us)
        for seq, channel, payload, via, sent_at in self.reorder.insert(frame.seq, item, size):
            self.bytes_delivered += len(payload)
            self._trace(now, via, "delivered", seq, len(payload), now - sent_at)
            if self.on_deliver is not None:
                self.on_deliver(channel, payload)

    def _on_ack(self, link_id: int, ack: Ack, now: int) -> None:
        slot = self._slots[link_id]
        state = slot.state
        if ack.echo_ts_us != NO_SEQ:
            rtt = now - ack.echo_ts_us - ack.hold_delay_us
            if rtt > 0 and state.update_latency(rtt):
                self.scheduler.invalidate()
        state.consecutive_timeouts = 0
        if state.status is LinkStatus.FAILED and slot.port is not None:
            state.status = LinkStatus.READY
            self.scheduler.invalidate()
        if ack.cum_seq == NO_SEQ:
            return
        removed, _ = self.sender.on_ack(ack.cum_seq, now, ack.hold_delay_us)
        for entry in removed:
            self._trace(now, entry.link_id, "acked", entry.packet.seq, entry.packet.size, now - entry.sent_at)
            carrier = self._slots[entry.link_id].state
            carrier.consecutive_timeouts = 0
        if self._requeued:
            cum = ack.cum_seq
            for packet in [p for p in self._requeued if p.seq <= cum]:
                self._requeued.discard(packet)
                self.queue.remove(packet)

    def _suspect(self, link_id: int) -> None:
        state = self._slots[link_id].state
        state.suspect()
        if state.consecutive_timeouts < FAILED_AFTER_TIMEOUTS or state.status is LinkStatus.FAILED:
            return
        others = [s for s in self._slots.values() if s.state is not state and s.port is not None and s.state.usable]
        # failing the last live link would deadlock: only an ACK can revive it
        if others:
            log.info("link %d failed after %d timeouts", link_id, state.consecutive_timeouts)
            state.status = LinkStatus.FAILED

    def _maybe_ack(self, now: int) -> None:
        receiver = self.receiver
        if not receiver.ack_due(now):
            return
        for link_id in sorted(self._slots):
            slot = self._slots[link_id]
            if slot.port is None:
                continue
            frame = encode(receiver.make_ack(now, link_id))
            slot.port.write(frame)
            slot.written += len(frame)
        receiver.mark_ack_sent(now)

    def _service(self, now: int) -> None:
        self._maybe_ack(now)
        if len(self.queue):
            self._dispatch(now)
        if self._app_blocked and not self.queue.full and not self._writing:
            self._app_blocked = False
            if self.on_writable_cb is not None:
                self.on_writable_cb(now)

    def _dispatch(self, now: int) -> None:
        order = [lid for lid in sorted(self._slots) if self._slots[lid].port is not None and self._slots[lid].state.usable]
        if not order:
            return
        k = self._rr % len(order)
        active = order[k:] + order[:k]
        self._rr += 1
        scheduler = self.scheduler
        while active and len(self.queue):
            still = []
            for link_id in active:
                slot = self._slots[link_id]
                if not slot.port.writable():
                    self._note_full(slot, now)
                    continue
                packet = scheduler.next_packet_for(link_id, now)
                if packet is None:
                    slot.sample_full = False
                    continue
                self._transmit(slot, packet, now)
                still.append(link_id)
            active = still

    def _transmit(self, slot: _Slot, packet: ScheduledPacket, now: int) -> None:
        state = slot.state
        self.sender.on_transmit(packet, state.link_id, now, rto_for(state, self.links.values()))
        self._requeued.discard(packet)
        frame = encode(Data(packet.channel, packet.seq, now, packet.payload))
        slot.port.write(frame)
        slot.written += len(frame)
        self._trace(now, state.link_id, "sent", packet.seq, packet.size)

    def _note_full(self, slot: _Slot, now: int) -> None:
        slot.state.status = LinkStatus.BUSY
        if slot.sample_start is None:
            slot.sample_start = now
            slot.sample_base = slot.written - slot.port.buffered()
            slot.sample_full = True

    def _close_sample(self, slot: _Slot, now: int) -> None:
        start = slot.sample_start
        if start is None or now - start < self.config.sample_interval_us:
            return
        drained = slot.written - slot.port.buffered() - slot.sample_base
        slot.sample_start = None
        if slot.state.update_bandwidth(drained, now - start, slot.sample_full):
            self.scheduler.invalidate()

    # introspection for invariant checks

    def in_queue_and_unacked(self) -> List[int]:
        return [p.seq for p in self.queue if p.seq in self.sender.unacked]
