"""Deterministic discrete-event core and simulated links.

A simulated link is a pair of FIFO byte pipes, one per direction. A pipe
serializes frames at the segment's bandwidth out of a bounded send buffer,
then delays them by the segment's latency, mirroring a TCP connection over
a path with a simple characteristic. Going down drops everything buffered
or in flight and tears the connection down for both endpoints.
"""

from __future__ import annotations

import bisect
import heapq
from collections import deque
from typing import Any, Callable, Deque, List, Optional, Tuple

from ..link_model import US_PER_S
from ..transport.codec import MAX_FRAME_SIZE
from .scenario import Segment, SimLinkSpec


class Simulator:
    """Virtual clock plus an event heap; equal timestamps run in insertion order."""

    def __init__(self) -> None:
        self.now = 0
        self._events: List[Tuple[int, int, Callable[..., None], Tuple[Any, ...]]] = []
        self._counter = 0
        self.processed = 0

    def schedule(self, at: int, fn: Callable[..., None], *args: Any) -> None:
        if at < self.now:
            raise ValueError(f"cannot schedule in the past ({at} < {self.now})")
        self._counter += 1
        heapq.heappush(self._events, (at, self._counter, fn, args))

    def run(self, until: int, after_event: Optional[Callable[[], None]] = None) -> None:
        events = self._events
        while events and events[0][0] <= until:
            at, _, fn, args = heapq.heappop(events)
            self.now = at
            fn(*args)
            self.processed += 1
            if after_event is not None:
                after_event()
        self.now = max(self.now, until)

    @property
    def pending(self) -> int:
        return len(self._events)


class SimPipe:
    """One direction of a simulated link."""

    def __init__(self, sim: Simulator, spec: SimLinkSpec, deliver: Callable[[bytes], None]) -> None:
        self.sim = sim
        self.segments = spec.segments
        self._starts = [s.start_us for s in spec.segments]
        self.buffer_bytes = spec.send_buffer_bytes
        self.deliver_cb = deliver
        self.on_writable: Optional[Callable[[], None]] = None
        self.up = spec.segments[0].up
        self.epoch = 0
        self._frames: Deque[Tuple[int, int]] = deque()  # (serialization end, size)
        self._backlog = 0
        self.busy_until = 0
        self.last_arrival = 0
        self._wake_armed = False
        self.injected = 0
        self.delivered = 0
        self.dropped = 0
        self.in_flight = 0
        self._last_seen = 0

    def segment_at(self, t: int) -> Segment:
        return self.segments[bisect.bisect_right(self._starts, t) - 1]

    def _advance(self, now: int) -> None:
        frames = self._frames
        while frames and frames[0][0] <= now:
            self._backlog -= frames.popleft()[1]

    def buffered(self, now: int) -> int:
        self._advance(now)
        return self._backlog

    def serialization_end(self, start: int, size: int) -> Optional[int]:
        """When the last byte of ``size`` bytes starting at ``start`` leaves; None if the link dies first."""
        work = size * US_PER_S
        t = start
        i = bisect.bisect_right(self._starts, t) - 1
        segments = self.segments
        while True:
            seg = segments[i]
            end = segments[i + 1].start_us if i + 1 < len(segments) else None
            if not seg.up:
                return None
            if seg.bandwidth > 0:
                need = -(-work // seg.bandwidth)
                if end is None or t + need <= end:
                    return t + need
                work -= (end - t) * seg.bandwidth
            elif end is None:
                return None
            t = end
            i += 1

    def arrival_time(self, size: int, now: int) -> Optional[int]:
        """Arrival of a ``size``-byte frame written at ``now``; None means it would be dropped."""
        start = max(now, self.busy_until)
        ser_end = self.serialization_end(start, size)
        if ser_end is None:
            return None
        return max(ser_end + self.segment_at(ser_end).latency_us, self.last_arrival)

    def writable(self) -> bool:
        if not self.up:
            return False
        now = self.sim.now
        self._advance(now)
        if self._backlog + MAX_FRAME_SIZE <= self.buffer_bytes:
            return True
        self._arm_wake(now)
        return False

    def _arm_wake(self, now: int) -> None:
        if self._wake_armed:
            return
        excess = self._backlog + MAX_FRAME_SIZE - self.buffer_bytes
        for ser_end, size in self._frames:
            excess -= size
            if excess <= 0:
                self._wake_armed = True
                self.sim.schedule(max(ser_end, now), self._wake, self.epoch)
                return

    def _wake(self, epoch: int) -> None:
        self._wake_armed = False
        if epoch == self.epoch and self.up and self.on_writable is not None:
            self.on_writable()

    def write(self, data: bytes) -> None:
        now = self.sim.now
        size = len(data)
        self.injected += size
        if not self.up:
            self.dropped += size
            return
        self._advance(now)
        start = max(now, self.busy_until)
        ser_end = self.serialization_end(start, size)
        self.in_flight += size
        if ser_end is None:
            # dies before leaving the buffer; the down transition accounts for it
            self.busy_until = 2**62
            self._frames.append((2**62, size))
            self._backlog += size
            return
        self.busy_until = ser_end
        self._frames.append((ser_end, size))
        self._backlog += size
        arrival = max(ser_end + self.segment_at(ser_end).latency_us, self.last_arrival)
        self.last_arrival = arrival
        self.sim.schedule(arrival, self._arrive, self.epoch, data)

    def _arrive(self, epoch: int, data: bytes) -> None:
        if epoch != self.epoch:
            return
        size = len(data)
        self.in_flight -= size
        self.delivered += size
        if self.sim.now < self._last_seen:
            raise AssertionError("pipe reordered frames")
        self._last_seen = self.sim.now
        self.deliver_cb(data)

    def go_down(self) -> None:
        now = self.sim.now
        self.epoch += 1
        self.up = False
        self.dropped += self.in_flight
        self.in_flight = 0
        self._frames.clear()
        self._backlog = 0
        self.busy_until = now
        self._wake_armed = False

    def go_up(self) -> None:
        now = self.sim.now
        self.up = True
        self.busy_until = now
        self.last_arrival = now

    @property
    def conserved(self) -> bool:
        return self.injected == self.delivered + self.dropped + self.in_flight


class SimPort:
    """The :class:`~linkweave.bundle.LinkPort` an endpoint sees for one pipe."""

    def __init__(self, pipe: SimPipe) -> None:
        self.pipe = pipe

    def writable(self) -> bool:
        return self.pipe.writable()

    def write(self, data: bytes) -> None:
        self.pipe.write(data)

    def buffered(self) -> int:
        return self.pipe.buffered(self.pipe.sim.now)


class SimLink:
    """Both directions of one link plus its scripted up/down transitions."""

    def __init__(self, sim: Simulator, spec: SimLinkSpec, deliver_fwd: Callable[[bytes], None], deliver_rev: Callable[[bytes], None]) -> None:
        self.sim = sim
        self.spec = spec
        self.forward = SimPipe(sim, spec, deliver_fwd)
        self.reverse = SimPipe(sim, spec, deliver_rev)
        self.listeners: List[Callable[[bool], None]] = []
        prev_up = spec.segments[0].up
        for seg in spec.segments[1:]:
            if seg.up != prev_up:
                sim.schedule(seg.start_us, self._transition, seg.up)
                prev_up = seg.up

    @property
    def up(self) -> bool:
        return self.forward.up

    def _transition(self, up: bool) -> None:
        if up:
            self.forward.go_up()
            self.reverse.go_up()
        else:
            self.forward.go_down()
            self.reverse.go_down()
        for listener in self.listeners:
            listener(up)
