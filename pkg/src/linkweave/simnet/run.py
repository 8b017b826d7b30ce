"""Run a scenario: a bulk writer on the client endpoint, a checksumming sink on the server."""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

from ..bundle import BundleConfig, BundleEndpoint
from ..metrics import TraceRecord, summarize
from ..reliability import rto_for
from ..reorder_flow import required_capacity
from .engine import SimLink, SimPort, Simulator
from .scenario import Scenario

MAX_WRITE = 32768


class InvariantViolation(AssertionError):
    pass


@dataclass
class SimResult:
    trace: List[TraceRecord]
    summary: Dict[str, float]
    bytes_sent: int
    bytes_received: int
    sent_digest: str
    received_digest: str
    max_held_bytes: int = 0
    min_capacity_margin: int = 0
    events: int = 0
    pipes_conserved: bool = True
    duplicate_deliveries: int = 0

    @property
    def complete(self) -> bool:
        return self.bytes_received == self.bytes_sent and self.received_digest == self.sent_digest


class _Writer:
    def __init__(self, endpoint: BundleEndpoint, rng: random.Random) -> None:
        self.endpoint = endpoint
        self.rng = rng
        self.pending = bytearray()
        self.offset = 0
        self.written = 0
        self.added = 0
        self.digest = hashlib.sha256()

    def add(self, data: bytes, now: int) -> None:
        self.pending += data
        self.added += len(data)
        self.digest.update(data)
        self.pump(now)

    def pump(self, now: int) -> None:
        endpoint = self.endpoint
        while self.offset < len(self.pending):
            size = self.rng.randint(1, MAX_WRITE)
            piece = bytes(self.pending[self.offset : self.offset + size])
            n = endpoint.write(piece, now)
            self.offset += n
            self.written += n
            if n < len(piece):
                break
        if self.offset == len(self.pending):
            self.pending.clear()
            self.offset = 0


class _Sink:
    def __init__(self) -> None:
        self.digest = hashlib.sha256()
        self.received = 0

    def on_deliver(self, channel: int, payload: bytes) -> None:
        self.digest.update(payload)
        self.received += len(payload)


class _Harness:
    """Two endpoints joined by the scenario's links, with timers and invariant sweeps."""

    def __init__(self, scenario: Scenario, cfg: BundleConfig, trace: Optional[List[TraceRecord]], check_invariants: bool) -> None:
        self.sim = sim = Simulator()
        on_trace = trace.append if trace is not None else None
        self.client = client = BundleEndpoint(cfg, on_trace=on_trace)
        self.server = server = BundleEndpoint(cfg, on_trace=on_trace)
        self.links: Dict[int, SimLink] = {}
        for link_id, spec in sorted(scenario.links.items()):
            link = SimLink(
                sim,
                spec,
                deliver_fwd=lambda data, lid=link_id: server.receive(lid, data, sim.now),
                deliver_rev=lambda data, lid=link_id: client.receive(lid, data, sim.now),
            )
            link.forward.on_writable = lambda lid=link_id: client.on_writable(lid, sim.now)
            link.reverse.on_writable = lambda lid=link_id: server.on_writable(lid, sim.now)

            def on_transition(up: bool, lid: int = link_id, link: SimLink = link) -> None:
                if up:
                    client.attach_link(lid, SimPort(link.forward), sim.now)
                    server.attach_link(lid, SimPort(link.reverse), sim.now)
                else:
                    client.detach_link(lid, sim.now)
                    server.detach_link(lid, sim.now)

            link.listeners.append(on_transition)
            self.links[link_id] = link
            if link.up:
                client.attach_link(link_id, SimPort(link.forward), 0)
                server.attach_link(link_id, SimPort(link.reverse), 0)
        self._timers: Dict[int, Optional[int]] = {id(client): None, id(server): None}
        self.checker = _InvariantChecker(client, server, sim) if check_invariants else None
        self.check_invariants = check_invariants

    def _fire(self, endpoint: BundleEndpoint) -> None:
        self._timers[id(endpoint)] = None
        endpoint.on_timer(self.sim.now)

    def _after_event(self) -> None:
        for endpoint in (self.client, self.server):
            deadline = endpoint.next_deadline()
            armed = self._timers[id(endpoint)]
            if deadline is not None and (armed is None or deadline < armed):
                at = max(deadline, self.sim.now)
                self._timers[id(endpoint)] = at
                self.sim.schedule(at, self._fire, endpoint)
        if self.checker is not None:
            self.checker.check()

    def run(self, until: int, done: Optional[Callable[[], bool]] = None) -> None:
        """Run to ``until``; with ``done``, keep going in 1 s steps until it holds or events run out."""
        self._after_event()
        self.sim.run(until, self._after_event)
        if done is not None:
            while not done() and self.sim.pending:
                self.sim.run(self.sim.now + 1_000_000, self._after_event)

    @property
    def pipes_conserved(self) -> bool:
        ok = all(link.forward.conserved and link.reverse.conserved for link in self.links.values())
        if self.check_invariants and not ok:
            raise InvariantViolation("per-link byte conservation broken")
        return ok


def _config(config: Optional[BundleConfig], scheduler: str) -> BundleConfig:
    cfg = config or BundleConfig()
    if scheduler != cfg.scheduler:
        cfg = BundleConfig(**{**cfg.__dict__, "scheduler": scheduler})
    return cfg


def run_scenario(
    scenario: Scenario,
    *,
    seed: Optional[int] = None,
    scheduler: str = "edpf",
    config: Optional[BundleConfig] = None,
    check_invariants: bool = True,
    until_complete: bool = False,
) -> SimResult:
    """Simulate ``scenario`` and return its trace and summary.

    With ``check_invariants`` every event is followed by a sweep of the
    cross-module invariants; a breach raises :class:`InvariantViolation`.
    ``until_complete`` keeps running past the scenario duration until every
    byte is delivered or the event queue runs dry.
    """
    seed = scenario.seed if seed is None else seed
    trace: List[TraceRecord] = []
    sink = _Sink()
    h = _Harness(scenario, _config(config, scheduler), trace, check_invariants)
    h.server.on_deliver = sink.on_deliver
    writer = _Writer(h.client, random.Random(seed))
    h.client.on_writable_cb = writer.pump
    sim = h.sim
    payload_rng = random.Random(seed ^ 0x5EED)
    for spec in scenario.sends:
        sim.schedule(spec.from_us, lambda data=payload_rng.randbytes(spec.nbytes): writer.add(data, sim.now))

    h.run(scenario.duration_us, (lambda: sink.received >= scenario.total_bytes) if until_complete else None)
    pipes_ok = h.pipes_conserved
    delivered = [r.seq for r in trace if r.event == "delivered"]
    return SimResult(
        trace=trace,
        summary=summarize(trace),
        bytes_sent=writer.added,
        bytes_received=sink.received,
        sent_digest=writer.digest.hexdigest(),
        received_digest=sink.digest.hexdigest(),
        max_held_bytes=h.server.reorder.max_held_bytes,
        min_capacity_margin=h.checker.min_margin if h.checker else 0,
        events=sim.processed,
        pipes_conserved=pipes_ok,
        duplicate_deliveries=len(delivered) - len(set(delivered)),
    )


@dataclass
class ChannelStats:
    sent: int = 0
    received: int = 0
    consumed: int = 0
    granted: int = 0
    initial_window: int = 0
    sent_digest: Any = field(default_factory=hashlib.sha256)
    received_digest: Any = field(default_factory=hashlib.sha256)

    @property
    def intact(self) -> bool:
        return self.received == self.sent and self.sent_digest.digest() == self.received_digest.digest()


@dataclass
class ChannelRunResult:
    channels: Dict[int, ChannelStats]
    finished_at_us: int
    events: int

    @property
    def complete(self) -> bool:
        return all(s.intact for s in self.channels.values())


def run_channel_workload(
    scenario: Scenario,
    *,
    seed: int = 0,
    channels: int = 4,
    bytes_per_channel: Tuple[int, int] = (1, 400_000),
    max_consume_delay_us: int = 200_000,
    config: Optional[BundleConfig] = None,
    check_invariants: bool = True,
    limit_us: int = 600_000_000,
) -> ChannelRunResult:
    """Push random amounts of data through several channels, client to server.

    The server-side application takes each delivered chunk after a random
    delay, so windows fill and drain. The scenario's ``send`` lines are
    ignored; runs until every channel is drained or ``limit_us`` passes.
    """
    from ..channels import ChannelMux, MuxCallbacks
    from ..transport.codec import OpenCode

    rng = random.Random(seed)
    h = _Harness(scenario, _config(config, "edpf"), None, check_invariants)
    sim = h.sim
    clock = lambda: sim.now  # noqa: E731
    stats: Dict[int, ChannelStats] = {}
    outbox: Dict[int, bytearray] = {}
    server_mux: Optional[ChannelMux] = None

    def server_open(channel_id: int, target: str) -> None:
        sim.schedule(sim.now + rng.randint(0, 5000), lambda: server_mux.answer_open(channel_id, OpenCode.OK, sim.now))

    def server_data(channel_id: int, payload: bytes) -> None:
        st = stats[channel_id]
        st.received += len(payload)
        st.received_digest.update(payload)

        def consume() -> None:
            st.consumed += len(payload)
            server_mux.consumed(channel_id, len(payload), sim.now)

        sim.schedule(sim.now + rng.randint(0, max_consume_delay_us), consume)

    def pump(channel_id: int) -> None:
        buf = outbox.get(channel_id)
        while buf:
            n = client_mux.send(channel_id, bytes(buf[: rng.randint(1, 32768)]), sim.now)
            if not n:
                return
            del buf[:n]

    server_mux = ChannelMux(h.server, MuxCallbacks(on_open=server_open, on_data=server_data), clock=clock)
    client_mux = ChannelMux(
        h.client,
        MuxCallbacks(on_open_result=lambda cid, code: pump(cid), on_writable=pump),
        clock=clock,
    )
    payload_rng = random.Random(seed ^ 0x5EED)

    def start() -> None:
        for _ in range(channels):
            data = payload_rng.randbytes(rng.randint(*bytes_per_channel))
            cid = client_mux.open(f"sink:{len(stats)}", sim.now)
            st = stats[cid] = ChannelStats(sent=len(data), initial_window=client_mux.initial_window)
            st.sent_digest.update(data)
            outbox[cid] = bytearray(data)

    sim.schedule(0, start)
    h.run(scenario.duration_us, lambda: bool(stats) and all(s.consumed == s.sent for s in stats.values()) or sim.now >= limit_us)
    h.pipes_conserved  # raises on a conservation breach when checking
    for cid, st in stats.items():
        st.granted = server_mux.windows_seen[cid].total_granted
    return ChannelRunResult(stats, sim.now, sim.processed)


class _InvariantChecker:
    def __init__(self, client: BundleEndpoint, server: BundleEndpoint, sim: Simulator) -> None:
        self.client = client
        self.server = server
        self.sim = sim
        self.last_cumulative = -1
        self.min_margin: int = 2**62

    def fail(self, message: str) -> None:
        raise InvariantViolation(f"t={self.sim.now}us: {message}")

    def check(self) -> None:
        now = self.sim.now
        for endpoint in (self.client, self.server):
            for link in endpoint.links.values():
                if link.in_flight < 0:
                    self.fail(f"link {link.link_id} in-flight estimate negative")
                if link.last_decay_at > now:
                    self.fail(f"link {link.link_id} decayed into the future")
        receiver = self.server.receiver
        if receiver.cumulative < self.last_cumulative:
            self.fail("receiver cumulative ack moved backward")
        self.last_cumulative = receiver.cumulative
        reorder = self.server.reorder
        if reorder.next_expected != receiver.cumulative + 1:
            self.fail("reorder buffer and receive tracker disagree")
        if reorder.held_bytes > reorder.capacity_bytes:
            self.fail("reorder buffer over capacity")
        links = list(self.client.links.values())
        rto = max(rto_for(link, links) for link in links)
        # a hole lasts as long as the longest timeout its missing packet was
        # sent with, including while that packet waits in the queue again
        missing = reorder.next_expected
        entry = self.client.sender.unacked.get(missing)
        if entry is not None:
            rto = max(rto, entry.packet.max_rto_us)
        else:
            for packet in self.client._requeued:
                if packet.seq == missing:
                    rto = max(rto, packet.max_rto_us)
                    break
        bound = required_capacity(rto, links)
        margin = bound - reorder.held_bytes
        if margin < self.min_margin:
            self.min_margin = margin
        if margin < 0:
            self.fail(f"held {reorder.held_bytes} bytes > required capacity {bound}")
        sender = self.client.sender
        for packet in self.client._requeued:
            if packet.queued and packet.seq in sender.unacked:
                self.fail(f"seq {packet.seq} both queued and unacked")
