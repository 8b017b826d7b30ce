"""Bundle links over real TCP connections (asyncio).

:class:`BundleDriver` gives a sans-IO :class:`~linkweave.bundle.BundleEndpoint`
a wall clock and a timer. :class:`TcpLink` adapts one TCP connection to the
endpoint's link port: it stays writable until the transport's write buffer
crosses its high-water mark, which is the "buffers full" signal for bandwidth
sampling. Clients keep each link connected with exponential backoff; the
server groups incoming connections into a bundle by the token in their
HELLO frame.
"""

from __future__ import annotations

import asyncio
import logging
import socket
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

from ..bundle import BundleConfig, BundleEndpoint
from ..reliability import ProtocolError
from .codec import CodecError, Hello, decode, encode

log = logging.getLogger(__name__)

DEFAULT_PORT = 9330
WRITE_HIGH_WATER = 65536
WRITE_LOW_WATER = 16384
BACKOFF_INITIAL = 0.25
BACKOFF_MAX = 10.0
HELLO_TIMEOUT = 10.0


def parse_addr(text: str, default_port: Optional[int] = None) -> Tuple[str, int]:
    """``host:port`` (or ``[v6]:port``) to a tuple; a bare host takes ``default_port``."""
    host, sep, port = text.rpartition(":")
    if not sep or "]" in port:
        if default_port is None:
            raise ValueError(f"missing port in {text!r}")
        host, port = text, str(default_port)
    host = host.strip("[]")
    try:
        number = int(port)
    except ValueError:
        raise ValueError(f"bad port in {text!r}") from None
    if not 0 <= number <= 65535:
        raise ValueError(f"port out of range in {text!r}")
    return host or "0.0.0.0", number


class BundleDriver:
    """Runs one endpoint on the event loop: clock, timer and link bookkeeping."""

    def __init__(self, config: Optional[BundleConfig] = None, loop: Optional[asyncio.AbstractEventLoop] = None) -> None:
        self.loop = loop or asyncio.get_event_loop()
        self.endpoint = BundleEndpoint(config)
        self._t0 = time.monotonic_ns()
        self._timer: Optional[asyncio.TimerHandle] = None
        self._timer_at: Optional[int] = None
        self.links: Dict[int, "TcpLink"] = {}

    def now(self) -> int:
        return (time.monotonic_ns() - self._t0) // 1000

    def kick(self) -> None:
        """Re-arm the timer after anything that may have moved the endpoint's deadlines."""
        deadline = self.endpoint.next_deadline()
        if deadline is None or (self._timer_at is not None and self._timer_at <= deadline):
            return
        if self._timer is not None:
            self._timer.cancel()
        self._timer_at = deadline
        delay = max(0.0, (deadline - self.now()) / 1e6)
        self._timer = self.loop.call_later(delay, self._fire)

    def _fire(self) -> None:
        self._timer = None
        self._timer_at = None
        self.endpoint.on_timer(self.now())
        self.kick()

    def attach(self, link: "TcpLink") -> None:
        old = self.links.get(link.link_id)
        if old is not None and old is not link:
            old.abort()
        self.links[link.link_id] = link
        self.endpoint.attach_link(link.link_id, link, self.now())
        self.kick()

    def detach(self, link: "TcpLink") -> None:
        if self.links.get(link.link_id) is link:
            del self.links[link.link_id]
            self.endpoint.detach_link(link.link_id, self.now())
            self.kick()

    def close(self) -> None:
        if self._timer is not None:
            self._timer.cancel()
        for link in list(self.links.values()):
            link.abort()


class TcpLink(asyncio.Protocol):
    """One TCP connection of a bundle; implements the endpoint's link port."""

    def __init__(self, link_id: Optional[int], on_hello: Optional[Callable[["TcpLink", Hello], Optional[BundleDriver]]] = None) -> None:
        self.link_id = link_id
        self.driver: Optional[BundleDriver] = None
        self.transport: Optional[asyncio.Transport] = None
        self._on_hello = on_hello
        self._pending = bytearray()
        self._paused = False
        self.closed: "asyncio.Future[None]" = asyncio.get_event_loop().create_future()

    # link port

    def writable(self) -> bool:
        return not self._paused and self.transport is not None and not self.transport.is_closing()

    def write(self, data: bytes) -> None:
        if self.transport is not None and not self.transport.is_closing():
            self.transport.write(data)

    def buffered(self) -> int:
        return self.transport.get_write_buffer_size() if self.transport is not None else 0

    # asyncio protocol

    def connection_made(self, transport: asyncio.BaseTransport) -> None:
        self.transport = transport  # type: ignore[assignment]
        self.transport.set_write_buffer_limits(high=WRITE_HIGH_WATER, low=WRITE_LOW_WATER)
        sock = transport.get_extra_info("socket")
        if sock is not None:
            try:
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            except OSError:
                pass

    def start(self, driver: BundleDriver) -> None:
        self.driver = driver
        driver.attach(self)

    def data_received(self, data: bytes) -> None:
        driver = self.driver
        try:
            if driver is None:
                self._pending += data
                result = decode(self._pending)
                if result is None:
                    return
                frame, used = result
                if not isinstance(frame, Hello) or self._on_hello is None:
                    raise ProtocolError("expected HELLO")
                self.link_id = frame.link_id
                driver = self._on_hello(self, frame)
                if driver is None:
                    self.abort()
                    return
                data = bytes(self._pending[used:])
                self._pending.clear()
                self.start(driver)
                if not data:
                    return
            driver.endpoint.receive(self.link_id, data, driver.now())
            driver.kick()
        except (CodecError, ProtocolError) as exc:
            log.warning("link %s: %s; dropping connection", self.link_id, exc)
            self.abort()

    def pause_writing(self) -> None:
        self._paused = True

    def resume_writing(self) -> None:
        self._paused = False
        if self.driver is not None:
            self.driver.endpoint.on_writable(self.link_id, self.driver.now())
            self.driver.kick()

    def connection_lost(self, exc: Optional[Exception]) -> None:
        self._paused = True
        if self.driver is not None:
            self.driver.detach(self)
        if not self.closed.done():
            self.closed.set_result(None)

    def abort(self) -> None:
        if self.transport is not None:
            self.transport.abort()


@dataclass
class LinkSpec:
    """Client side of one link: where to connect and optionally which local address to bind."""

    link_id: int
    remote: Tuple[str, int]
    bind: Optional[str] = None


def parse_link(text: str, link_id: int, default_remote: Optional[Tuple[str, int]]) -> LinkSpec:
    """``BIND=HOST:PORT``, ``BIND`` (uses the default server) or ``=HOST:PORT``."""
    bind, sep, remote = text.partition("=")
    if sep:
        addr = parse_addr(remote, DEFAULT_PORT) if remote else default_remote
    else:
        addr = default_remote
    if addr is None:
        raise ValueError(f"link {text!r} names no server and no --server was given")
    return LinkSpec(link_id, addr, bind or None)


class BundleClient:
    """Keeps every configured link connected and feeds them to one endpoint."""

    def __init__(self, driver: BundleDriver, token: bytes, links: List[LinkSpec]) -> None:
        self.driver = driver
        self.token = token
        self.specs = links
        self._tasks: List[asyncio.Task] = []
        self.connects: Dict[int, int] = {spec.link_id: 0 for spec in links}

    def start(self) -> None:
        for spec in self.specs:
            self._tasks.append(self.driver.loop.create_task(self._maintain(spec)))

    async def _maintain(self, spec: LinkSpec) -> None:
        loop = self.driver.loop
        backoff = BACKOFF_INITIAL
        while True:
            link = TcpLink(spec.link_id)
            try:
                local = (spec.bind, 0) if spec.bind else None
                await loop.create_connection(lambda: link, spec.remote[0], spec.remote[1], local_addr=local)
            except OSError as exc:
                log.info("link %d: connect to %s:%d failed (%s); retry in %.2fs", spec.link_id, *spec.remote, exc, backoff)
                await asyncio.sleep(backoff)
                backoff = min(backoff * 2, BACKOFF_MAX)
                continue
            backoff = BACKOFF_INITIAL
            link.write(encode(Hello(self.token, spec.link_id)))
            link.start(self.driver)
            self.connects[spec.link_id] += 1
            log.info("link %d up", spec.link_id)
            await link.closed
            log.info("link %d down; reconnecting in %.2fs", spec.link_id, backoff)
            await asyncio.sleep(backoff)

    async def stop(self) -> None:
        for task in self._tasks:
            task.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self.driver.close()


class BundleServer:
    """Accepts link connections and routes them to the bundle named by their token."""

    def __init__(self, token: bytes, make_driver: Callable[[], BundleDriver]) -> None:
        self.token = token
        self._make_driver = make_driver
        self.driver: Optional[BundleDriver] = None
        self._server: Optional[asyncio.AbstractServer] = None

    async def listen(self, host: str, port: int) -> Tuple[str, int]:
        loop = asyncio.get_running_loop()
        self._server = await loop.create_server(self._new_link, host, port)
        return self._server.sockets[0].getsockname()[:2]

    def _new_link(self) -> TcpLink:
        link = TcpLink(None, on_hello=self._hello)
        asyncio.get_running_loop().call_later(HELLO_TIMEOUT, self._hello_deadline, link)
        return link

    def _hello_deadline(self, link: TcpLink) -> None:
        if link.driver is None:
            link.abort()

    def _hello(self, link: TcpLink, hello: Hello) -> Optional[BundleDriver]:
        if hello.token != self.token:
            log.warning("link %d: token mismatch", hello.link_id)
            return None
        if self.driver is None:
            self.driver = self._make_driver()
        log.info("link %d up", hello.link_id)
        return self.driver

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        if self.driver is not None:
            self.driver.close()
