"""SOCKS-like stream forwarding through a bundle.

The client listens on one local port per forwarding rule; every accepted
connection becomes a channel whose OPEN names the rule's target. The server
connects to that target and reports the outcome in OPEN_RESULT. From then
on bytes flow both ways under per-channel windows, and either side closing
its socket closes the channel on both ends.
"""

from __future__ import annotations

import asyncio
import errno
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from ..bundle import BundleConfig
from ..channels import ChannelLimit, ChannelMux, MuxCallbacks
from .codec import OpenCode
from .tcp import BundleClient, BundleDriver, BundleServer, LinkSpec, parse_addr

log = logging.getLogger(__name__)

CONNECT_TIMEOUT = 10.0


class _Bridge(asyncio.Protocol):
    """One local TCP socket attached to one channel."""

    def __init__(self, owner: "_Mux", channel_id: Optional[int] = None) -> None:
        self.owner = owner
        self.channel_id = channel_id
        self.transport: Optional[asyncio.Transport] = None
        self.open = False
        self._outbound = bytearray()
        self._eof = False
        self._write_paused = False
        self._owed = 0

    def connection_made(self, transport: asyncio.BaseTransport) -> None:
        self.transport = transport  # type: ignore[assignment]
        if not self.open:
            self.transport.pause_reading()

    def activate(self) -> None:
        self.open = True
        if self.transport is not None:
            self.transport.resume_reading()
        self.pump()

    def data_received(self, data: bytes) -> None:
        self._outbound += data
        self.pump()

    def eof_received(self) -> bool:
        self._eof = True
        self.pump()
        return True

    def pump(self) -> None:
        """Push buffered local bytes into the channel; pause the socket while the window is shut."""
        if not self.open or self.channel_id is None:
            return
        mux = self.owner.mux
        now = self.owner.driver.now()
        while self._outbound:
            # a copy, not a view: a socket error's traceback can keep frames
            # below us alive and a live view would make the del below fail.
            # One byte past the window gets a full window marked blocked.
            piece = self._outbound[: mux.send_window(self.channel_id) + 1]
            n = mux.send(self.channel_id, piece, now)
            if not n:
                break
            del self._outbound[:n]
        if self.transport is not None and not self.transport.is_closing():
            if self._outbound:
                self.transport.pause_reading()
            elif not self._eof:
                self.transport.resume_reading()
        if self._eof and not self._outbound:
            self.owner.close_channel(self)
        self.owner.driver.kick()

    # channel to socket

    def deliver(self, payload: bytes) -> None:
        if self.transport is None or self.transport.is_closing():
            return
        self.transport.write(payload)
        if self._write_paused:
            self._owed += len(payload)
        else:
            self.owner.mux.consumed(self.channel_id, len(payload), self.owner.driver.now())

    def pause_writing(self) -> None:
        self._write_paused = True

    def resume_writing(self) -> None:
        self._write_paused = False
        owed, self._owed = self._owed, 0
        if owed and self.channel_id is not None:
            self.owner.mux.consumed(self.channel_id, owed, self.owner.driver.now())
            self.owner.driver.kick()

    def connection_lost(self, exc: Optional[Exception]) -> None:
        self._eof = True
        self._outbound.clear()
        self.owner.close_channel(self)


class _Mux:
    """Glue between a driver's endpoint, a :class:`ChannelMux` and the bridges."""

    def __init__(self, driver: BundleDriver) -> None:
        self.driver = driver
        self.bridges: Dict[int, _Bridge] = {}
        self.mux = ChannelMux(
            driver.endpoint,
            MuxCallbacks(
                on_open=self._on_open,
                on_open_result=self._on_open_result,
                on_data=self._on_data,
                on_close=self._on_close,
                on_writable=self._on_writable,
            ),
            clock=driver.now,
        )

    def close_channel(self, bridge: _Bridge) -> None:
        cid = bridge.channel_id
        if cid is not None and self.bridges.get(cid) is bridge:
            del self.bridges[cid]
            self.mux.close(cid, self.driver.now())
            self.driver.kick()
        if bridge.transport is not None and not bridge.transport.is_closing():
            bridge.transport.close()

    def _on_open(self, channel_id: int, target: str) -> None:
        pass

    def _on_open_result(self, channel_id: int, code: OpenCode) -> None:
        pass

    def _on_data(self, channel_id: int, payload: bytes) -> None:
        bridge = self.bridges.get(channel_id)
        if bridge is not None:
            bridge.deliver(payload)

    def _on_close(self, channel_id: int) -> None:
        bridge = self.bridges.pop(channel_id, None)
        if bridge is not None and bridge.transport is not None:
            bridge.transport.close()

    def _on_writable(self, channel_id: int) -> None:
        bridge = self.bridges.get(channel_id)
        if bridge is not None:
            bridge.pump()


@dataclass
class ForwardRule:
    listen: Tuple[str, int]
    target: str


def parse_forward(text: str) -> ForwardRule:
    """``[BIND:]PORT:HOST:PORT``; the local side binds 127.0.0.1 unless given."""
    parts = text.split(":")
    if len(parts) == 3:
        bind, port, target = "127.0.0.1", parts[0], ":".join(parts[1:])
    elif len(parts) == 4:
        bind, port, target = parts[0], parts[1], ":".join(parts[2:])
    else:
        raise ValueError(f"forward rule {text!r} is not [BIND:]PORT:HOST:PORT")
    parse_addr(target)
    return ForwardRule(parse_addr(f"{bind}:{port}"), target)


class ProxyClient(_Mux):
    """Bundle client plus one local listener per forwarding rule."""

    def __init__(self, token: bytes, links: List[LinkSpec], forwards: List[ForwardRule], config: Optional[BundleConfig] = None) -> None:
        super().__init__(BundleDriver(config, asyncio.get_event_loop()))
        self.bundle = BundleClient(self.driver, token, links)
        self.forwards = forwards
        self._servers: List[asyncio.AbstractServer] = []
        self.listening: List[Tuple[str, int]] = []

    async def start(self) -> None:
        loop = asyncio.get_running_loop()
        self.bundle.start()
        for rule in self.forwards:
            server = await loop.create_server(lambda rule=rule: self._accept(rule), *rule.listen)
            self._servers.append(server)
            self.listening.append(server.sockets[0].getsockname()[:2])

    def _accept(self, rule: ForwardRule) -> _Bridge:
        bridge = _Bridge(self)
        try:
            bridge.channel_id = self.mux.open(rule.target, self.driver.now())
        except ChannelLimit as exc:
            log.warning("refusing local connection: %s", exc)
            bridge.channel_id = None
            asyncio.get_event_loop().call_soon(self.close_channel, bridge)
            return bridge
        self.bridges[bridge.channel_id] = bridge
        self.driver.kick()
        return bridge

    def _on_open_result(self, channel_id: int, code: OpenCode) -> None:
        bridge = self.bridges.get(channel_id)
        if bridge is None:
            return
        if code is OpenCode.OK:
            bridge.activate()
        else:
            log.info("channel %d: target refused (%s)", channel_id, code.name.lower())
            del self.bridges[channel_id]
            if bridge.transport is not None:
                bridge.transport.close()

    async def close(self) -> None:
        for server in self._servers:
            server.close()
            await server.wait_closed()
        for bridge in list(self.bridges.values()):
            if bridge.transport is not None:
                bridge.transport.abort()
        await self.bundle.stop()


def _open_code(exc: BaseException) -> OpenCode:
    if isinstance(exc, ConnectionRefusedError) or getattr(exc, "errno", None) == errno.ECONNREFUSED:
        return OpenCode.REFUSED
    return OpenCode.UNREACHABLE


class ProxyServer:
    """Accepts bundle links and connects every opened channel to its target."""

    def __init__(self, token: bytes, config: Optional[BundleConfig] = None) -> None:
        self.config = config
        self.token = token
        self.mux: Optional[_ServerMux] = None
        self.bundle = BundleServer(token, self._make_driver)

    def _make_driver(self) -> BundleDriver:
        driver = BundleDriver(self.config, asyncio.get_event_loop())
        self.mux = _ServerMux(driver)
        return driver

    async def listen(self, host: str, port: int) -> Tuple[str, int]:
        return await self.bundle.listen(host, port)

    async def close(self) -> None:
        if self.mux is not None:
            for bridge in list(self.mux.bridges.values()):
                if bridge.transport is not None:
                    bridge.transport.abort()
        await self.bundle.close()


class _ServerMux(_Mux):
    def _on_open(self, channel_id: int, target: str) -> None:
        bridge = _Bridge(self, channel_id)
        self.bridges[channel_id] = bridge
        asyncio.get_event_loop().create_task(self._connect(bridge, target))

    async def _connect(self, bridge: _Bridge, target: str) -> None:
        loop = asyncio.get_running_loop()
        cid = bridge.channel_id
        try:
            host, port = parse_addr(target)
            await asyncio.wait_for(loop.create_connection(lambda: bridge, host, port), CONNECT_TIMEOUT)
        except (OSError, ValueError, asyncio.TimeoutError) as exc:
            log.info("channel %d: connect to %s failed (%s)", cid, target, exc)
            if self.bridges.get(cid) is bridge:
                del self.bridges[cid]
            self.mux.answer_open(cid, _open_code(exc), self.driver.now())
            self.driver.kick()
            return
        if self.bridges.get(cid) is not bridge:
            # the client gave up while we were connecting
            bridge.transport.close()
            return
        self.mux.answer_open(cid, OpenCode.OK, self.driver.now())
        bridge.activate()
        self.driver.kick()
