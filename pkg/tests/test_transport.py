import asyncio
import logging
import os
import socket

import pytest

from linkweave.transport.proxy import ForwardRule, parse_forward
from linkweave.transport.tcp import LinkSpec, parse_addr, parse_link

from loopback import echo_server, proxied, wait_for


def run(coro):
    return asyncio.run(asyncio.wait_for(coro, 30))


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class TestParsing:
    def test_addr(self):
        assert parse_addr("10.0.0.1:80") == ("10.0.0.1", 80)
        assert parse_addr("[::1]:443") == ("::1", 443)
        assert parse_addr("host", 9330) == ("host", 9330)
        assert parse_addr(":81") == ("0.0.0.0", 81)
        for bad in ("host", "h:x", "h:70000"):
            with pytest.raises(ValueError):
                parse_addr(bad)

    def test_link(self):
        default = ("srv", 9330)
        assert parse_link("192.168.1.5=10.0.0.1:1", 0, default) == LinkSpec(0, ("10.0.0.1", 1), "192.168.1.5")
        assert parse_link("192.168.1.5", 1, default) == LinkSpec(1, default, "192.168.1.5")
        assert parse_link("=", 2, default) == LinkSpec(2, default, None)
        assert parse_link("=other", 3, None) == LinkSpec(3, ("other", 9330), None)
        with pytest.raises(ValueError):
            parse_link("10.0.0.2", 0, None)

    def test_forward(self):
        assert parse_forward("8080:example.org:80") == ForwardRule(("127.0.0.1", 8080), "example.org:80")
        assert parse_forward("0.0.0.0:8080:example.org:80") == ForwardRule(("0.0.0.0", 8080), "example.org:80")
        for bad in ("8080", "8080:example.org", "x:y:z:w:v", "8080:example.org:http"):
            with pytest.raises(ValueError):
                parse_forward(bad)


def test_echo_through_proxy():
    async def main():
        target, tport = await echo_server()
        async with proxied(tport) as (client, server):
            reader, writer = await asyncio.open_connection(*client.listening[0])
            payload = os.urandom(300_000)
            writer.write(payload)
            got = await reader.readexactly(len(payload))
            writer.close()
            assert got == payload
            assert server.bundle.driver is not None
            assert set(server.bundle.driver.endpoint.links) == {0, 1}
        target.close()

    run(main())


def test_concurrent_channels():
    async def main():
        target, tport = await echo_server()
        async with proxied(tport, links=3) as (client, _):

            async def one(size):
                reader, writer = await asyncio.open_connection(*client.listening[0])
                payload = os.urandom(size)
                writer.write(payload)
                got = await reader.readexactly(size)
                writer.close()
                return got == payload

            assert all(await asyncio.gather(*(one(s) for s in (1, 5000, 400_000, 70_000))))
        target.close()

    run(main())


def test_refused_target_closes_local_socket(caplog):
    async def main():
        async with proxied(free_port()) as (client, _):
            reader, writer = await asyncio.open_connection(*client.listening[0])
            assert await reader.read() == b""
            writer.close()

    with caplog.at_level(logging.INFO, logger="linkweave.transport.proxy"):
        run(main())
    assert any("target refused (refused)" in r.getMessage() for r in caplog.records)


def test_token_mismatch_rejected(caplog):
    async def main():
        target, tport = await echo_server()
        async with proxied(tport, links=1, token=b"a" * 16, client_token=b"b" * 16) as (client, server):
            await wait_for(lambda: client.bundle.connects[0] >= 1)
            await asyncio.sleep(0.2)
            assert server.bundle.driver is None
        target.close()

    with caplog.at_level(logging.WARNING, logger="linkweave.transport.tcp"):
        run(main())
    assert any("token mismatch" in r.getMessage() for r in caplog.records)


def test_link_reconnects_after_drop():
    async def main():
        target, tport = await echo_server()
        async with proxied(tport) as (client, server):
            await wait_for(lambda: server.bundle.driver is not None and len(server.bundle.driver.links) == 2)
            server.bundle.driver.links[0].abort()
            await wait_for(lambda: client.bundle.connects[0] == 2)
            reader, writer = await asyncio.open_connection(*client.listening[0])
            writer.write(b"still here")
            assert await reader.readexactly(10) == b"still here"
            writer.close()
        target.close()

    run(main())


class _HoardingMux:
    """Accepts up to ``window`` bytes per call and keeps whatever it was handed."""

    def __init__(self, window):
        self.window = window
        self.kept = []
        self.accepted = bytearray()
        self.blocked = False

    def send_window(self, channel_id):
        return self.window

    def send(self, channel_id, data, now):
        self.kept.append(data)
        n = min(len(data), self.window)
        self.window -= n
        self.accepted += data[:n]
        self.blocked = n < len(data)
        return n


def test_bridge_pump_survives_retained_send_buffers():
    from types import SimpleNamespace

    from linkweave.transport.proxy import _Bridge

    mux = _HoardingMux(window=3000)
    owner = SimpleNamespace(mux=mux, driver=SimpleNamespace(now=lambda: 0, kick=lambda: None))
    bridge = _Bridge(owner, channel_id=1)
    bridge.open = True
    bridge.data_received(b"a" * 2000)
    bridge.data_received(b"b" * 2000)
    assert mux.blocked
    mux.window = 5000
    bridge.pump()
    assert mux.accepted == b"a" * 2000 + b"b" * 2000
    assert not bridge._outbound and not mux.blocked
