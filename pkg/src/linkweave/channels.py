"""Channel multiplexing over one bundle.

Each tunneled TCP stream is a channel with its own send/receive window.
Control frames (OPEN, OPEN_RESULT, WINDOW, CLOSE) are encoded into a byte
stream carried on a reserved channel, so they are as reliable and as
ordered as the data around them: an OPEN always reaches the peer before
the first byte of its channel, and a CLOSE after the last one.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional

from .bundle import BundleEndpoint
from .reliability import ProtocolError
from .reorder_flow import INITIAL_WINDOW, ChannelWindow
from .transport.codec import Close, Decoder, Frame, Open, OpenCode, OpenResult, Window, encode

log = logging.getLogger(__name__)

CONTROL_CHANNEL = 0xFFFFFFFF


class ChannelLimit(Exception):
    """Opening another channel could overflow the peer's reorder buffer."""


class ChannelState(enum.Enum):
    OPENING = "opening"
    OPEN = "open"


@dataclass
class Channel:
    channel_id: int
    target: str
    window: ChannelWindow
    state: ChannelState = ChannelState.OPENING
    blocked: bool = False


@dataclass
class MuxCallbacks:
    on_open: Optional[Callable[[int, str], None]] = None
    on_open_result: Optional[Callable[[int, OpenCode], None]] = None
    on_data: Optional[Callable[[int, bytes], None]] = None
    on_close: Optional[Callable[[int], None]] = None
    on_writable: Optional[Callable[[int], None]] = None


class ChannelMux:
    """Channels on top of a :class:`BundleEndpoint`; takes over its delivery callbacks.

    The side that calls :meth:`open` is the client; the other side answers
    each ``on_open`` with :meth:`answer_open`.
    """

    def __init__(
        self,
        bundle: BundleEndpoint,
        callbacks: Optional[MuxCallbacks] = None,
        *,
        initial_window: int = INITIAL_WINDOW,
        clock: Callable[[], int] = lambda: 0,
    ) -> None:
        self.bundle = bundle
        self.cb = callbacks or MuxCallbacks()
        self.initial_window = initial_window
        # windows summed over open channels never exceed the reorder buffer
        self.max_channels = max(1, bundle.config.reorder_capacity // initial_window)
        self.channels: Dict[int, Channel] = {}
        self._next_id = 0
        self._control = bytearray()
        self._decoder = Decoder()
        self._clock = clock
        self.windows_seen: Dict[int, ChannelWindow] = {}
        bundle.on_deliver = self._on_deliver
        bundle.on_writable_cb = self._on_bundle_writable

    # client side

    def open(self, target: str, now: int) -> int:
        if len(self.channels) >= self.max_channels:
            raise ChannelLimit(f"{len(self.channels)} channels already open")
        while self._next_id in self.channels or self._next_id == CONTROL_CHANNEL:
            self._next_id = (self._next_id + 1) & 0xFFFFFFFF
        channel_id = self._next_id
        self._next_id = (self._next_id + 1) & 0xFFFFFFFF
        self._add(channel_id, target)
        self._send_control(Open(channel_id, target), now)
        return channel_id

    # server side

    def answer_open(self, channel_id: int, code: OpenCode, now: int) -> None:
        chan = self.channels.get(channel_id)
        if chan is None or chan.state is not ChannelState.OPENING:
            return
        self._send_control(OpenResult(channel_id, code), now)
        if code is OpenCode.OK:
            chan.state = ChannelState.OPEN
        else:
            del self.channels[channel_id]

    # both sides

    def send(self, channel_id: int, data: bytes, now: int) -> int:
        """Queue up to ``len(data)`` bytes; the rest must wait for ``on_writable``."""
        chan = self.channels.get(channel_id)
        if chan is None or chan.state is not ChannelState.OPEN:
            return 0
        if self._control:
            self._flush_control(now)
            if self._control:
                chan.blocked = True
                return 0
        n = min(len(data), chan.window.send_window)
        accepted = self.bundle.write(data[:n], now, channel_id) if n else 0
        if accepted:
            chan.window.consume_send(accepted)
        if accepted < len(data):
            chan.blocked = True
        return accepted

    def consumed(self, channel_id: int, nbytes: int, now: int) -> None:
        """The local application took ``nbytes`` delivered on ``channel_id``."""
        chan = self.channels.get(channel_id)
        if chan is None or nbytes <= 0:
            return
        increment = chan.window.grant(nbytes)
        if increment is not None:
            self._send_control(Window(channel_id, increment), now)

    def close(self, channel_id: int, now: int) -> None:
        if self.channels.pop(channel_id, None) is not None:
            self._send_control(Close(channel_id), now)

    def send_window(self, channel_id: int) -> int:
        chan = self.channels.get(channel_id)
        return chan.window.send_window if chan else 0

    @property
    def idle(self) -> bool:
        return not self._control

    # internals

    def _add(self, channel_id: int, target: str) -> Channel:
        window = ChannelWindow(channel_id, self.initial_window)
        chan = Channel(channel_id, target, window)
        self.channels[channel_id] = chan
        self.windows_seen[channel_id] = window
        return chan

    def _send_control(self, frame: Frame, now: int) -> None:
        self._control += encode(frame)
        self._flush_control(now)

    def _flush_control(self, now: int) -> None:
        while self._control:
            n = self.bundle.write(bytes(self._control), now, CONTROL_CHANNEL)
            if not n:
                return
            del self._control[:n]

    def _on_bundle_writable(self, now: int) -> None:
        self._flush_control(now)
        if self._control:
            return
        for chan in list(self.channels.values()):
            if not chan.blocked or chan.window.send_window <= 0:
                continue
            if not self.bundle.can_write:
                self.bundle.want_writable()
                return
            chan.blocked = False
            if self.cb.on_writable is not None:
                self.cb.on_writable(chan.channel_id)

    def _on_deliver(self, channel_id: int, payload: bytes) -> None:
        if channel_id == CONTROL_CHANNEL:
            for frame in self._decoder.feed(payload):
                self._on_control(frame)
            return
        chan = self.channels.get(channel_id)
        if chan is None:
            # in flight when we closed it
            return
        chan.window.on_data(len(payload))
        if self.cb.on_data is not None:
            self.cb.on_data(channel_id, payload)

    def _on_control(self, frame: Frame) -> None:
        now = self._clock()
        kind = type(frame)
        if kind is Open:
            if frame.channel in self.channels:
                raise ProtocolError(f"channel {frame.channel} opened twice")
            if len(self.channels) >= self.max_channels:
                self._send_control(OpenResult(frame.channel, OpenCode.REFUSED), now)
                return
            self._add(frame.channel, frame.target)
            if self.cb.on_open is not None:
                self.cb.on_open(frame.channel, frame.target)
        elif kind is OpenResult:
            chan = self.channels.get(frame.channel)
            if chan is None or chan.state is not ChannelState.OPENING:
                return
            if frame.code is OpenCode.OK:
                chan.state = ChannelState.OPEN
            else:
                del self.channels[frame.channel]
            if self.cb.on_open_result is not None:
                self.cb.on_open_result(frame.channel, frame.code)
        elif kind is Window:
            chan = self.channels.get(frame.channel)
            if chan is None:
                return
            chan.window.on_window(frame.increment)
            if not chan.blocked:
                return
            if not self.bundle.can_write:
                self.bundle.want_writable()
                return
            chan.blocked = False
            if self.cb.on_writable is not None:
                self.cb.on_writable(frame.channel)
        elif kind is Close:
            if self.channels.pop(frame.channel, None) is not None and self.cb.on_close is not None:
                self.cb.on_close(frame.channel)
        else:
            raise ProtocolError(f"{kind.__name__} frame on the control channel")
