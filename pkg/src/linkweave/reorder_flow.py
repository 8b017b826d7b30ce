"""In-order release of sequenced payloads and per-channel window accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Tuple

from .link_model import US_PER_S, LinkState
from .reliability import ProtocolError

CAPACITY_FLOOR = 64 * 1024
CAPACITY_SAFETY_FACTOR = 2
INITIAL_WINDOW = 131072


class ReorderOverflow(ProtocolError):
    """Held bytes would exceed the buffer capacity; windows are mis-sized."""


class ReorderBuffer:
    """Holds out-of-order items until the gap in front of them is filled.

    Items are opaque; their byte size is given on insert (``len(item)`` by
    default).
    """

    def __init__(self, capacity_bytes: int, next_expected: int = 0) -> None:
        self.capacity_bytes = capacity_bytes
        self.next_expected = next_expected
        self.held: Dict[int, Tuple[Any, int]] = {}
        self.held_bytes = 0
        self.max_held_bytes = 0

    def insert(self, seq: int, item: Any, size: Optional[int] = None) -> List[Any]:
        if seq < self.next_expected or seq in self.held:
            return []
        if size is None:
            size = len(item)
        if seq != self.next_expected:
            if self.held_bytes + size > self.capacity_bytes:
                raise ReorderOverflow(f"holding seq {seq} would exceed {self.capacity_bytes} bytes")
            self.held[seq] = (item, size)
            self.held_bytes += size
            if self.held_bytes > self.max_held_bytes:
                self.max_held_bytes = self.held_bytes
            return []
        released = [item]
        nxt = seq + 1
        held = self.held
        while nxt in held:
            item, size = held.pop(nxt)
            self.held_bytes -= size
            released.append(item)
            nxt += 1
        self.next_expected = nxt
        return released


def required_capacity(rto_us: float, links: Iterable[LinkState]) -> int:
    """Reorder space needed while a gap waits out one retransmission timeout.

    That is the timeout times the fastest link's bandwidth, doubled for
    headroom, and never below 64 KiB.
    """
    fastest = max((link.char.bandwidth for link in links), default=0.0)
    need = CAPACITY_SAFETY_FACTOR * rto_us * fastest / US_PER_S
    return max(CAPACITY_FLOOR, int(need))


@dataclass
class ChannelWindow:
    channel_id: int
    initial_window: int = INITIAL_WINDOW
    send_window: int = field(default=-1)
    recv_window: int = field(default=-1)
    ungranted: int = 0
    total_granted: int = 0
    total_consumed: int = 0

    def __post_init__(self) -> None:
        if self.send_window < 0:
            self.send_window = self.initial_window
        if self.recv_window < 0:
            self.recv_window = self.initial_window

    def consume_send(self, size: int) -> bool:
        """Spend ``size`` bytes of peer-granted window; False means blocked."""
        if size > self.send_window:
            return False
        self.send_window -= size
        return True

    def on_window(self, increment: int) -> None:
        self.send_window += increment

    def on_data(self, size: int) -> None:
        if size > self.recv_window:
            raise ProtocolError(f"channel {self.channel_id}: peer sent {size} bytes into a {self.recv_window}-byte window")
        self.recv_window -= size

    def grant(self, consumed: int) -> Optional[int]:
        """Account ``consumed`` delivered bytes; returns a window increment once half the window is used."""
        self.ungranted += consumed
        self.total_consumed += consumed
        if self.ungranted < self.initial_window // 2:
            return None
        increment = self.ungranted
        self.ungranted = 0
        self.recv_window += increment
        self.total_granted += increment
        return increment
