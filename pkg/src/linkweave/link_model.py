"""Per-link estimator: simple characteristic, in-flight bytes and feedback updates.

Times are integer microseconds on the caller's clock, bandwidth is bytes/second.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

US_PER_S = 1_000_000

INITIAL_LATENCY_US = 100_000
INITIAL_BANDWIDTH = 125_000.0
BANDWIDTH_ALPHA = 0.25
RTT_ALPHA = 1 / 8
# keeps a single empty drain sample from zeroing the estimate
MIN_BANDWIDTH = 1_000.0
MAX_LATENCY_US = 60 * US_PER_S


class LinkStatus(enum.Enum):
    READY = "ready"
    BUSY = "busy"
    FAILED = "failed"


@dataclass(frozen=True)
class LinkCharacteristic:
    """Constant latency followed by constant bandwidth."""

    latency_us: float = INITIAL_LATENCY_US
    bandwidth: float = INITIAL_BANDWIDTH

    def size(self, elapsed_us: float) -> float:
        """Bytes received ``elapsed_us`` after the sender starts transmitting."""
        if elapsed_us < self.latency_us:
            return 0.0
        return (elapsed_us - self.latency_us) * self.bandwidth / US_PER_S

    def time_to_deliver(self, nbytes: float) -> float:
        """Inverse of :meth:`size`: microseconds until ``nbytes`` have arrived."""
        return self.latency_us + nbytes * US_PER_S / self.bandwidth


@dataclass
class LinkState:
    link_id: int
    char: LinkCharacteristic = field(default_factory=LinkCharacteristic)
    in_flight: float = 0.0
    last_decay_at: int = 0
    status: LinkStatus = LinkStatus.READY
    srtt_us: Optional[float] = None
    consecutive_timeouts: int = 0

    @property
    def usable(self) -> bool:
        return self.status is not LinkStatus.FAILED and self.char.bandwidth > 0

    def decay(self, now: int) -> float:
        """Drain the in-flight estimate at the estimated bandwidth up to ``now``."""
        elapsed = now - self.last_decay_at
        if elapsed < 0:
            raise ValueError(f"clock moved backward on link {self.link_id}: {now} < {self.last_decay_at}")
        if elapsed:
            drained = self.char.bandwidth * elapsed / US_PER_S
            self.in_flight = max(0.0, self.in_flight - drained)
            self.last_decay_at = now
        return self.in_flight

    def record_sent(self, size: int, now: int) -> None:
        if size <= 0:
            raise ValueError("zero-size transmission")
        self.decay(now)
        self.in_flight += size

    def estimated_delivery(self, size: float, in_flight: Optional[float] = None) -> float:
        """Microseconds until ``size`` more bytes would be fully delivered.

        ``in_flight`` overrides the tracked estimate (the scheduler passes its
        scratch copy). Failed links return ``inf``.
        """
        if not self.usable:
            return math.inf
        if in_flight is None:
            in_flight = self.in_flight
        return self.char.time_to_deliver(size + in_flight)

    def update_bandwidth(
        self,
        drained: float,
        interval_us: int,
        buffers_were_full: bool,
        alpha: float = BANDWIDTH_ALPHA,
    ) -> bool:
        """Fold a buffer-drain sample into the bandwidth estimate.

        Samples are only meaningful while the transport's send buffer stayed
        full; otherwise the estimate is left untouched. Returns True if the
        estimate moved by more than 10%.
        """
        if interval_us <= 0:
            raise ValueError("drain interval must be positive")
        if not buffers_were_full:
            return False
        sample = drained * US_PER_S / interval_us
        old = self.char.bandwidth
        new = max(MIN_BANDWIDTH, (1 - alpha) * old + alpha * sample)
        self.char = LinkCharacteristic(self.char.latency_us, new)
        return abs(new - old) > 0.1 * old

    def update_latency(self, rtt_us: float) -> bool:
        if rtt_us <= 0:
            raise ValueError("rtt sample must be positive")
        if self.srtt_us is None:
            self.srtt_us = float(rtt_us)
        else:
            self.srtt_us = (1 - RTT_ALPHA) * self.srtt_us + RTT_ALPHA * rtt_us
        old = self.char.latency_us
        new = self.srtt_us / 2
        self.char = LinkCharacteristic(new, self.char.bandwidth)
        return abs(new - old) > 0.1 * old

    def suspect(self) -> None:
        """Retransmission timeout on this link: double the latency estimate."""
        latency = min(self.char.latency_us * 2, MAX_LATENCY_US)
        self.char = LinkCharacteristic(latency, self.char.bandwidth)
        self.consecutive_timeouts += 1

    def reset_after_reconnect(self, now: int) -> None:
        self.in_flight = 0.0
        self.last_decay_at = max(self.last_decay_at, now)
        self.char = LinkCharacteristic(self.char.latency_us, max(MIN_BANDWIDTH, self.char.bandwidth / 2))
        self.consecutive_timeouts = 0
        self.status = LinkStatus.READY
