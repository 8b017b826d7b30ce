"""In-memory link ports for driving two endpoints by hand."""

from linkweave.bundle import BundleConfig, BundleEndpoint


class WirePort:
    def __init__(self, capacity=1 << 30):
        self.out = []
        self.capacity = capacity
        self.open = True

    def writable(self):
        return self.open and self.buffered() + 1400 <= self.capacity

    def write(self, data):
        self.out.append(bytes(data))

    def buffered(self):
        return sum(map(len, self.out))

    def take(self):
        data, self.out = b"".join(self.out), []
        return data


class Pair:
    """Client and server endpoints joined by ``n`` wires with no delay of their own."""

    def __init__(self, n=2, config=None, **kw):
        self.client = BundleEndpoint(config or BundleConfig(), **kw)
        self.server = BundleEndpoint(config or BundleConfig())
        self.up = {}
        self.down = {}
        for lid in range(n):
            self.attach(lid, 0)

    def attach(self, lid, now):
        self.up[lid], self.down[lid] = WirePort(), WirePort()
        self.client.attach_link(lid, self.up[lid], now)
        self.server.attach_link(lid, self.down[lid], now)

    def cut(self, lid, now):
        self.up[lid].open = self.down[lid].open = False
        self.up[lid].out.clear()
        self.down[lid].out.clear()
        self.client.detach_link(lid, now)
        self.server.detach_link(lid, now)

    def shuttle(self, now, links=None):
        """Carry everything written so far across, in both directions; returns bytes moved."""
        moved = 0
        for lid in sorted(self.up if links is None else links):
            if not self.up[lid].open:
                continue
            data = self.up[lid].take()
            if data:
                moved += len(data)
                self.server.receive(lid, data, now)
            data = self.down[lid].take()
            if data:
                moved += len(data)
                self.client.receive(lid, data, now)
        return moved

    def settle(self, start, step=10_000, limit=10**8):
        """Alternate timers and shuttles until nothing moves and no deadline is near."""
        now = start
        idle = 0
        while now < start + limit:
            for ep in (self.client, self.server):
                deadline = ep.next_deadline()
                if deadline is not None and deadline <= now:
                    ep.on_timer(now)
            if self.shuttle(now):
                idle = 0
            else:
                idle += 1
                if idle > 50 and not self.client.sender.unacked and not len(self.client.queue):
                    return now
            now += step
        return now
