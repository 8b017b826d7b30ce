"""Plain-text scenario files.

One directive per line, ``#`` starts a comment::

    link <id> lat=<ms> bw=<Bps> [buf=<bytes>]
    at <ms> link <id> set [lat=<ms>] [bw=<Bps>]
    at <ms> link <id> down|up
    send <bytes> [from=<ms>]
    duration <ms>
    seed <n>
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

DEFAULT_SEND_BUFFER = 65536


class ScenarioError(ValueError):
    def __init__(self, lineno: int, message: str) -> None:
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class Segment:
    start_us: int
    latency_us: int
    bandwidth: int
    up: bool = True


@dataclass
class SimLinkSpec:
    link_id: int
    segments: List[Segment]
    send_buffer_bytes: int = DEFAULT_SEND_BUFFER

    def __post_init__(self) -> None:
        if not self.segments or self.segments[0].start_us != 0:
            raise ValueError("first segment must start at 0")
        if any(a.start_us > b.start_us for a, b in zip(self.segments, self.segments[1:])):
            raise ValueError("segments must be sorted by start time")

    @classmethod
    def simple(cls, link_id: int, latency_ms: float, bandwidth: int, buf: int = DEFAULT_SEND_BUFFER) -> "SimLinkSpec":
        return cls(link_id, [Segment(0, ms_to_us(latency_ms), bandwidth)], buf)


@dataclass(frozen=True)
class SendSpec:
    nbytes: int
    from_us: int = 0


@dataclass
class Scenario:
    links: Dict[int, SimLinkSpec]
    sends: List[SendSpec] = field(default_factory=list)
    duration_us: int = 20_000_000
    seed: int = 0

    @property
    def total_bytes(self) -> int:
        return sum(s.nbytes for s in self.sends)


def ms_to_us(ms: Union[str, float]) -> int:
    return round(float(ms) * 1000)


def _kv(lineno: int, tokens: List[str], allowed: Tuple[str, ...]) -> Dict[str, str]:
    out = {}
    for tok in tokens:
        key, sep, value = tok.partition("=")
        if not sep or key not in allowed:
            raise ScenarioError(lineno, f"unexpected argument {tok!r}")
        if key in out:
            raise ScenarioError(lineno, f"duplicate argument {key!r}")
        out[key] = value
    return out


def _num(lineno: int, text: str, what: str, integer: bool = False) -> float:
    try:
        value = int(text) if integer else float(text)
    except ValueError:
        raise ScenarioError(lineno, f"bad {what} {text!r}") from None
    if value < 0:
        raise ScenarioError(lineno, f"{what} must be non-negative")
    return value


def parse_scenario(text: str) -> Scenario:
    base: Dict[int, Tuple[int, int, int, int]] = {}
    changes: List[Tuple[int, int, int, Optional[int], Optional[int], Optional[bool]]] = []
    sends: List[SendSpec] = []
    duration: Optional[int] = None
    seed = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]
        if head == "link":
            if len(tokens) < 2:
                raise ScenarioError(lineno, "link needs an id")
            link_id = int(_num(lineno, tokens[1], "link id", integer=True))
            if link_id in base:
                raise ScenarioError(lineno, f"link {link_id} defined twice")
            args = _kv(lineno, tokens[2:], ("lat", "bw", "buf"))
            if "lat" not in args or "bw" not in args:
                raise ScenarioError(lineno, "link needs lat= and bw=")
            lat = ms_to_us(_num(lineno, args["lat"], "latency"))
            bw = int(_num(lineno, args["bw"], "bandwidth", integer=True))
            buf = int(_num(lineno, args.get("buf", str(DEFAULT_SEND_BUFFER)), "buffer", integer=True))
            base[link_id] = (lineno, lat, bw, buf)
        elif head == "at":
            if len(tokens) < 5 or tokens[2] != "link":
                raise ScenarioError(lineno, "expected 'at <ms> link <id> set|down|up'")
            at = ms_to_us(_num(lineno, tokens[1], "time"))
            link_id = int(_num(lineno, tokens[3], "link id", integer=True))
            action = tokens[4]
            if action == "set":
                args = _kv(lineno, tokens[5:], ("lat", "bw"))
                if not args:
                    raise ScenarioError(lineno, "set needs lat= and/or bw=")
                lat = ms_to_us(_num(lineno, args["lat"], "latency")) if "lat" in args else None
                bw = int(_num(lineno, args["bw"], "bandwidth", integer=True)) if "bw" in args else None
                changes.append((lineno, at, link_id, lat, bw, None))
            elif action in ("down", "up"):
                if len(tokens) != 5:
                    raise ScenarioError(lineno, f"unexpected arguments after {action}")
                changes.append((lineno, at, link_id, None, None, action == "up"))
            else:
                raise ScenarioError(lineno, f"unknown link action {action!r}")
        elif head == "send":
            if len(tokens) < 2:
                raise ScenarioError(lineno, "send needs a byte count")
            nbytes = int(_num(lineno, tokens[1], "byte count", integer=True))
            args = _kv(lineno, tokens[2:], ("from",))
            sends.append(SendSpec(nbytes, ms_to_us(_num(lineno, args.get("from", "0"), "start time"))))
        elif head == "duration":
            if len(tokens) != 2:
                raise ScenarioError(lineno, "duration takes one value")
            duration = ms_to_us(_num(lineno, tokens[1], "duration"))
        elif head == "seed":
            if len(tokens) != 2:
                raise ScenarioError(lineno, "seed takes one value")
            seed = int(_num(lineno, tokens[1], "seed", integer=True))
        else:
            raise ScenarioError(lineno, f"unknown directive {head!r}")
    if not base:
        raise ScenarioError(0, "scenario defines no links")
    links: Dict[int, SimLinkSpec] = {}
    for link_id, (_, lat, bw, buf) in sorted(base.items()):
        segments = [Segment(0, lat, bw, True)]
        for lineno, at, lid, new_lat, new_bw, up in sorted(
            (c for c in changes if c[2] == link_id), key=lambda c: (c[1], c[0])
        ):
            prev = segments[-1]
            seg = Segment(
                at,
                prev.latency_us if new_lat is None else new_lat,
                prev.bandwidth if new_bw is None else new_bw,
                prev.up if up is None else up,
            )
            if at == prev.start_us:
                segments[-1] = seg
            else:
                segments.append(seg)
        links[link_id] = SimLinkSpec(link_id, segments, buf)
    for lineno, _, link_id, *_ in changes:
        if link_id not in base:
            raise ScenarioError(lineno, f"unknown link {link_id}")
    return Scenario(links, sends, duration if duration is not None else 20_000_000, seed)


def load_scenario(path: Union[str, Path]) -> Scenario:
    return parse_scenario(Path(path).read_text())
