"""Honeypot sensors that show how scanners treat source-address mismatches.

Kind 1 answers like an open resolver from the address it was queried on.
Kind 2 receives on one address and answers from another in the same /24.
Kind 3 relays queries with the scanner's address as source, so the
public resolver answers the scanner directly.

All three resolve through ``upstream`` and admit one request per source
/24 per ``rate_window`` seconds.
"""

from __future__ import annotations

import heapq
import ipaddress
import itertools
import logging
import random
from dataclasses import dataclass
from enum import IntEnum

from .packet import DEFAULT_QUOTE, Packet
from .roles import Handler, RecursiveForwarderRole, TransparentForwarderRole

log = logging.getLogger(__name__)


class SensorKind(IntEnum):
    RECURSIVE_RESOLVER = 1
    INTERIOR_TRANSPARENT = 2
    EXTERIOR_TRANSPARENT = 3


class PrefixRateLimiter:
    """Fixed-window admission counter keyed by the source's covering prefix.

    State is one (window index, count) pair per prefix, replaced when a new
    window starts.  Windows are aligned to multiples of ``window`` seconds.
    """

    def __init__(self, window: float = 300.0, per_window: int = 1, prefix_len: int = 24):
        if window <= 0 or per_window < 1:
            raise ValueError("window must be positive and per_window >= 1")
        self.window = window
        self.per_window = per_window
        self.mask = (0xFFFFFFFF << (32 - prefix_len)) & 0xFFFFFFFF
        self._state: dict[int, tuple[int, int]] = {}

    def __call__(self, src: str, now: float) -> bool:
        return self.admit(src, now)

    def admit(self, src: str, now: float) -> bool:
        prefix = int(ipaddress.IPv4Address(src)) & self.mask
        win = int(now // self.window)
        cur, count = self._state.get(prefix, (win, 0))
        if cur != win:
            count = 0
        if count >= self.per_window:
            self._state[prefix] = (win, count)
            return False
        self._state[prefix] = (win, count + 1)
        return True


@dataclass(frozen=True)
class SensorConfig:
    kind: SensorKind
    recv_addr: str
    upstream: str
    send_addr: str | None = None
    rate_window: float = 300.0

    def __post_init__(self):
        object.__setattr__(self, "kind", SensorKind(self.kind))
        if self.send_addr is None:
            object.__setattr__(self, "send_addr", self.recv_addr)
        recv = ipaddress.IPv4Address(self.recv_addr)
        send = ipaddress.IPv4Address(self.send_addr)
        ipaddress.IPv4Address(self.upstream)
        if self.kind == SensorKind.INTERIOR_TRANSPARENT:
            if recv == send:
                raise ValueError("interior transparent sensor needs distinct receive and send addresses")
            if int(recv) >> 8 != int(send) >> 8:
                raise ValueError(f"{recv} and {send} are not in the same /24")
        elif send != recv:
            raise ValueError(f"sensor kind {int(self.kind)} sends from its receive address")


def build_sensor(cfg: SensorConfig) -> Handler:
    limiter = PrefixRateLimiter(cfg.rate_window)
    if cfg.kind == SensorKind.EXTERIOR_TRANSPARENT:
        return TransparentForwarderRole(cfg.upstream, admit=limiter)
    return RecursiveForwarderRole(cfg.upstream, egress=cfg.send_addr,
                                  reply_from=cfg.send_addr, admit=limiter)


class LiveContext:
    """NodeContext on top of a live PacketIO, with a tiny timer heap."""

    quote_len = DEFAULT_QUOTE

    def __init__(self, io, node_id: str, addrs: list[str], seed: int | None = None):
        self.io = io
        self.node_id = node_id
        self.addrs = addrs
        self.rng = random.Random(seed)
        self._timers: list = []
        self._seq = itertools.count()

    def now(self) -> float:
        return self.io.now()

    def send(self, pkt: Packet) -> bool:
        try:
            return self.io.send(pkt)
        except PermissionError:
            return False

    def call_later(self, delay, fn):
        heapq.heappush(self._timers, (self.now() + delay, next(self._seq), fn))

    def note(self, kind, **data):
        log.info("%s %s %s", self.node_id, kind, data)

    def run_due(self) -> float | None:
        while self._timers and self._timers[0][0] <= self.now():
            heapq.heappop(self._timers)[2]()
        return self._timers[0][0] if self._timers else None


def serve_live(handler: Handler, io, addrs: list[str], duration: float | None = None) -> None:
    """Feed packets from a live backend into ``handler`` until ``duration`` ends."""
    ctx = LiveContext(io, "sensor", addrs)
    end = None if duration is None else io.now() + duration
    while end is None or io.now() < end:
        nxt = ctx.run_due()
        until = io.now() + 1.0
        if nxt is not None:
            until = min(until, nxt)
        if end is not None:
            until = min(until, end)
        for pkt in io.recv(until):
            if pkt.dst in addrs:
                handler.on_packet(ctx, pkt)
