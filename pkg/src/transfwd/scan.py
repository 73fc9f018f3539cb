"""Transactional DNS scanning.

The send loop records every probe (target, client port, DNS id, name,
timestamp) and every DNS response it sees, and does nothing else.  Matching
responses to probes is left to :mod:`transfwd.classify`, so a response from
an address that was never probed is kept rather than dropped.
"""

from __future__ import annotations

import ipaddress
import json
import logging
import random
import threading
from collections import deque
from dataclasses import asdict, dataclass, field
from math import gcd
from typing import Iterable, Iterator

from . import packet as P
from .wire import ARecord, encode, make_query, try_decode

log = logging.getLogger(__name__)

DEFAULT_PORTS = (32768, 60999)
DEFAULT_TIMEOUT = 20.0
DEFAULT_GRACE = 5.0
TXIDS = 65536


class KeySpaceExhausted(RuntimeError):
    pass


class ScanError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProbeRecord:
    target: str
    client_port: int
    txid: int
    qname: str
    sent_at: float

    @property
    def key(self) -> tuple[int, int]:
        return self.client_port, self.txid


@dataclass(frozen=True)
class ResponseRecord:
    responder: str
    dest_port: int
    txid: int
    answers: tuple[ARecord, ...]
    received_at: float

    @property
    def key(self) -> tuple[int, int]:
        return self.dest_port, self.txid


def allocate_key(inflight, port_range=DEFAULT_PORTS, rng=None) -> tuple[int, int]:
    """Pick a (port, txid) pair not in ``inflight``."""
    rng = rng or random
    lo, hi = port_range
    size = (hi - lo + 1) * TXIDS
    if len(inflight) >= size:
        raise KeySpaceExhausted(f"all {size} keys in flight")
    for _ in range(16):
        key = (rng.randint(lo, hi), rng.randrange(TXIDS))
        if key not in inflight:
            return key
    start = rng.randrange(size)
    for i in range(size):
        k = (start + i) % size
        key = (lo + k // TXIDS, k % TXIDS)
        if key not in inflight:
            return key
    raise KeySpaceExhausted(f"all {size} keys in flight")


class KeyAllocator:
    """Hands out (port, txid) keys that are unique while a response may arrive.

    Keys are walked in a fixed pseudo-random permutation of the key space and
    held for ``hold`` seconds (response timeout plus grace).  Because every
    key is held equally long, the next key of the walk is always the oldest
    one, so finding it still live means the space is full: ``allocate``
    returns None and the caller waits until :meth:`next_release`.
    """

    def __init__(self, port_range=DEFAULT_PORTS, hold: float = DEFAULT_TIMEOUT + DEFAULT_GRACE,
                 rng: random.Random | None = None):
        rng = rng or random.Random()
        self.lo, self.hi = port_range
        if not 0 < self.lo <= self.hi <= 65535:
            raise ValueError(f"bad port range {port_range}")
        self.size = (self.hi - self.lo + 1) * TXIDS
        self.hold = hold
        self._step = rng.randrange(1, self.size)
        while gcd(self._step, self.size) != 1:
            self._step += 1
        self._cursor = rng.randrange(self.size)
        self.live: set[tuple[int, int]] = set()
        self._expiry: deque = deque()

    def _release(self, now: float) -> None:
        while self._expiry and self._expiry[0][0] <= now:
            self.live.discard(self._expiry.popleft()[1])

    def allocate(self, now: float) -> tuple[int, int] | None:
        self._release(now)
        k = self._cursor
        key = (self.lo + k // TXIDS, k % TXIDS)
        if key in self.live:
            return None
        self._cursor = (k + self._step) % self.size
        self.live.add(key)
        self._expiry.append((now + self.hold, key))
        return key

    def next_release(self) -> float | None:
        return self._expiry[0][0] if self._expiry else None


# transaction log

def record_to_json(rec) -> dict:
    d = asdict(rec)
    if isinstance(rec, ProbeRecord):
        d["kind"] = "probe"
    else:
        d["kind"] = "response"
        d["answers"] = [asdict(a) for a in rec.answers]
    return d


def record_from_json(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "probe":
        return ProbeRecord(**d)
    if kind == "response":
        d["answers"] = tuple(ARecord(**a) for a in d["answers"])
        return ResponseRecord(**d)
    raise ValueError(f"unknown record kind {kind!r}")


class LogWriter:
    """Append-only JSONL sink; safe for a sender and a receiver thread."""

    def __init__(self, fh):
        self._fh = fh
        self._lock = threading.Lock()

    def write(self, rec) -> None:
        line = json.dumps(record_to_json(rec), sort_keys=True) + "\n"
        with self._lock:
            self._fh.write(line)
            self._fh.flush()


@dataclass
class ScanLog:
    probes: list[ProbeRecord] = field(default_factory=list)
    responses: list[ResponseRecord] = field(default_factory=list)

    def records(self) -> Iterator:
        """Probes and responses merged in time order."""
        merged = [(p.sent_at, 0, i, p) for i, p in enumerate(self.probes)]
        merged += [(r.received_at, 1, i, r) for i, r in enumerate(self.responses)]
        for *_, rec in sorted(merged, key=lambda t: t[:3]):
            yield rec

    def dump(self, fh) -> None:
        for rec in self.records():
            fh.write(json.dumps(record_to_json(rec), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ScanLog":
        out = cls()
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = record_from_json(json.loads(line))
                except (ValueError, TypeError, KeyError) as exc:
                    raise ValueError(f"{path}:{n}: {exc}") from exc
                (out.probes if isinstance(rec, ProbeRecord) else out.responses).append(rec)
        return out


def read_targets(lines: Iterable[str]) -> Iterator[str]:
    """IPv4 addresses, one per line; ``#`` starts a comment."""
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            yield str(ipaddress.IPv4Address(line))
        except ValueError:
            log.warning("line %d: skipping %r, not an IPv4 address", n, line)


def load_targets(path) -> list[str]:
    with open(path) as fh:
        return list(read_targets(fh))


def _as_response(pkt: P.Packet, now: float, port: int = 53) -> ResponseRecord | None:
    if not pkt.is_udp or pkt.sport != port:
        return None
    msg = try_decode(pkt.payload)
    if msg is None or not msg.qr:
        return None
    return ResponseRecord(pkt.src, pkt.dport, msg.id, msg.answers, now)


def run_scan(io, targets: Iterable[str], qname: str, rate: float = 1000.0,
             timeout: float = DEFAULT_TIMEOUT, allocator: KeyAllocator | None = None,
             sink: LogWriter | None = None, grace: float = DEFAULT_GRACE,
             seed: int | None = None, port: int = 53) -> ScanLog:
    """Probe every target once, paced at no more than ``rate`` per second.

    Keeps listening ``timeout`` seconds after the last probe.  On a socket
    failure the partial log is returned inside the raised ScanError.
    """
    if rate <= 0:
        raise ValueError("rate must be positive")
    allocator = allocator or KeyAllocator(hold=timeout + grace, rng=random.Random(seed))
    scan = ScanLog()
    interval = 1.0 / rate

    def keep(rec):
        (scan.probes if isinstance(rec, ProbeRecord) else scan.responses).append(rec)
        if sink is not None:
            sink.write(rec)

    def pump(until: float) -> None:
        while True:
            pkts = io.recv(until)
            if not pkts:
                return
            now = io.now()
            for pkt in pkts:
                rec = _as_response(pkt, now, port)
                if rec is not None:
                    keep(rec)
            if now >= until:
                return

    next_due = io.now()
    last_sent = None
    try:
        for target in targets:
            pump(next_due)
            key = allocator.allocate(io.now())
            while key is None:
                pump(allocator.next_release())
                key = allocator.allocate(io.now())
            payload = encode(make_query(qname, key[1]))
            now = io.now()
            io.send(P.udp(io.address, target, key[0], port, payload))
            keep(ProbeRecord(target, key[0], key[1], qname, now))
            last_sent = now
            next_due = now + interval
        if last_sent is not None:
            pump(last_sent + timeout)
    except OSError as exc:
        err = ScanError(f"socket failure after {len(scan.probes)} probes: {exc}")
        err.partial = scan
        raise err from exc
    return scan
