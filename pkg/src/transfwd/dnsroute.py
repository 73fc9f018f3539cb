"""DNS traceroute that keeps going past a transparent forwarder.

Each TTL gets its own DNS transaction.  Hops up to the forwarder answer
with ICMP time-exceeded like in any traceroute; because a transparent
forwarder relays the query with the scanner's address as source, routers
behind it report back to the scanner as well, until the resolver's DNS
answer ends the sweep.
"""

from __future__ import annotations

import ipaddress
import json
import random
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from statistics import fmean
from typing import Callable, Iterable

from . import packet as P
from .wire import encode, make_query, try_decode

DEFAULT_MAX_TTL = 64
DEFAULT_GAP_LIMIT = 5
DEFAULT_PROBE_TIMEOUT = 2.0
TRACEROUTE_PORT = 33434


class HopKind(str, Enum):
    TTL_EXCEEDED = "TtlExceeded"
    DNS_ANSWER = "DnsAnswer"
    UNREACHABLE = "Unreachable"
    SILENT = "Silent"


@dataclass(frozen=True)
class HopRecord:
    ttl: int
    hop_addr: str | None
    kind: HopKind
    rtt_ms: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", HopKind(self.kind))
        if self.ttl < 1:
            raise ValueError("ttl must be >= 1")
        if self.kind != HopKind.SILENT and self.hop_addr is None:
            raise ValueError(f"{self.kind.value} hop needs an address")


# trace status values
REACHED = "resolver-reached"
NOT_TRANSPARENT = "not-transparent"
NO_DNS = "no-dns"
GAP_LIMIT = "gap-limit"
MAX_TTL = "max-ttl"
# set when the hop before the DNS answer stayed silent, so where the
# resolver sits on the path is not known
RESOLVER_OFF_PATH = "resolver-unreached-on-path"


@dataclass
class TracePath:
    target: str
    hops: list[HopRecord] = field(default_factory=list)
    resolver: str | None = None
    status: str | None = None
    asns: list[int | None] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return (self.resolver is not None and self.status == REACHED
                and all(h.kind != HopKind.SILENT for h in self.hops))

    @property
    def forwarder_ttl(self) -> int | None:
        return next((h.ttl for h in self.hops if h.hop_addr == self.target), None)

    @property
    def resolver_ttl(self) -> int | None:
        return next((h.ttl for h in self.hops if h.kind == HopKind.DNS_ANSWER), None)

    def addresses(self) -> list[str | None]:
        return [h.hop_addr for h in self.hops]

    def signature(self) -> tuple:
        """Hop sequence without timing, for stability comparison."""
        return tuple((h.ttl, h.hop_addr, h.kind.value) for h in self.hops)

    def to_json(self) -> dict:
        d = asdict(self)
        d["hops"] = [dict(asdict(h), kind=h.kind.value) for h in self.hops]
        d["complete"] = self.complete
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TracePath":
        d = dict(d)
        d.pop("complete", None)
        d["hops"] = [HopRecord(**h) for h in d.get("hops", [])]
        return cls(**d)


def dump_paths(paths: Iterable[TracePath], fh) -> None:
    for p in paths:
        fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


def load_paths(path) -> list[TracePath]:
    with open(path) as fh:
        return [TracePath.from_json(json.loads(line)) for line in fh if line.strip()]


# probing

class _Sweep:
    """State of one target's TTL sweep."""

    def __init__(self, target: str):
        self.path = TracePath(target)
        self.gap = 0

    @property
    def done(self) -> bool:
        return self.path.status is not None


def _fresh_key(rng: random.Random, used: set) -> tuple[int, int]:
    while True:
        key = (rng.randrange(1024, 65536), rng.randrange(65536))
        if key not in used:
            used.add(key)
            return key


def _quote_key(pkt: P.Packet):
    q = P.parse_quote(pkt.payload)
    if q is None:
        return None, None
    return q, (q.sport, q.txid)


def _collect(io, probes: dict, deadline: float, match_pkt: Callable) -> dict:
    """Wait for one reply per probe or the deadline; first reply wins."""
    got: dict = {}
    while len(got) < len(probes):
        now = io.now()
        if now >= deadline:
            break
        for pkt in io.recv(deadline):
            hit = match_pkt(pkt)
            if hit is not None and hit[0] in probes and hit[0] not in got:
                got[hit[0]] = (hit[1], pkt.src, io.now())
    return got


def trace_many(io, targets: Iterable[str], qname: str, max_ttl: int = DEFAULT_MAX_TTL,
               gap_limit: int = DEFAULT_GAP_LIMIT,
               probe_timeout: float = DEFAULT_PROBE_TIMEOUT, match: str = "quote",
               rng: random.Random | None = None) -> list[TracePath]:
    """DNSRoute++ towards several targets, sweeping TTLs in lockstep.

    ``match="quote"`` attributes ICMP errors by the quoted UDP source port
    and DNS id.  ``match="timing"`` attributes any ICMP error arriving in a
    probe's window to it; that only works one target at a time, so the
    targets are then traced sequentially.
    """
    if match not in ("quote", "timing"):
        raise ValueError(f"unknown match mode {match!r}")
    targets = list(dict.fromkeys(targets))
    rng = rng or random.Random()
    if match == "timing" and len(targets) > 1:
        return [trace_many(io, [t], qname, max_ttl, gap_limit, probe_timeout, match, rng)[0]
                for t in targets]
    sweeps = [_Sweep(t) for t in targets]
    used: set = set()

    for ttl in range(1, max_ttl + 1):
        active = [s for s in sweeps if not s.done]
        if not active:
            break
        probes: dict[tuple[int, int], _Sweep] = {}
        sent_at = io.now()
        for s in active:
            key = _fresh_key(rng, used)
            probes[key] = s
            io.send(P.udp(io.address, s.path.target, key[0], 53,
                          encode(make_query(qname, key[1])), ttl=ttl))

        def match_pkt(pkt):
            if pkt.is_udp:
                if pkt.sport != 53:
                    return None
                msg = try_decode(pkt.payload)
                if msg is None or not msg.qr:
                    return None
                return (pkt.dport, msg.id), HopKind.DNS_ANSWER
            kind = _icmp_kind(pkt)
            if kind is None:
                return None
            if match == "timing":
                return next(iter(probes)), kind
            q, key = _quote_key(pkt)
            if q is None or q.dport != 53:
                return None
            if q.txid is None:
                key = next((k for k in probes if k[0] == q.sport), None)
            return key, kind

        got = _collect(io, probes, sent_at + probe_timeout, match_pkt)
        for key, s in probes.items():
            _advance(s, ttl, got.get(key), sent_at, gap_limit)

    for s in sweeps:
        if not s.done:
            s.path.status = MAX_TTL
    return [s.path for s in sweeps]


def _icmp_kind(pkt: P.Packet) -> HopKind | None:
    if pkt.icmp_type == P.ICMP_TIME_EXCEEDED:
        return HopKind.TTL_EXCEEDED
    if pkt.icmp_type == P.ICMP_UNREACH:
        return HopKind.UNREACHABLE
    return None


def _advance(s: _Sweep, ttl: int, reply, sent_at: float, gap_limit: int) -> None:
    path = s.path
    if reply is None:
        path.hops.append(HopRecord(ttl, None, HopKind.SILENT))
        s.gap += 1
        if s.gap >= gap_limit:
            path.status = GAP_LIMIT
        return
    kind, src, at = reply
    rtt = round((at - sent_at) * 1000, 3)
    prev_silent = bool(path.hops) and path.hops[-1].kind == HopKind.SILENT
    path.hops.append(HopRecord(ttl, src, kind, rtt))
    s.gap = 0
    if kind == HopKind.DNS_ANSWER:
        if src == path.target:
            path.status = NOT_TRANSPARENT
            return
        path.resolver = src
        path.status = REACHED
        if prev_silent:
            path.flags.append(RESOLVER_OFF_PATH)
    elif kind == HopKind.UNREACHABLE:
        path.status = NO_DNS


def trace(io, target: str, qname: str, max_ttl: int = DEFAULT_MAX_TTL,
          gap_limit: int = DEFAULT_GAP_LIMIT, probe_timeout: float = DEFAULT_PROBE_TIMEOUT,
          match: str = "quote", rng: random.Random | None = None) -> TracePath:
    return trace_many(io, [target], qname, max_ttl, gap_limit, probe_timeout, match, rng)[0]


def traceroute(io, target: str, max_ttl: int = 30, gap_limit: int = DEFAULT_GAP_LIMIT,
               probe_timeout: float = DEFAULT_PROBE_TIMEOUT,
               rng: random.Random | None = None) -> TracePath:
    """Classic UDP traceroute; ends at the target's port-unreachable."""
    rng = rng or random.Random()
    s = _Sweep(target)
    sport = rng.randrange(1024, 65536)
    for ttl in range(1, max_ttl + 1):
        dport = TRACEROUTE_PORT + ttl
        sent_at = io.now()
        io.send(P.udp(io.address, target, sport, dport, b"", ttl=ttl))

        def match_pkt(pkt):
            kind = _icmp_kind(pkt) if pkt.is_icmp else None
            if kind is None:
                return None
            q = P.parse_quote(pkt.payload)
            if q is None or (q.sport, q.dport) != (sport, dport):
                return None
            return dport, kind

        got = _collect(io, {dport: s}, sent_at + probe_timeout, match_pkt).get(dport)
        if got is not None and got[0] == HopKind.UNREACHABLE:
            kind, src, at = got
            s.path.hops.append(HopRecord(ttl, src, kind, round((at - sent_at) * 1000, 3)))
            s.path.status = REACHED if src == target else NO_DNS
            return s.path
        _advance(s, ttl, got, sent_at, gap_limit)
        if s.done:
            return s.path
    s.path.status = MAX_TTL
    return s.path


# post-processing

def sanitize(paths: Iterable[TracePath], repeats: int = 2) -> list[TracePath]:
    """One path per target whose ``repeats`` measurements are all complete
    and show the same hops at the same TTLs."""
    by_target: dict[str, list[TracePath]] = defaultdict(list)
    for p in paths:
        by_target[p.target].append(p)
    out = []
    for runs in by_target.values():
        if len(runs) < repeats or not all(r.complete for r in runs):
            continue
        if len({r.signature() for r in runs}) == 1:
            out.append(runs[0])
    return out


@dataclass(frozen=True)
class PathStats:
    lengths: tuple[int, ...]
    mean: float


def forwarder_to_resolver(path: TracePath) -> int | None:
    f, r = path.forwarder_ttl, path.resolver_ttl
    if f is None or r is None:
        return None
    return r - f


def path_stats(paths: Iterable[TracePath], projects: dict) -> dict[str, PathStats | None]:
    """Forwarder-to-resolver hop counts per resolver project.

    ``projects`` maps a name to prefixes; a path counts for the project
    covering its resolver.  Projects without paths map to None.
    """
    nets = {name: [ipaddress.IPv4Network(p, strict=False) for p in pfx]
            for name, pfx in projects.items()}
    lengths: dict[str, list[int]] = {name: [] for name in projects}
    for p in paths:
        n = forwarder_to_resolver(p)
        if n is None:
            continue
        addr = ipaddress.IPv4Address(p.resolver)
        for name, ns in nets.items():
            if any(addr in net for net in ns):
                lengths[name].append(n)
                break
    return {name: PathStats(tuple(v), fmean(v)) if v else None
            for name, v in lengths.items()}


def annotate_asns(path: TracePath, asn_of: Callable[[str], int | None]) -> TracePath:
    return replace(path, asns=[asn_of(h.hop_addr) if h.hop_addr else None
                               for h in path.hops])


def infer_relationships(paths: Iterable[TracePath],
                        asn_of: Callable[[str], int | None]) -> list[tuple[int, int]]:
    """Provider-customer edges (AS_in, forwarder AS) where a path enters and
    leaves the forwarder's AS through the same neighbour AS.

    Paths with any unmapped or silent hop are skipped.
    """
    edges = set()
    for p in paths:
        if any(h.hop_addr is None for h in p.hops):
            continue
        asns = [asn_of(h.hop_addr) for h in p.hops]
        fwd_asn = asn_of(p.target)
        if fwd_asn is None or any(a is None for a in asns):
            continue
        idx = next((i for i, h in enumerate(p.hops) if h.hop_addr == p.target), None)
        if idx is None:
            continue
        lo = idx
        while lo > 0 and asns[lo - 1] == fwd_asn:
            lo -= 1
        hi = idx
        while hi + 1 < len(asns) and asns[hi + 1] == fwd_asn:
            hi += 1
        if lo == 0 or hi + 1 >= len(asns):
            continue
        as_in, as_out = asns[lo - 1], asns[hi + 1]
        if as_in == as_out:
            edges.add((as_in, fwd_asn))
    return sorted(edges)
