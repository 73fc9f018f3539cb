"""Packet handlers for the DNS components that sit on a node.

A handler reacts to packets addressed to its node through a small context
object (clock, RNG, send, timers).  The simulator provides one context per
node; :func:`transfwd.sensors.serve_live` provides one on top of live
sockets, so the same handler code runs in both places.
"""

from __future__ import annotations

import ipaddress
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Protocol

from . import packet as P
from .auth import ZoneConfig, handle_datagram
from .wire import DnsMessage, Rcode, encode, make_query, make_response, try_decode

DNS_PORT = 53


class NodeContext(Protocol):
    node_id: str
    addrs: list[str]
    rng: random.Random
    quote_len: int

    def now(self) -> float: ...

    def send(self, pkt: P.Packet) -> bool: ...

    def call_later(self, delay: float, fn: Callable[[], None]) -> None: ...

    def note(self, kind: str, **data) -> None: ...


class Handler:
    """Base handler: serves nothing, so UDP gets a port-unreachable."""

    def on_packet(self, ctx: NodeContext, pkt: P.Packet) -> bool:
        return pkt.is_icmp


def reply(ctx: NodeContext, src: str, dst: str, dport: int, msg: DnsMessage) -> bool:
    return ctx.send(P.udp(src, dst, DNS_PORT, dport, encode(msg)))


def ttl_exceeded(ctx: NodeContext, pkt: P.Packet, src: str) -> bool:
    return ctx.send(P.icmp_error(pkt, src, P.ICMP_TIME_EXCEEDED, 0, ctx.quote_len))


def payload_key(pkt: P.Packet) -> tuple[int, int] | None:
    if len(pkt.payload) < 2:
        return None
    return pkt.dport, int.from_bytes(pkt.payload[:2], "big")


class PrefixSet:
    def __init__(self, prefixes: Iterable[str] = ()):
        self.nets = [ipaddress.IPv4Network(p, strict=False) for p in prefixes]

    def __contains__(self, addr: str) -> bool:
        a = ipaddress.IPv4Address(addr)
        return any(a in n for n in self.nets)


@dataclass
class _Client:
    query: DnsMessage
    addr: str
    port: int
    reply_from: str


@dataclass
class _Pending:
    qkey: tuple
    upstream: str
    clients: list[_Client] = field(default_factory=list)


class _Upstream(Handler):
    """Shared machinery for handlers that send their own upstream queries.

    Identical questions towards the same upstream are coalesced onto one
    outstanding query, which also stops forwarding loops from multiplying.
    """

    upstream_timeout = 3.0

    def __init__(self):
        self.pending: dict[tuple[int, int], _Pending] = {}
        self.inflight: dict[tuple, _Pending] = {}

    def _fresh_key(self, ctx: NodeContext) -> tuple[int, int]:
        while True:
            key = (ctx.rng.randrange(1024, 65536), ctx.rng.randrange(65536))
            if key not in self.pending:
                return key

    def _ask(self, ctx: NodeContext, egress: str, upstream: str, client: _Client) -> None:
        q = client.query
        qkey = (q.qname.lower(), q.qtype, upstream)
        entry = self.inflight.get(qkey)
        if entry is not None:
            entry.clients.append(client)
            return
        key = self._fresh_key(ctx)
        entry = _Pending(qkey, upstream, [client])
        self.pending[key] = entry
        self.inflight[qkey] = entry
        ctx.send(P.udp(egress, upstream, key[0], DNS_PORT,
                       encode(make_query(q.qname, key[1], q.qtype))))

        def expire():
            if self.pending.get(key) is entry:
                del self.pending[key]
                self.inflight.pop(qkey, None)
                ctx.note("upstream-timeout", upstream=upstream)
                self._answer_all(ctx, entry, (), Rcode.SERVFAIL)

        ctx.call_later(self.upstream_timeout, expire)

    def _take_answer(self, ctx: NodeContext, pkt: P.Packet):
        key = payload_key(pkt)
        entry = self.pending.get(key) if key else None
        if entry is None or pkt.sport != DNS_PORT or pkt.src != entry.upstream:
            return None, None
        msg = try_decode(pkt.payload)
        if msg is None or not msg.qr:
            return None, None
        del self.pending[key]
        self.inflight.pop(entry.qkey, None)
        return entry, msg

    @staticmethod
    def _answer_all(ctx: NodeContext, entry: _Pending, answers, rcode) -> None:
        for c in entry.clients:
            reply(ctx, c.reply_from, c.addr, c.port,
                  make_response(c.query, answers, rcode=rcode, ra=True))


class RecursiveResolverRole(_Upstream):
    """Resolves through the authoritative server and caches answers."""

    def __init__(self, auth_lookup: Callable[[str], str | None], open: bool = True,
                 allowed: Iterable[str] = ()):
        super().__init__()
        self.auth_lookup = auth_lookup
        self.open = open
        self.allowed = PrefixSet(allowed)
        self.cache: dict[str, tuple[float, tuple]] = {}

    def on_packet(self, ctx, pkt):
        if not pkt.is_udp:
            return True
        if pkt.dport == DNS_PORT:
            self._query(ctx, pkt)
            return True
        entry, msg = self._take_answer(ctx, pkt)
        if entry is None:
            return payload_key(pkt) in self.pending
        if msg.rcode == Rcode.NOERROR and msg.answers:
            ttl = min(a.ttl for a in msg.answers)
            self.cache[msg.qname.lower()] = (ctx.now() + ttl, msg.answers)
        self._answer_all(ctx, entry, msg.answers, msg.rcode)
        return True

    def _query(self, ctx, pkt):
        msg = try_decode(pkt.payload)
        if msg is None or msg.qr:
            return
        if not self.open and pkt.src not in self.allowed:
            ctx.note("refused", client=pkt.src)
            return
        hit = self.cache.get(msg.qname.lower())
        if hit and hit[0] > ctx.now():
            reply(ctx, pkt.dst, pkt.src, pkt.sport, make_response(msg, hit[1], ra=True))
            return
        auth = self.auth_lookup(msg.qname)
        if auth is None:
            reply(ctx, pkt.dst, pkt.src, pkt.sport,
                  make_response(msg, rcode=Rcode.SERVFAIL, ra=True))
            return
        self._ask(ctx, ctx.addrs[0], auth, _Client(msg, pkt.src, pkt.sport, pkt.dst))


class RecursiveForwarderRole(_Upstream):
    """Relays queries from its own address and relays the answer back.

    ``egress`` is the address used towards the upstream and ``reply_from``
    the source of answers to the client; both default to the address the
    client queried, which is what a plain recursive forwarder does.
    """

    def __init__(self, upstream: str, egress: str | None = None,
                 reply_from: str | None = None, admit: Callable | None = None):
        super().__init__()
        self.upstream = upstream
        self.egress = egress
        self.reply_from = reply_from
        self.admit = admit

    def on_packet(self, ctx, pkt):
        if not pkt.is_udp:
            return True
        if pkt.dport == DNS_PORT:
            msg = try_decode(pkt.payload)
            if msg is None or msg.qr:
                return True
            if self.admit is not None and not self.admit(pkt.src, ctx.now()):
                ctx.note("rate-limited", client=pkt.src)
                return True
            self._ask(ctx, self.egress or pkt.dst, self.upstream,
                      _Client(msg, pkt.src, pkt.sport, self.reply_from or pkt.dst))
            return True
        entry, msg = self._take_answer(ctx, pkt)
        if entry is None:
            return payload_key(pkt) in self.pending
        self._answer_all(ctx, entry, msg.answers, msg.rcode)
        return True


class TransparentForwarderRole(Handler):
    """Relays queries upstream with the requester's source address intact.

    Holds no per-transaction state: the answer goes straight from the
    upstream resolver to the original client.  A query arriving with TTL 1
    cannot be forwarded, so the IP layer answers with time-exceeded.
    """

    def __init__(self, upstream: str, admit: Callable | None = None):
        self.upstream = upstream
        self.admit = admit

    def on_packet(self, ctx, pkt):
        if not pkt.is_udp:
            return True
        if pkt.dport != DNS_PORT:
            return False
        if pkt.ttl <= 1:
            ttl_exceeded(ctx, pkt, pkt.dst)
            return True
        if self.admit is not None and not self.admit(pkt.src, ctx.now()):
            ctx.note("rate-limited", client=pkt.src)
            return True
        key = payload_key(pkt)
        ctx.note("relay", client=pkt.src, sport=pkt.sport,
                 txid=key[1] if key else None, upstream=self.upstream)
        if not ctx.send(replace(pkt, dst=self.upstream, ttl=pkt.ttl - 1)):
            ctx.note("spoof-blocked", client=pkt.src, upstream=self.upstream)
        return True


class AuthRole(Handler):
    def __init__(self, cfg: ZoneConfig):
        self.cfg = cfg

    def on_packet(self, ctx, pkt):
        if not pkt.is_udp:
            return True
        if pkt.dport != DNS_PORT:
            return False
        out = handle_datagram(pkt.src, pkt.payload, self.cfg)
        if out is not None:
            ctx.send(P.udp(pkt.dst, pkt.src, DNS_PORT, pkt.sport, out))
        return True
