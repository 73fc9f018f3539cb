"""Discrete-event packet delivery over a SimTopology.

Integer millisecond clock, per-link latency, no queueing.  Every packet a
node originates ends in exactly one outcome:

    delivered    reached a node owning its destination address
    dropped_sav  refused by source address validation on the origin link
    ttl_exceeded TTL ran out in transit (a time-exceeded is sent back)
    lost         consumed by a scripted loss rule
    unroutable   no node owns the destination, or no path leads there
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
import random
from collections import Counter, defaultdict
from typing import Callable

from .. import packet as P
from ..auth import ZoneConfig
from ..roles import (
    AuthRole, Handler, PrefixSet, RecursiveForwarderRole, RecursiveResolverRole,
    TransparentForwarderRole,
)
from ..sensors import SensorConfig, build_sensor
from .topology import Node, Role, SimTopology

OUTCOMES = ("delivered", "dropped_sav", "ttl_exceeded", "lost", "unroutable")


def _ms(seconds: float) -> int:
    # never round a deadline down: callers rely on it having passed
    return math.ceil(seconds * 1000 - 1e-6)


class _Ctx:
    """Per-node context handed to role handlers."""

    def __init__(self, net: "Network", node: Node):
        self.net = net
        self.node_id = node.id
        self.addrs = list(node.addrs)
        self.rng = random.Random(f"{net.seed}:{node.id}")
        self.quote_len = net.quote_len

    def now(self) -> float:
        return self.net.now_ms / 1000

    def send(self, pkt: P.Packet) -> bool:
        return self.net.originate(self.node_id, pkt)

    def call_later(self, delay: float, fn: Callable[[], None]) -> None:
        self.net.schedule(self.net.now_ms + _ms(delay), fn)

    def note(self, kind: str, **data) -> None:
        self.net.record(kind, self.node_id, **data)


class SimIO:
    """PacketIO endpoint bound to one simulated node."""

    def __init__(self, net: "Network", node_id: str):
        self.net = net
        self.node_id = node_id
        self.address = net.topo.node(node_id).addr
        self.inbox: list[P.Packet] = []

    def now(self) -> float:
        return self.net.now_ms / 1000

    def send(self, pkt: P.Packet) -> bool:
        return self.net.originate(self.node_id, pkt)

    def recv(self, until: float) -> list[P.Packet]:
        if not self.inbox:
            self.net.run_until(_ms(until), stop=lambda: bool(self.inbox))
        out, self.inbox = self.inbox, []
        return out


class Network:
    def __init__(self, topo: SimTopology, seed: int = 0, quote_len: int = P.DEFAULT_QUOTE,
                 trace_hops: bool = True):
        topo.validate()
        self.topo = topo
        self.seed = seed
        self.quote_len = quote_len
        self.trace_hops = trace_hops
        self.now_ms = 0
        self.trace: list[dict] = []
        self.outcomes: Counter = Counter()
        self.originated = 0
        self._queue: list = []
        self._seq = itertools.count()
        self._pid = itertools.count(1)
        self._loss: dict[tuple[str, str], int] = defaultdict(int)
        self._next: dict[tuple[str, str], str | None] = {}
        self._legit = {n.id: PrefixSet(n.prefixes or [f"{a}/32" for a in n.addrs])
                       for n in topo.nodes}
        self.endpoints: dict[str, SimIO] = {}
        self.handlers: dict[str, Handler] = {}
        self.contexts: dict[str, _Ctx] = {}
        for n in topo.nodes:
            self.contexts[n.id] = _Ctx(self, n)
            self.handlers[n.id] = self._build_handler(n)

    # setup

    def _build_handler(self, n: Node) -> Handler:
        up = self.topo.upstream_addr(n)
        if n.role == Role.RESOLVER:
            return RecursiveResolverRole(self.topo.auth_for, open=n.open, allowed=n.allowed)
        if n.role == Role.RECURSIVE_FORWARDER:
            return RecursiveForwarderRole(up, egress=n.addr)
        if n.role == Role.TRANSPARENT_FORWARDER:
            return TransparentForwarderRole(up)
        if n.role == Role.AUTH:
            return AuthRole(ZoneConfig(n.zone, n.control_ip, n.ttl))
        if n.role == Role.SENSOR:
            send = n.addrs[1] if n.kind == 2 else n.addr
            return build_sensor(SensorConfig(n.kind, n.addr, up, send, n.rate_window))
        return Handler()

    def endpoint(self, node_id: str) -> SimIO:
        if node_id not in self.endpoints:
            self.endpoints[node_id] = SimIO(self, node_id)
        return self.endpoints[node_id]

    def lose(self, a: str, b: str, count: int = 1) -> None:
        """Drop the next ``count`` packets sent from a to b."""
        self._loss[(a, b)] += count

    # event loop

    def schedule(self, at_ms: int, fn: Callable, *args) -> None:
        heapq.heappush(self._queue, (max(at_ms, self.now_ms), next(self._seq), fn, args))

    def run_until(self, t_ms: int, stop: Callable[[], bool] | None = None) -> None:
        while self._queue and self._queue[0][0] <= t_ms:
            at, _, fn, args = heapq.heappop(self._queue)
            self.now_ms = at
            fn(*args)
            if stop is not None and stop():
                return
        self.now_ms = max(self.now_ms, t_ms)

    def run(self, horizon_ms: int = 10 ** 9) -> None:
        while self._queue and self._queue[0][0] <= horizon_ms:
            at, _, fn, args = heapq.heappop(self._queue)
            self.now_ms = at
            fn(*args)

    # tracing

    def record(self, ev: str, node: str, **data) -> None:
        entry = {"t": self.now_ms, "ev": ev, "node": node}
        entry.update(data)
        self.trace.append(entry)

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.trace)

    def _finish(self, pid: int, outcome: str, node: str, pkt: P.Packet) -> None:
        self.outcomes[outcome] += 1
        self.record(outcome, node, pid=pid, **pkt.summary())

    # forwarding

    def next_hop(self, node_id: str, dst_node: str) -> str | None:
        key = (node_id, dst_node)
        if key not in self._next:
            self._next[key] = self.topo.first_hop(node_id, dst_node)
        return self._next[key]

    def originate(self, node_id: str, pkt: P.Packet) -> bool:
        """Emit a packet from a node.  False only when the origin link's SAV drops it."""
        pid = next(self._pid)
        self.originated += 1
        self.record("send", node_id, pid=pid, **pkt.summary())
        owner = self.topo.owner(pkt.dst)
        if owner is not None and owner.id == node_id:
            self.schedule(self.now_ms, self._arrive, node_id, pid, pkt)
            return True
        hop = self.next_hop(node_id, owner.id) if owner is not None else None
        if hop is None:
            self._finish(pid, "unroutable", node_id, pkt)
            return True
        link = self.topo.link(node_id, hop)
        if link.sav and pkt.src not in self._legit[node_id]:
            self._finish(pid, "dropped_sav", node_id, pkt)
            return False
        self._transmit(node_id, hop, pid, pkt)
        return True

    def _transmit(self, u: str, v: str, pid: int, pkt: P.Packet) -> None:
        if self._loss.get((u, v)):
            self._loss[(u, v)] -= 1
            self._finish(pid, "lost", u, pkt)
            return
        self.schedule(self.now_ms + self.topo.link(u, v).latency_ms, self._arrive, v, pid, pkt)

    def _arrive(self, node_id: str, pid: int, pkt: P.Packet) -> None:
        node = self.topo.node(node_id)
        if pkt.dst in node.addrs:
            self._finish(pid, "delivered", node_id, pkt)
            self._dispatch(node, pkt)
            return
        ttl = pkt.ttl - 1
        if ttl <= 0:
            self._finish(pid, "ttl_exceeded", node_id, pkt)
            if not node.silent and not pkt.is_icmp:
                self.originate(node_id, P.icmp_error(pkt, node.addr, P.ICMP_TIME_EXCEEDED,
                                                     0, self.quote_len))
            return
        owner = self.topo.owner(pkt.dst)
        hop = self.next_hop(node_id, owner.id)
        if hop is None:
            self._finish(pid, "unroutable", node_id, pkt)
            return
        if self.trace_hops:
            self.record("hop", node_id, pid=pid, ttl=ttl)
        self._transmit(node_id, hop, pid, pkt.with_ttl(ttl))

    def _dispatch(self, node: Node, pkt: P.Packet) -> None:
        ep = self.endpoints.get(node.id)
        if ep is not None:
            ep.inbox.append(pkt)
            return
        consumed = self.handlers[node.id].on_packet(self.contexts[node.id], pkt)
        if not consumed and pkt.is_udp and not node.silent:
            self.originate(node.id, P.icmp_error(pkt, pkt.dst, P.ICMP_UNREACH,
                                                 P.UNREACH_PORT, self.quote_len))

    # bookkeeping

    def conservation(self) -> tuple[int, int]:
        """(originated, finished) counts; equal once the queue drained."""
        return self.originated, sum(self.outcomes.values())
