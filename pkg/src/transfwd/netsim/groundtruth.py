"""Expected scan outcomes derived from topology structure alone.

Nothing here runs packets: reachability follows from routing, the
upstream chain, source address validation on spoofing egress links, and
resolver access lists.  It is the independent side of the
classifier-versus-simulator equivalence check.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass

from .topology import Node, Role, SimTopology

ROLE_CLASS = {
    Role.TRANSPARENT_FORWARDER: "TransparentForwarder",
    Role.RECURSIVE_FORWARDER: "RecursiveForwarder",
    Role.RESOLVER: "RecursiveResolver",
}
SENSOR_CLASS = {1: "RecursiveForwarder", 2: "TransparentForwarder", 3: "TransparentForwarder"}


def role_class(node: Node) -> str:
    """The component class a node's declared role stands for."""
    if node.role == Role.SENSOR:
        return SENSOR_CLASS[node.kind]
    return ROLE_CLASS.get(node.role, "NoResponse")


@dataclass(frozen=True)
class Expected:
    reachable: bool
    cls: str
    responder: str | None = None
    resolver: str | None = None


def _covered(addr: str, prefixes) -> bool:
    a = ipaddress.IPv4Address(addr)
    return any(a in ipaddress.IPv4Network(p, strict=False) for p in prefixes)


class _Oracle:
    def __init__(self, topo: SimTopology, qname: str):
        self.topo = topo
        self.auth = topo.auth_for(qname)

    def connected(self, a: str, b: str) -> bool:
        return self.topo.path(a, b) is not None

    def spoof_allowed(self, node: Node, upstream: Node, src: str) -> bool:
        hop = self.topo.first_hop(node.id, upstream.id)
        if hop is None:
            return False
        if not self.topo.link(node.id, hop).sav:
            return True
        legit = node.prefixes or [f"{a}/32" for a in node.addrs]
        return _covered(src, legit)

    def answer(self, node: Node, queried: str, src: str, depth: int = 0):
        """(reply source, resolver egress) for a query arriving at ``node``.

        ``src`` is the query's source address, which is also where the
        answer must end up.  None if no answer gets there.
        """
        if depth > 16:
            return None
        client = self.topo.owner(src)
        if client is None or not self.connected(node.id, client.id):
            return None
        role = node.role
        kind = node.kind if role == Role.SENSOR else None
        if role == Role.RESOLVER:
            if not node.open and not _covered(src, node.allowed):
                return None
            owner = self.topo.owner(self.auth) if self.auth else None
            if owner is None or not self.connected(node.id, owner.id):
                return None
            return queried, node.addr
        up_addr = self.topo.upstream_addr(node)
        up = self.topo.owner(up_addr) if up_addr else None
        if up is None:
            return None
        if role == Role.RECURSIVE_FORWARDER or kind in (1, 2):
            egress = node.addrs[1] if kind == 2 else (queried if kind == 1 else node.addr)
            got = self.answer(up, up_addr, egress, depth + 1)
            if got is None or got[0] != up_addr:
                return None
            reply_from = egress if kind == 2 else queried
            return reply_from, got[1]
        if role == Role.TRANSPARENT_FORWARDER or kind == 3:
            if not self.spoof_allowed(node, up, src):
                return None
            return self.answer(up, up_addr, src, depth + 1)
        return None


def expected_outcome(topo: SimTopology, target: str, scanner: str, qname: str) -> Expected:
    node = topo.owner(target)
    if node is None:
        return Expected(False, "NoResponse")
    got = _Oracle(topo, qname).answer(node, target, scanner)
    if got is None:
        return Expected(False, "NoResponse")
    responder, resolver = got
    if responder != target:
        cls = "TransparentForwarder"
    elif resolver == responder:
        cls = "RecursiveResolver"
    else:
        cls = "RecursiveForwarder"
    return Expected(True, cls, responder, resolver)


def candidate_targets(topo: SimTopology) -> list[str]:
    """Addresses a probe-all scan covers: every node except scanners and
    authoritative servers, receive address only for sensors."""
    out = []
    for n in topo.nodes:
        if n.role in (Role.SCANNER, Role.AUTH):
            continue
        out.extend(n.addrs[:1] if n.role == Role.SENSOR else n.addrs)
    return out
