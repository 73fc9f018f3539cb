"""Declarative ground-truth topology for the simulator."""

from __future__ import annotations

import ipaddress
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

from ..wire import in_zone


class Role(str, Enum):
    STUB = "Stub"
    ROUTER = "Router"
    RESOLVER = "RecursiveResolver"
    RECURSIVE_FORWARDER = "RecursiveForwarder"
    TRANSPARENT_FORWARDER = "TransparentForwarder"
    AUTH = "AuthServer"
    SCANNER = "Scanner"
    SENSOR = "Sensor"


FORWARDING_ROLES = {Role.RECURSIVE_FORWARDER, Role.TRANSPARENT_FORWARDER, Role.SENSOR}


class TopologyError(ValueError):
    pass


@dataclass
class Node:
    id: str
    addrs: list[str]
    role: Role = Role.ROUTER
    upstream: str | None = None
    open: bool = True
    allowed: list[str] = field(default_factory=list)
    zone: str | None = None
    control_ip: str | None = None
    ttl: int = 60
    kind: int | None = None
    rate_window: float = 300.0
    silent: bool = False
    prefixes: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.role = Role(self.role)

    @property
    def addr(self) -> str:
        return self.addrs[0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["role"] = self.role.value
        defaults = Node(id="", addrs=[])
        return {k: v for k, v in d.items()
                if k in ("id", "addrs", "role") or v != getattr(defaults, k)}


@dataclass
class Link:
    a: str
    b: str
    sav: bool = False
    latency_ms: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SimTopology:
    nodes: list[Node]
    links: list[Link]
    asn_map: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self._by_id = {n.id: n for n in self.nodes}
        self._owner = {}
        for n in self.nodes:
            for a in n.addrs:
                self._owner[a] = n.id
        self._links = {}
        adj: dict[str, set] = {n.id: set() for n in self.nodes}
        for link in self.links:
            self._links[(link.a, link.b)] = link
            self._links[(link.b, link.a)] = link
            adj.setdefault(link.a, set()).add(link.b)
            adj.setdefault(link.b, set()).add(link.a)
        self._adj = {k: sorted(v) for k, v in adj.items()}
        self._dist: dict[str, dict[str, int]] = {}

    # lookups

    def node(self, node_id: str) -> Node:
        return self._by_id[node_id]

    def owner(self, addr: str) -> Node | None:
        nid = self._owner.get(addr)
        return self._by_id[nid] if nid is not None else None

    def link(self, a: str, b: str) -> Link | None:
        return self._links.get((a, b))

    def neighbors(self, node_id: str) -> list[str]:
        return self._adj.get(node_id, [])

    def upstream_addr(self, node: Node) -> str | None:
        if node.upstream is None:
            return None
        if node.upstream in self._by_id:
            return self._by_id[node.upstream].addr
        return node.upstream

    def upstream_node(self, node: Node) -> Node | None:
        addr = self.upstream_addr(node)
        return self.owner(addr) if addr else None

    def auth_for(self, qname: str) -> str | None:
        best = None
        for n in self.nodes:
            if n.role == Role.AUTH and n.zone and in_zone(qname, n.zone):
                if best is None or len(n.zone) > len(best.zone):
                    best = n
        return best.addr if best else None

    def by_role(self, role: Role) -> list[Node]:
        return [n for n in self.nodes if n.role == role]

    # checks

    def validate(self) -> list[str]:
        """Raise TopologyError on hard errors; return soft warnings."""
        if len(self._by_id) != len(self.nodes):
            raise TopologyError("duplicate node ids")
        seen: dict[str, str] = {}
        for n in self.nodes:
            if not n.addrs:
                raise TopologyError(f"node {n.id} has no address")
            for a in n.addrs:
                try:
                    ipaddress.IPv4Address(a)
                except ValueError as exc:
                    raise TopologyError(f"node {n.id}: bad address {a!r}") from exc
                if a in seen:
                    raise TopologyError(f"address {a} used by {seen[a]} and {n.id}")
                seen[a] = n.id
        for link in self.links:
            for end in (link.a, link.b):
                if end not in self._by_id:
                    raise TopologyError(f"link references unknown node {end!r}")
            if link.a == link.b:
                raise TopologyError(f"self-link on {link.a}")
            if link.latency_ms < 0:
                raise TopologyError(f"negative latency on {link.a}-{link.b}")
        for n in self.nodes:
            if n.role in FORWARDING_ROLES:
                if n.upstream is None:
                    raise TopologyError(f"{n.role.value} {n.id} needs an upstream")
                if self.upstream_node(n) is None:
                    raise TopologyError(f"{n.id}: upstream {n.upstream!r} does not resolve to a node")
            if n.role == Role.AUTH and (not n.zone or not n.control_ip):
                raise TopologyError(f"AuthServer {n.id} needs zone and control_ip")
            if n.role == Role.SENSOR:
                if n.kind not in (1, 2, 3):
                    raise TopologyError(f"sensor {n.id}: kind must be 1, 2 or 3")
                if n.kind == 2:
                    if len(n.addrs) < 2:
                        raise TopologyError(f"sensor {n.id}: kind 2 needs receive and send addresses")
                    if int(ipaddress.IPv4Address(n.addrs[0])) >> 8 != int(ipaddress.IPv4Address(n.addrs[1])) >> 8:
                        raise TopologyError(f"sensor {n.id}: addresses not in one /24")
        for p in self.asn_map:
            try:
                ipaddress.IPv4Network(p)
            except ValueError as exc:
                raise TopologyError(f"bad asn_map prefix {p!r}") from exc

        warnings = []
        for n in self.nodes:
            spoofs = n.role == Role.TRANSPARENT_FORWARDER or (n.role == Role.SENSOR and n.kind == 3)
            if spoofs:
                up = self.upstream_node(n)
                hop = self.first_hop(n.id, up.id) if up else None
                if hop is not None and self.link(n.id, hop).sav:
                    warnings.append(f"{n.id}: egress link to {hop} validates source addresses")
        return warnings

    def first_hop(self, src: str, dst: str) -> str | None:
        """Next node on the shortest path (BFS, smallest id breaks ties)."""
        if src == dst:
            return None
        dist = self._bfs(dst)
        if src not in dist:
            return None
        return min(v for v in self.neighbors(src) if dist.get(v) == dist[src] - 1)

    def _bfs(self, root: str) -> dict[str, int]:
        if root in self._dist:
            return self._dist[root]
        dist = {root: 0}
        q = deque([root])
        while q:
            u = q.popleft()
            for v in self.neighbors(u):
                if v not in dist:
                    dist[v] = dist[u] + 1
                    q.append(v)
        self._dist[root] = dist
        return dist

    def path(self, src: str, dst: str) -> list[str] | None:
        """Node ids from src to dst inclusive, following first_hop."""
        if src == dst:
            return [src]
        out = [src]
        cur = src
        while cur != dst:
            cur = self.first_hop(cur, dst)
            if cur is None:
                return None
            out.append(cur)
        return out

    # serialisation

    def to_dict(self) -> dict:
        return {
            "nodes": [n.to_dict() for n in self.nodes],
            "links": [link.to_dict() for link in self.links],
            "asn_map": dict(self.asn_map),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SimTopology":
        try:
            nodes = [Node(**n) for n in data["nodes"]]
            links = [Link(**link) for link in data.get("links", [])]
        except (KeyError, TypeError) as exc:
            raise TopologyError(f"malformed topology: {exc}") from exc
        asn_map = {k: int(v) for k, v in data.get("asn_map", {}).items()}
        topo = cls(nodes, links, asn_map)
        topo.validate()
        return topo

    @classmethod
    def load(cls, path) -> "SimTopology":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)
