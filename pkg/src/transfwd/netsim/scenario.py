"""Scripted runs over a topology.

A script is a list of ``{"at_ms", "node", "action", ...}`` steps run in
time order.  Actions:

    scan    run a transactional scan from ``node`` (targets list or "all")
    send    originate one DNS query: ``dst``, optional ``ttl``, ``sport``, ``txid``
    lose    drop the next ``count`` packets on link ``node`` -> ``to``
    trace   DNSRoute++ from ``node`` towards ``targets``

``probe-all`` is the built-in script: the first scanner scans every
candidate target at t=0.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from .. import packet as P
from ..classify import ClassifiedTarget, Expectation, classify_log
from ..dnsroute import TracePath, trace_many
from ..scan import ScanLog, run_scan
from ..wire import encode, make_query
from .engine import Network
from .groundtruth import candidate_targets
from .topology import Link, Node, Role, SimTopology

ACTIONS = ("scan", "send", "lose", "trace")


class ScenarioError(ValueError):
    pass


@dataclass
class ScenarioResult:
    network: Network
    scans: list[ScanLog] = field(default_factory=list)
    classified: list[list[ClassifiedTarget]] = field(default_factory=list)
    traces: list[TracePath] = field(default_factory=list)

    def trace_jsonl(self) -> str:
        return self.network.trace_jsonl()


def default_qname(topo: SimTopology) -> str:
    auths = topo.by_role(Role.AUTH)
    if not auths:
        raise ScenarioError("topology has no AuthServer")
    return f"odns.{auths[0].zone}"


def expectation_for(topo: SimTopology, qname: str, relaxed: bool = False) -> Expectation:
    auth = topo.owner(topo.auth_for(qname) or "")
    if auth is None:
        raise ScenarioError(f"no AuthServer serves {qname}")
    return Expectation(auth.control_ip, qname, relaxed)


def probe_all(topo: SimTopology) -> list[dict]:
    scanners = topo.by_role(Role.SCANNER)
    if not scanners:
        raise ScenarioError("topology has no Scanner")
    return [{"at_ms": 0, "node": scanners[0].id, "action": "scan", "targets": "all"}]


BUILTIN = {"probe-all": probe_all}


def load_script(spec, topo: SimTopology) -> list[dict]:
    """A built-in name, a JSON file path, or an already parsed list."""
    if isinstance(spec, list):
        return spec
    if spec in BUILTIN:
        return BUILTIN[spec](topo)
    try:
        data = json.loads(Path(spec).read_text())
    except FileNotFoundError:
        raise
    except (OSError, ValueError) as exc:
        raise ScenarioError(f"{spec}: {exc}") from exc
    if not isinstance(data, list):
        raise ScenarioError(f"{spec}: script must be a list of steps")
    return data


def run_scenario(topo: SimTopology, script, seed: int = 0, qname: str | None = None,
                 rate: float = 1000.0, timeout: float = 20.0, relaxed: bool = False,
                 max_ttl: int = 32) -> ScenarioResult:
    """Deterministic for a given (topology, script, seed)."""
    steps = load_script(script, topo)
    qname = qname or default_qname(topo)
    net = Network(topo, seed=seed)
    res = ScenarioResult(net)
    rng = random.Random(seed)
    ordered = sorted(enumerate(steps), key=lambda t: (int(t[1].get("at_ms", 0)), t[0]))
    for _, step in ordered:
        action = step.get("action")
        if action not in ACTIONS:
            raise ScenarioError(f"unknown action {action!r}")
        node = step.get("node")
        try:
            topo.node(node)
        except KeyError:
            raise ScenarioError(f"step references unknown node {node!r}") from None
        net.run_until(int(step.get("at_ms", 0)))
        name = step.get("qname", qname)
        if action == "scan":
            targets = step.get("targets", "all")
            if targets == "all":
                targets = candidate_targets(topo)
            io = net.endpoint(node)
            log = run_scan(io, targets, name, rate=step.get("rate", rate),
                           timeout=step.get("timeout", timeout), seed=rng.randrange(2 ** 32))
            res.scans.append(log)
            res.classified.append(classify_log(log, expectation_for(topo, name, relaxed),
                                               step.get("timeout", timeout)))
        elif action == "send":
            n = topo.node(node)
            pkt = P.udp(n.addr, step["dst"], step.get("sport", 40000), 53,
                        encode(make_query(name, step.get("txid", 0))),
                        ttl=step.get("ttl", P.DEFAULT_TTL))
            net.originate(node, pkt)
        elif action == "lose":
            net.lose(node, step["to"], step.get("count", 1))
        else:
            io = net.endpoint(node)
            res.traces.extend(trace_many(io, step["targets"], name,
                                         max_ttl=step.get("max_ttl", max_ttl),
                                         rng=random.Random(rng.randrange(2 ** 32))))
    net.run()
    return res


def sensor_lab(kind: int, recv: str, send: str | None, upstream: str,
               rate_window: float = 300.0, scanners: int = 1) -> SimTopology:
    """Scanner(s), one sensor, its upstream resolver and an authoritative
    server around a core router.  Scanner i sits in 198.51.(100+i).0/24."""
    addrs = [recv] if kind != 2 else [recv, send]
    nodes = [
        Node("core", ["100.64.0.1"]),
        Node("sensor", addrs, Role.SENSOR, upstream="upstream", kind=kind,
             rate_window=rate_window),
        Node("upstream", [upstream], Role.RESOLVER),
        Node("auth", ["198.18.0.53"], Role.AUTH, zone="example.net", control_ip="198.51.100.1"),
    ]
    links = [Link("sensor", "core", sav=kind != 3), Link("upstream", "core", sav=True),
             Link("auth", "core", sav=True)]
    for i in range(scanners):
        sid = "scanner" if i == 0 else f"scanner{i}"
        nodes.append(Node(sid, [f"198.51.{100 + i}.10"], Role.SCANNER))
        links.append(Link(sid, "core", sav=True))
    topo = SimTopology(nodes, links)
    topo.validate()
    return topo


def probe_sensor(topo: SimTopology, scanner: str, count: int, span: float,
                 qname: str = "odns.example.net", seed: int = 0) -> list[tuple[float, str]]:
    """Send ``count`` queries evenly over ``span`` seconds from ``scanner`` to
    the sensor; returns (arrival time, source) of every DNS answer."""
    net = Network(topo, seed=seed)
    io = net.endpoint(scanner)
    sensor = topo.node("sensor").addr
    rng = random.Random(seed)
    answers = []
    step = span / count if count else 0
    for i in range(count):
        net.run_until(round(i * step * 1000))
        for pkt in io.recv(io.now()):
            if pkt.is_udp and pkt.sport == 53:
                answers.append((io.now(), pkt.src))
        payload = encode(make_query(qname, rng.randrange(65536)))
        io.send(P.udp(io.address, sensor, 40000 + i % 20000, 53, payload))
    deadline = span + 10
    while io.now() < deadline:
        for pkt in io.recv(deadline):
            if pkt.is_udp and pkt.sport == 53:
                answers.append((io.now(), pkt.src))
    return answers
