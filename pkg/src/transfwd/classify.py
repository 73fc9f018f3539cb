"""Post-processing of a closed transaction log.

``correlate`` pairs responses with probes by (client port, DNS id) inside
the response window; ``classify`` turns each pair into one outcome class
using the probed address, the responding address and the mirrored A record.
"""

from __future__ import annotations

import bisect
import csv
import io
import ipaddress
import json
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from .scan import DEFAULT_TIMEOUT, ProbeRecord, ResponseRecord, ScanLog
from .wire import names_equal


class Component(str, Enum):
    TRANSPARENT_FORWARDER = "TransparentForwarder"
    RECURSIVE_FORWARDER = "RecursiveForwarder"
    RECURSIVE_RESOLVER = "RecursiveResolver"
    NO_RESPONSE = "NoResponse"
    MANIPULATED = "Manipulated"


ODNS = {Component.TRANSPARENT_FORWARDER, Component.RECURSIVE_FORWARDER,
        Component.RECURSIVE_RESOLVER}


@dataclass
class Transaction:
    probe: ProbeRecord
    responses: list[ResponseRecord] = field(default_factory=list)
    late: list[ResponseRecord] = field(default_factory=list)

    @property
    def first(self) -> ResponseRecord | None:
        return self.responses[0] if self.responses else None


@dataclass
class Correlation:
    transactions: list[Transaction]
    unsolicited: list[ResponseRecord]

    def __iter__(self):
        return iter(self.transactions)

    def __len__(self):
        return len(self.transactions)


def correlate(log: ScanLog, timeout: float = DEFAULT_TIMEOUT) -> Correlation:
    """Pair every response with the probe that shares its (port, id) key.

    A response belongs to the latest probe with that key sent no later than
    it arrived.  Outside ``timeout`` it is kept as late; with no such probe
    at all it is unsolicited.  Responses per probe stay in arrival order.
    """
    txs = [Transaction(p) for p in log.probes]
    by_key: dict[tuple[int, int], list[tuple[float, int]]] = defaultdict(list)
    for i, p in enumerate(log.probes):
        by_key[p.key].append((p.sent_at, i))
    for lst in by_key.values():
        lst.sort()

    unsolicited = []
    ordered = sorted(enumerate(log.responses), key=lambda t: (t[1].received_at, t[0]))
    for _, r in ordered:
        cands = by_key.get(r.key)
        pos = bisect.bisect_right(cands, (r.received_at, float("inf"))) if cands else 0
        if not pos:
            unsolicited.append(r)
            continue
        sent_at, idx = cands[pos - 1]
        if r.received_at - sent_at <= timeout:
            txs[idx].responses.append(r)
        else:
            txs[idx].late.append(r)
    return Correlation(txs, unsolicited)


@dataclass(frozen=True)
class Expectation:
    """What a genuine answer looks like."""
    control_ip: str
    qname: str | None = None
    relaxed: bool = False


@dataclass(frozen=True)
class ClassifiedTarget:
    target: str
    cls: Component
    responder: str | None = None
    resolver_hint: str | None = None
    control_ok: bool = False
    rtt_ms: float | None = None


def _check_answers(resp: ResponseRecord, exp: Expectation) -> tuple[bool, str | None]:
    records = [a for a in resp.answers
               if exp.qname is None or names_equal(a.name, exp.qname)]
    has_control = any(a.address == exp.control_ip for a in records)
    dynamic = next((a.address for a in records if a.address != exp.control_ip), None)
    if exp.relaxed:
        return bool(records), dynamic
    return has_control and dynamic is not None, dynamic


def classify(tx: Transaction, exp: Expectation) -> ClassifiedTarget:
    probe = tx.probe
    resp = tx.first
    if resp is None:
        return ClassifiedTarget(probe.target, Component.NO_RESPONSE)
    ok, hint = _check_answers(resp, exp)
    rtt = round((resp.received_at - probe.sent_at) * 1000, 3)
    if not ok:
        cls = Component.MANIPULATED
    elif resp.responder != probe.target:
        cls = Component.TRANSPARENT_FORWARDER
    elif hint == resp.responder:
        cls = Component.RECURSIVE_RESOLVER
    else:
        cls = Component.RECURSIVE_FORWARDER
    return ClassifiedTarget(probe.target, cls, resp.responder, hint, ok, rtt)


def classify_log(log: ScanLog, exp: Expectation,
                 timeout: float = DEFAULT_TIMEOUT) -> list[ClassifiedTarget]:
    return [classify(tx, exp) for tx in correlate(log, timeout)]


def is_private_hint(c: ClassifiedTarget) -> bool:
    return c.resolver_hint is not None and not ipaddress.IPv4Address(c.resolver_hint).is_global


# detection models used to compare scanning strategies

def transactional_detections(classified: Iterable[ClassifiedTarget]) -> set[str]:
    """Addresses a transactional scanner reports: the probed ODNS targets."""
    return {c.target for c in classified if c.cls in ODNS}


def stateless_detections(log: ScanLog, exp: Expectation,
                         drop_unprobed: bool = False) -> set[str]:
    """Addresses a responder-only scanner reports.

    Every valid answer counts toward its source address, several answers
    from one source collapsing into one entry.  With ``drop_unprobed`` the
    scanner additionally discards answers from addresses it never probed.
    """
    probed = {p.target for p in log.probes}
    out = set()
    for r in log.responses:
        ok, _ = _check_answers(r, exp)
        if ok and (not drop_unprobed or r.responder in probed):
            out.add(r.responder)
    return out


# output

COLUMNS = ("target", "class", "responder", "resolver_hint", "control_ok", "rtt_ms")


def to_row(c: ClassifiedTarget) -> dict:
    return {"target": c.target, "class": c.cls.value, "responder": c.responder,
            "resolver_hint": c.resolver_hint, "control_ok": c.control_ok,
            "rtt_ms": c.rtt_ms}


def from_row(row: dict) -> ClassifiedTarget:
    def opt(v):
        return None if v in (None, "") else v

    ok = row["control_ok"]
    if isinstance(ok, str):
        ok = ok.strip().lower() in ("true", "1", "yes")
    rtt = opt(row.get("rtt_ms"))
    return ClassifiedTarget(row["target"], Component(row["class"]), opt(row["responder"]),
                            opt(row["resolver_hint"]), bool(ok),
                            None if rtt is None else float(rtt))


def to_csv(classified: Iterable[ClassifiedTarget]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for c in classified:
        w.writerow({k: ("" if v is None else v) for k, v in to_row(c).items()})
    return buf.getvalue()


def to_jsonl(classified: Iterable[ClassifiedTarget]) -> str:
    return "".join(json.dumps(to_row(c), sort_keys=True) + "\n" for c in classified)


def load_classified(path) -> list[ClassifiedTarget]:
    path = str(path)
    with open(path, newline="") as fh:
        if path.endswith((".jsonl", ".json")):
            return [from_row(json.loads(line)) for line in fh if line.strip()]
        return [from_row(row) for row in csv.DictReader(fh)]
