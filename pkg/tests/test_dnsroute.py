import io
import ipaddress
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transfwd.dnsroute import (
    GAP_LIMIT, MAX_TTL, NO_DNS, NOT_TRANSPARENT, REACHED, RESOLVER_OFF_PATH, HopKind, HopRecord,
    TracePath, annotate_asns, dump_paths, forwarder_to_resolver, infer_relationships,
    load_paths, path_stats, sanitize, trace, trace_many, traceroute,
)
from transfwd.netsim import Network, Node, Role

from topogen import QNAME, chain_topology


def run_trace(topo, target="192.0.2.7", **kw):
    net = Network(topo)
    return trace(net.endpoint("S"), target, QNAME, rng=random.Random(1), **kw)


def test_chain_example():
    p = run_trace(chain_topology(2, 1))
    assert p.addresses() == ["100.64.1.1", "100.64.1.2", "192.0.2.7", "100.64.2.1", "203.0.113.53"]
    assert [h.kind for h in p.hops][-1] == HopKind.DNS_ANSWER
    assert p.status == REACHED and p.complete and p.resolver == "203.0.113.53"
    assert (p.forwarder_ttl, p.resolver_ttl) == (3, 5)
    assert forwarder_to_resolver(p) == 2


def test_adjacent_resolver():
    p = run_trace(chain_topology(0, 0))
    assert p.addresses() == ["192.0.2.7", "203.0.113.53"]
    assert forwarder_to_resolver(p) == 1


def test_resolver_target_is_not_transparent():
    p = run_trace(chain_topology(1, 1), target="203.0.113.53")
    assert p.status == NOT_TRANSPARENT and p.resolver is None and not p.complete


def test_non_dns_target():
    topo = chain_topology(1, 0)
    topo.nodes.append(Node("X", ["192.0.2.50"], Role.STUB))
    topo.links.append(type(topo.links[0])("r1", "X"))
    topo.__post_init__()
    p = run_trace(topo, target="192.0.2.50")
    assert p.status == NO_DNS and p.hops[-1].kind == HopKind.UNREACHABLE


def test_gap_limit():
    p = run_trace(chain_topology(4, 0, silent={"r1", "r2", "r3"}), gap_limit=3)
    assert p.status == GAP_LIMIT and len(p.hops) == 3
    assert all(h.kind == HopKind.SILENT for h in p.hops)


def test_silent_hop_before_answer_is_flagged():
    p = run_trace(chain_topology(1, 2, silent={"s2"}))
    assert p.status == REACHED and RESOLVER_OFF_PATH in p.flags
    assert not p.complete  # silent hop inside
    assert p.hops[-2].kind == HopKind.SILENT


def test_max_ttl():
    p = run_trace(chain_topology(5, 0), max_ttl=3)
    assert p.status == MAX_TTL and len(p.hops) == 3


def test_timing_mode_matches_quote_mode():
    topo = chain_topology(2, 2)
    a = run_trace(topo)
    b = run_trace(topo, match="timing")
    assert a.signature() == b.signature()
    with pytest.raises(ValueError):
        run_trace(topo, match="psychic")


def test_lockstep_over_many_targets():
    topo = chain_topology(2, 1)
    net = Network(topo)
    paths = trace_many(net.endpoint("S"), ["192.0.2.7", "203.0.113.53", "192.0.2.7"], QNAME,
                       rng=random.Random(2))
    assert [p.target for p in paths] == ["192.0.2.7", "203.0.113.53"]
    assert paths[0].status == REACHED and paths[1].status == NOT_TRANSPARENT


@pytest.mark.parametrize("pre,post", [(0, 0), (1, 3), (3, 1), (4, 4)])
def test_prefix_consistent_with_traceroute(pre, post):
    topo = chain_topology(pre, post)
    dns = run_trace(topo)
    classic = traceroute(Network(topo).endpoint("S"), "192.0.2.7", rng=random.Random(1))
    assert classic.status == REACHED
    assert classic.addresses() == dns.addresses()[:pre + 1]


def test_sanitize_keeps_stable_complete_paths():
    a = run_trace(chain_topology(2, 1))
    b = run_trace(chain_topology(2, 1))
    churned = run_trace(chain_topology(3, 0))  # same target, route changed
    broken = run_trace(chain_topology(1, 2, silent={"s1"}))
    assert sanitize([a, b]) == [a]
    assert sanitize([a, churned]) == []
    assert sanitize([broken, broken]) == []
    assert sanitize([a]) == []
    assert sanitize([a], repeats=1) == [a]


def test_path_stats_mean():
    paths = [run_trace(chain_topology(1, n, resolver="8.8.8.8")) for n in (1, 1, 3)]
    paths.append(run_trace(chain_topology(1, 0, resolver="1.1.1.1")))
    stats = path_stats(paths, {"Google": ["8.8.8.0/24"], "Cloudflare": ["1.1.1.0/24"],
                               "Quad9": ["9.9.9.0/24"]})
    assert stats["Google"].lengths == (2, 2, 4)
    assert stats["Google"].mean == pytest.approx(8 / 3, abs=1e-9)
    assert stats["Cloudflare"].mean == 1
    assert stats["Quad9"] is None


def asn_lookup(topo):
    table = {ipaddress.ip_network(k).network_address.exploded: v for k, v in topo.asn_map.items()}
    return table.get


def test_infer_relationship_same_in_and_out():
    asns = {"r1": 100, "F": 200, "s1": 200, "s2": 100, "R": 15169}
    topo = chain_topology(1, 2, resolver="8.8.8.8", asns=asns)
    p = run_trace(topo)
    assert infer_relationships([p], asn_lookup(topo)) == [(100, 200)]
    ann = annotate_asns(p, asn_lookup(topo))
    assert ann.asns == [100, 200, 200, 100, 15169]


def test_infer_no_edge_when_exit_differs():
    asns = {"r1": 100, "F": 200, "s1": 300, "R": 15169}
    topo = chain_topology(1, 1, resolver="8.8.8.8", asns=asns)
    assert infer_relationships([run_trace(topo)], asn_lookup(topo)) == []


def test_infer_resolver_hop_counts_as_exit():
    asns = {"r1": 15169, "F": 200, "R": 15169}
    topo = chain_topology(1, 0, resolver="8.8.8.8", asns=asns)
    assert infer_relationships([run_trace(topo)], asn_lookup(topo)) == [(15169, 200)]


def test_infer_skips_unmapped_and_silent():
    topo = chain_topology(1, 1, resolver="8.8.8.8", asns={"F": 200, "s1": 100, "R": 15169})
    assert infer_relationships([run_trace(topo)], asn_lookup(topo)) == []
    topo = chain_topology(1, 1, resolver="8.8.8.8", silent={"r1"},
                          asns={"r1": 100, "F": 200, "s1": 100, "R": 15169})
    assert infer_relationships([run_trace(topo)], asn_lookup(topo)) == []


def test_jsonl_roundtrip():
    paths = [run_trace(chain_topology(2, 1)), run_trace(chain_topology(1, 2, silent={"s2"}))]
    buf = io.StringIO()
    dump_paths(paths, buf)
    assert '"complete": true' in buf.getvalue().splitlines()[0]
    loaded = [TracePath.from_json(json.loads(x)) for x in buf.getvalue().splitlines()]
    assert loaded == paths


def test_load_paths_file(tmp_path):
    paths = [run_trace(chain_topology(1, 1))]
    path = tmp_path / "p.jsonl"
    with open(path, "w") as fh:
        dump_paths(paths, fh)
    assert load_paths(path) == paths


def test_hop_record_validation():
    with pytest.raises(ValueError):
        HopRecord(0, "1.2.3.4", HopKind.TTL_EXCEEDED)
    with pytest.raises(ValueError):
        HopRecord(1, None, HopKind.TTL_EXCEEDED)
    HopRecord(1, None, HopKind.SILENT)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 8), st.integers(0, 8))
def test_length_matches_topology(pre, post):
    p = run_trace(chain_topology(pre, post))
    assert p.complete
    assert (p.forwarder_ttl, forwarder_to_resolver(p)) == (pre + 1, post + 1)
    ttls = [h.ttl for h in p.hops]
    assert ttls == list(range(1, len(ttls) + 1))
