import ipaddress
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transfwd.netsim import Network
from transfwd.netsim.scenario import probe_sensor, sensor_lab
from transfwd.packet import udp
from transfwd.roles import TransparentForwarderRole
from transfwd.sensors import PrefixRateLimiter, SensorConfig, SensorKind, build_sensor
from transfwd.wire import Rcode, decode, encode, make_query

QNAME = "odns.example.net"


def test_limiter_one_per_prefix_per_window():
    lim = PrefixRateLimiter(300)
    assert lim("198.51.100.10", 0.0)
    assert not lim("198.51.100.99", 10.0)  # same /24
    assert lim("198.51.101.10", 10.0)
    assert not lim("198.51.100.10", 299.9)
    assert lim("198.51.100.10", 300.0)


def test_limiter_rejects_bad_config():
    with pytest.raises(ValueError):
        PrefixRateLimiter(0)
    with pytest.raises(ValueError):
        PrefixRateLimiter(10, per_window=0)


SOURCES = st.integers(0, 7).map(lambda i: f"198.51.{100 + i // 2}.{1 + i}")


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(SOURCES, st.floats(0, 5000, allow_nan=False)), max_size=60),
       st.sampled_from([1.0, 60.0, 300.0]))
def test_admitted_per_prefix_bounded_by_windows(events, window):
    events = sorted(events, key=lambda e: e[1])
    lim = PrefixRateLimiter(window)
    admitted: dict = {}
    touched: dict = {}
    for src, t in events:
        p = ipaddress.ip_network(f"{src}/24", strict=False)
        touched.setdefault(p, set()).add(math.floor(t / window))
        if lim(src, t):
            admitted[p] = admitted.get(p, 0) + 1
    for p, n in admitted.items():
        assert n <= len(touched[p])
    # the first request from each prefix always gets through
    assert set(admitted) == set(touched)


def test_config_validation():
    SensorConfig(2, "192.0.2.12", "8.8.8.8", "192.0.2.13")
    with pytest.raises(ValueError, match="same /24"):
        SensorConfig(2, "192.0.2.12", "8.8.8.8", "192.0.3.13")
    with pytest.raises(ValueError, match="distinct"):
        SensorConfig(2, "192.0.2.12", "8.8.8.8")
    with pytest.raises(ValueError):
        SensorConfig(1, "192.0.2.12", "8.8.8.8", "192.0.2.13")
    with pytest.raises(ValueError):
        SensorConfig(4, "192.0.2.12", "8.8.8.8")
    assert SensorConfig(3, "192.0.2.14", "8.8.8.8").kind == SensorKind.EXTERIOR_TRANSPARENT


def scan_once(kind, recv, send=None):
    topo = sensor_lab(kind, recv, send, "8.8.8.8")
    return probe_sensor(topo, "scanner", 1, 1.0, QNAME)


def test_kind1_answers_from_itself():
    assert [src for _, src in scan_once(1, "192.0.2.11")] == ["192.0.2.11"]


def test_kind2_answers_from_send_address():
    assert [src for _, src in scan_once(2, "192.0.2.12", "192.0.2.13")] == ["192.0.2.13"]


def test_kind3_answer_comes_from_upstream():
    assert [src for _, src in scan_once(3, "192.0.2.14")] == ["8.8.8.8"]


def test_kind3_keeps_no_state():
    topo = sensor_lab(3, "192.0.2.14", None, "8.8.8.8", rate_window=1.0)
    net = Network(topo)
    io = net.endpoint("scanner")
    for i in range(5):
        net.run_until(i * 2000)
        io.send(udp(io.address, "192.0.2.14", 40000 + i, 53, encode(make_query(QNAME, i))))
    net.run()
    handler = net.handlers["sensor"]
    assert isinstance(handler, TransparentForwarderRole)
    assert not any(isinstance(v, (dict, list, set)) and v for v in vars(handler).values())
    assert len(io.recv(net.now_ms / 1000 + 1)) == 5


def test_kind3_behind_sav_notes_spoof_block():
    topo = sensor_lab(3, "192.0.2.14", None, "8.8.8.8")
    topo.link("sensor", "core").sav = True
    net = Network(topo)
    io = net.endpoint("scanner")
    io.send(udp(io.address, "192.0.2.14", 40000, 53, encode(make_query(QNAME, 1))))
    net.run()
    assert any(e["ev"] == "spoof-blocked" for e in net.trace)
    assert net.outcomes["dropped_sav"] == 1
    assert io.recv(net.now_ms / 1000 + 5) == []


def test_upstream_loss_gives_servfail():
    topo = sensor_lab(1, "192.0.2.11", None, "8.8.8.8")
    net = Network(topo)
    net.lose("sensor", "core")
    io = net.endpoint("scanner")
    io.send(udp(io.address, "192.0.2.11", 40000, 53, encode(make_query(QNAME, 9))))
    got = io.recv(10.0)
    assert len(got) == 1
    msg = decode(got[0].payload)
    assert msg.rcode == Rcode.SERVFAIL and msg.id == 9
    assert 3.0 <= io.now() < 3.1
    assert any(e["ev"] == "upstream-timeout" for e in net.trace)


def test_fresh_upstream_key_per_request():
    topo = sensor_lab(1, "192.0.2.11", None, "8.8.8.8", rate_window=1.0)
    net = Network(topo)
    io = net.endpoint("scanner")
    for i in range(3):
        net.run_until(i * 2000)
        io.send(udp(io.address, "192.0.2.11", 40000, 53, encode(make_query(QNAME, 1))))
    net.run()
    ups = {(e["sport"], e["txid"]) for e in net.trace
           if e["ev"] == "send" and e["node"] == "sensor" and e.get("dst") == "8.8.8.8"}
    assert len(ups) == 3


def test_build_sensor_roles():
    assert isinstance(build_sensor(SensorConfig(3, "192.0.2.14", "8.8.8.8")), TransparentForwarderRole)
    h = build_sensor(SensorConfig(2, "192.0.2.12", "8.8.8.8", "192.0.2.13"))
    assert h.reply_from == "192.0.2.13" and h.egress == "192.0.2.13"


@pytest.mark.parametrize("kind,recv,send,src", [
    (1, "192.0.2.11", None, "192.0.2.11"),
    (2, "192.0.2.12", "192.0.2.13", "192.0.2.13"),
    (3, "192.0.2.14", None, "8.8.8.8"),
])
def test_rate_limit_over_long_scan(kind, recv, send, src):
    topo = sensor_lab(kind, recv, send, "8.8.8.8")
    answers = probe_sensor(topo, "scanner", 1000, 1800.0, QNAME)
    assert {s for _, s in answers} == {src}
    assert len(answers) == 6  # six 300 s windows
