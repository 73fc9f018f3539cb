"""Loopback-only checks of the live backends; nothing leaves the host."""

import random

import pytest

from transfwd import packet as P
from transfwd.auth import AuthServer, ZoneConfig
from transfwd.classify import Component, Expectation, classify_log
from transfwd.scan import KeyAllocator, run_scan
from transfwd.transport import PrivilegeError, RawSocketIO, UdpSocketIO, require_raw_sockets
from transfwd.wire import decode, encode, make_query

QNAME = "odns.example.net"
CFG = ZoneConfig("example.net", "198.51.100.1", bind_addr="127.0.0.1", port=0)


def test_udp_scan_against_loopback_auth():
    with AuthServer(CFG) as srv:
        io = UdpSocketIO("127.0.0.1", [0])
        try:
            port = io.ports[0]
            alloc = KeyAllocator((port, port), hold=2.0, rng=random.Random(1))
            log = run_scan(io, ["127.0.0.1"], QNAME, timeout=1.0, allocator=alloc,
                           port=srv.address[1])
        finally:
            io.close()
    assert len(log.responses) == 1
    [c] = classify_log(log, Expectation("198.51.100.1", QNAME))
    # the loopback server mirrors 127.0.0.1, so the target looks like a resolver
    assert c.cls == Component.RECURSIVE_RESOLVER and c.rtt_ms is not None


def test_udp_backend_refuses_foreign_source():
    io = UdpSocketIO("127.0.0.1", [0])
    try:
        assert io.send(P.udp("192.0.2.1", "127.0.0.1", io.ports[0], 53, b"")) is False
        assert io.recv(io.now() + 0.05) == []
    finally:
        io.close()


def raw_available():
    try:
        require_raw_sockets()
    except (PrivilegeError, OSError):
        return False
    return True


@pytest.mark.skipif(not raw_available(), reason="raw sockets need CAP_NET_RAW")
def test_raw_backend_loopback():
    with AuthServer(CFG) as srv:
        io = RawSocketIO("127.0.0.1")
        try:
            io.send(P.udp("127.0.0.1", "127.0.0.1", 40123, srv.address[1],
                          encode(make_query(QNAME, 0x4242))))
            deadline = io.now() + 2.0
            answer = None
            while answer is None and io.now() < deadline:
                for pkt in io.recv(deadline):
                    if pkt.is_udp and pkt.sport == srv.address[1] and pkt.dport == 40123:
                        answer = pkt
        finally:
            io.close()
    assert answer is not None
    msg = decode(answer.payload)
    assert msg.id == 0x4242 and [a.address for a in msg.answers] == ["127.0.0.1", "198.51.100.1"]


def test_privilege_error_is_clear(monkeypatch):
    import socket

    def deny(*a, **k):
        raise PermissionError("nope")

    monkeypatch.setattr(socket, "socket", deny)
    with pytest.raises(PrivilegeError, match="CAP_NET_RAW"):
        require_raw_sockets()
