"""Packet I/O shared by the simulator and live sockets.

Scanner, DNSRoute++ and sensor code only talk to a :class:`PacketIO`; the
simulator endpoint (:class:`transfwd.netsim.SimIO`) and the two live
backends below all satisfy it.
"""

from __future__ import annotations

import logging
import os
import select
import socket
import time
from typing import Iterable, Protocol

from .packet import Packet, from_bytes, to_bytes

log = logging.getLogger(__name__)


class PacketIO(Protocol):
    address: str

    def now(self) -> float:
        """Monotonic clock in seconds."""

    def send(self, pkt: Packet) -> bool:
        """Hand a packet to the network.

        False means the packet was refused locally (e.g. a source address the
        backend cannot emit); OSError signals a broken socket.
        """

    def recv(self, until: float) -> list[Packet]:
        """Block until at least one packet arrived or ``until`` passed."""


class PrivilegeError(RuntimeError):
    pass


def require_raw_sockets() -> None:
    """Raise PrivilegeError unless raw IPv4 sockets can be opened."""
    try:
        s = socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_RAW)
    except PermissionError as exc:
        raise PrivilegeError(
            "live mode needs raw sockets (run as root or grant CAP_NET_RAW)"
        ) from exc
    s.close()


class RawSocketIO:
    """Live backend on raw sockets: arbitrary source address, port and TTL.

    Needs CAP_NET_RAW.  ``listen`` ports get a plain UDP socket bound as a
    placeholder so the kernel does not answer with port-unreachable.
    """

    def __init__(self, address: str, listen: Iterable[int] = ()):
        require_raw_sockets()
        self.address = address
        self._tx = socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_RAW)
        self._rx = [
            socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_UDP),
            socket.socket(socket.AF_INET, socket.SOCK_RAW, socket.IPPROTO_ICMP),
        ]
        for s in self._rx:
            s.setblocking(False)
        self._placeholders = []
        for port in listen:
            p = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            p.bind((address, port))
            self._placeholders.append(p)

    def now(self) -> float:
        return time.monotonic()

    def send(self, pkt: Packet) -> bool:
        try:
            self._tx.sendto(to_bytes(pkt), (pkt.dst, 0))
        except OSError as exc:
            log.warning("raw send %s -> %s failed: %s", pkt.src, pkt.dst, exc)
            raise
        return True

    def recv(self, until: float) -> list[Packet]:
        out: list[Packet] = []
        while not out:
            wait = until - self.now()
            if wait <= 0:
                break
            ready, _, _ = select.select(self._rx, [], [], wait)
            for s in ready:
                while True:
                    try:
                        raw = s.recv(65535)
                    except BlockingIOError:
                        break
                    try:
                        pkt = from_bytes(raw)
                    except ValueError:
                        continue
                    if self.address in ("0.0.0.0", pkt.dst):
                        out.append(pkt)
        return out

    def close(self) -> None:
        for s in [self._tx, *self._rx, *self._placeholders]:
            s.close()


class UdpSocketIO:
    """Unprivileged live backend: one UDP socket per client port.

    Cannot spoof and does not see ICMP, so it is only useful for scanning
    (and serving) from the host's own address.
    """

    def __init__(self, address: str, ports: Iterable[int]):
        self.address = address
        self._by_port: dict[int, socket.socket] = {}
        for port in ports:
            s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            s.bind((address, port))
            s.setblocking(False)
            self._by_port[s.getsockname()[1]] = s

    @property
    def ports(self) -> list[int]:
        return sorted(self._by_port)

    def now(self) -> float:
        return time.monotonic()

    def send(self, pkt: Packet) -> bool:
        if pkt.src != self.address and self.address != "0.0.0.0":
            return False
        s = self._by_port.get(pkt.sport)
        if s is None:
            return False
        try:
            s.setsockopt(socket.IPPROTO_IP, socket.IP_TTL, pkt.ttl)
            s.sendto(pkt.payload, (pkt.dst, pkt.dport))
        except OSError as exc:
            log.warning("udp send to %s:%d failed: %s", pkt.dst, pkt.dport, exc)
            raise
        return True

    def recv(self, until: float) -> list[Packet]:
        out: list[Packet] = []
        socks = list(self._by_port.values())
        while not out:
            wait = until - self.now()
            if wait <= 0:
                break
            ready, _, _ = select.select(socks, [], [], wait)
            for s in ready:
                port = s.getsockname()[1]
                while True:
                    try:
                        data, (peer, pport) = s.recvfrom(65535)
                    except (BlockingIOError, ConnectionRefusedError):
                        break
                    out.append(Packet(src=peer, dst=self.address, sport=pport,
                                      dport=port, ttl=0, payload=data))
        return out

    def close(self) -> None:
        for s in self._by_port.values():
            s.close()


def is_root() -> bool:
    return hasattr(os, "geteuid") and os.geteuid() == 0
