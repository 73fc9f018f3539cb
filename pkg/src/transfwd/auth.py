"""Authoritative server that mirrors the immediate client's address.

Every A query inside the configured zone is answered with two records: a
dynamic one carrying the address the query came from (i.e. the egress of
whatever recursive resolver asked), and a static control record used to
spot manipulated responses.
"""

from __future__ import annotations

import ipaddress
import logging
import socket
import threading
import time
from dataclasses import dataclass

from .wire import (
    TYPE_A, CLASS_IN, ARecord, DnsMessage, Rcode, WireError, decode, encode,
    in_zone, make_response,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ZoneConfig:
    zone: str
    control_ip: str
    ttl: int = 60
    bind_addr: str = "0.0.0.0"
    port: int = 53

    def __post_init__(self):
        ipaddress.IPv4Address(self.control_ip)


def handle_query(client: str, msg: DnsMessage, cfg: ZoneConfig) -> DnsMessage | None:
    if msg.qr:
        return None
    if msg.qclass != CLASS_IN or not in_zone(msg.qname, cfg.zone):
        return make_response(msg, rcode=Rcode.REFUSED)
    if msg.qtype != TYPE_A:
        return make_response(msg, aa=True)
    answers = (ARecord(msg.qname, cfg.ttl, client),
               ARecord(msg.qname, cfg.ttl, cfg.control_ip))
    return make_response(msg, answers, aa=True)


def handle_datagram(client: str, raw: bytes, cfg: ZoneConfig) -> bytes | None:
    try:
        msg = decode(raw)
    except WireError:
        return None
    resp = handle_query(client, msg, cfg)
    return encode(resp) if resp is not None else None


class AuthServer:
    """UDP listener; ``workers`` threads share a single socket."""

    def __init__(self, cfg: ZoneConfig, workers: int = 1):
        self.cfg = cfg
        self.workers = workers
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((cfg.bind_addr, cfg.port))
        self.sock.settimeout(0.2)
        self.answered = 0
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    def _loop(self):
        while not self._stop.is_set():
            try:
                raw, (host, port) = self.sock.recvfrom(4096)
            except socket.timeout:
                continue
            except OSError:
                if self._stop.is_set():
                    break
                raise
            out = handle_datagram(host, raw, self.cfg)
            if out is None:
                continue
            self.sock.sendto(out, (host, port))
            with self._lock:
                self.answered += 1

    def start(self):
        for i in range(self.workers):
            t = threading.Thread(target=self._loop, name=f"auth-{i}", daemon=True)
            t.start()
            self._threads.append(t)
        log.info("serving %s on %s:%d", self.cfg.zone, *self.address)
        return self

    def serve(self, duration: float | None = None):
        self.start()
        try:
            if duration is None:
                while True:
                    time.sleep(3600)
            time.sleep(duration)
        finally:
            self.stop()

    def stop(self):
        self._stop.set()
        for t in self._threads:
            t.join()
        self.sock.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def benchmark(cfg: ZoneConfig, n: int = 50_000) -> float:
    """Responses per second through decode, handle and encode, in-process."""
    from .wire import make_query

    queries = [encode(make_query(cfg.zone, i & 0xFFFF)) for i in range(1024)]
    clients = [f"198.51.100.{i % 250 + 1}" for i in range(1024)]
    t0 = time.perf_counter()
    for i in range(n):
        handle_datagram(clients[i & 1023], queries[i & 1023], cfg)
    return n / (time.perf_counter() - t0)
