"""IPv4 datagram model plus helpers to craft and parse raw UDP/ICMP packets.

The simulator passes :class:`Packet` objects around directly; the live
raw-socket backend serialises them with :func:`to_bytes`.  ICMP errors carry
the quoted original datagram as real bytes in both modes, so matching
code never needs to know which mode it runs in.
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass, replace

UDP = 17
ICMP = 1

ICMP_ECHO_REPLY = 0
ICMP_UNREACH = 3
ICMP_TIME_EXCEEDED = 11
UNREACH_PORT = 3

DEFAULT_TTL = 64
# RFC 1812 allows quoting more than the 8 bytes RFC 792 asks for; 28 covers
# the UDP header plus the first 20 bytes of DNS payload
DEFAULT_QUOTE = 28

IP_HEADER = struct.Struct("!BBHHHBBH4s4s")
UDP_HEADER = struct.Struct("!HHHH")
ICMP_HEADER = struct.Struct("!BBHI")


@dataclass(frozen=True)
class Packet:
    src: str
    dst: str
    proto: int = UDP
    sport: int = 0
    dport: int = 0
    ttl: int = DEFAULT_TTL
    payload: bytes = b""
    icmp_type: int = 0
    icmp_code: int = 0
    ident: int = 0

    @property
    def is_udp(self) -> bool:
        return self.proto == UDP

    @property
    def is_icmp(self) -> bool:
        return self.proto == ICMP

    def with_ttl(self, ttl: int) -> "Packet":
        return replace(self, ttl=ttl)

    def summary(self) -> dict:
        d = {"src": self.src, "dst": self.dst, "ttl": self.ttl}
        if self.proto == UDP:
            d.update(proto="udp", sport=self.sport, dport=self.dport)
            if len(self.payload) >= 2:
                d["txid"] = int.from_bytes(self.payload[:2], "big")
        else:
            d.update(proto="icmp", type=self.icmp_type, code=self.icmp_code)
        return d


def udp(src: str, dst: str, sport: int, dport: int, payload: bytes,
        ttl: int = DEFAULT_TTL) -> Packet:
    return Packet(src=src, dst=dst, proto=UDP, sport=sport, dport=dport,
                  ttl=ttl, payload=payload)


def checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\0"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _ip_header(pkt: Packet, body_len: int) -> bytes:
    src = ipaddress.IPv4Address(pkt.src).packed
    dst = ipaddress.IPv4Address(pkt.dst).packed
    hdr = IP_HEADER.pack(0x45, 0, 20 + body_len, pkt.ident, 0, pkt.ttl,
                         pkt.proto, 0, src, dst)
    return hdr[:10] + struct.pack("!H", checksum(hdr)) + hdr[12:]


def _udp_segment(pkt: Packet) -> bytes:
    length = UDP_HEADER.size + len(pkt.payload)
    pseudo = (ipaddress.IPv4Address(pkt.src).packed + ipaddress.IPv4Address(pkt.dst).packed
              + struct.pack("!BBH", 0, UDP, length))
    seg = UDP_HEADER.pack(pkt.sport, pkt.dport, length, 0) + pkt.payload
    csum = checksum(pseudo + seg) or 0xFFFF
    return seg[:6] + struct.pack("!H", csum) + seg[8:]


def _icmp_message(pkt: Packet) -> bytes:
    msg = ICMP_HEADER.pack(pkt.icmp_type, pkt.icmp_code, 0, 0) + pkt.payload
    return msg[:2] + struct.pack("!H", checksum(msg)) + msg[4:]


def to_bytes(pkt: Packet) -> bytes:
    """Serialise to a full IPv4 datagram (header included, checksums set)."""
    body = _udp_segment(pkt) if pkt.proto == UDP else _icmp_message(pkt)
    return _ip_header(pkt, len(body)) + body


def from_bytes(raw: bytes) -> Packet:
    """Parse an IPv4 datagram carrying UDP or ICMP.  Raises ValueError."""
    if len(raw) < 20:
        raise ValueError("short IPv4 header")
    vihl, _tos, total, ident, _frag, ttl, proto, _csum, src, dst = IP_HEADER.unpack_from(raw)
    if vihl >> 4 != 4:
        raise ValueError("not IPv4")
    ihl = (vihl & 0xF) * 4
    end = min(total, len(raw)) if total >= ihl else len(raw)
    body = raw[ihl:end]
    src_s = str(ipaddress.IPv4Address(src))
    dst_s = str(ipaddress.IPv4Address(dst))
    if proto == UDP:
        if len(body) < 8:
            raise ValueError("short UDP header")
        sport, dport, _length, _ = UDP_HEADER.unpack_from(body)
        return Packet(src_s, dst_s, UDP, sport, dport, ttl, bytes(body[8:]), ident=ident)
    if proto == ICMP:
        if len(body) < 8:
            raise ValueError("short ICMP header")
        itype, icode, _c, _rest = ICMP_HEADER.unpack_from(body)
        return Packet(src_s, dst_s, ICMP, ttl=ttl, payload=bytes(body[8:]),
                      icmp_type=itype, icmp_code=icode, ident=ident)
    raise ValueError(f"unsupported protocol {proto}")


def icmp_error(original: Packet, src: str, icmp_type: int, code: int = 0,
               quote_len: int = DEFAULT_QUOTE) -> Packet:
    """ICMP error from ``src`` back to the sender of ``original``.

    The payload quotes the original IP header and ``quote_len`` bytes of its
    transport segment, with the TTL as it arrived at the reporting node.
    """
    datagram = to_bytes(original)
    quote = datagram[:20 + quote_len]
    return Packet(src=src, dst=original.src, proto=ICMP, payload=quote,
                  icmp_type=icmp_type, icmp_code=code)


@dataclass(frozen=True)
class Quote:
    src: str
    dst: str
    sport: int
    dport: int
    txid: int | None


def parse_quote(payload: bytes) -> Quote | None:
    """Extract the UDP flow (and DNS id, if quoted) from an ICMP error body."""
    if len(payload) < 20:
        return None
    vihl = payload[0]
    ihl = (vihl & 0xF) * 4
    if vihl >> 4 != 4 or ihl < 20 or payload[9] != UDP or len(payload) < ihl + 4:
        return None
    src = str(ipaddress.IPv4Address(payload[12:16]))
    dst = str(ipaddress.IPv4Address(payload[16:20]))
    sport, dport = struct.unpack_from("!HH", payload, ihl)
    txid = None
    if len(payload) >= ihl + 10:
        txid = struct.unpack_from("!H", payload, ihl + 8)[0]
    return Quote(src, dst, sport, dport, txid)
