"""Minimal DNS-over-UDP wire codec.

Only the part of RFC 1035 that the measurement needs is modelled: the
header, a single question and A records in the answer section.  Other
record types in the answer section are skipped on decode, authority and
additional sections are ignored.  Name compression is understood when
decoding but never emitted.
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass, field
from enum import IntEnum

HEADER = struct.Struct("!HHHHHH")
RR_FIXED = struct.Struct("!HHIH")
QUESTION_FIXED = struct.Struct("!HH")

TYPE_A = 1
TYPE_AAAA = 28
CLASS_IN = 1

MAX_LABEL = 63
MAX_NAME = 255
MAX_POINTER_JUMPS = 64


class Rcode(IntEnum):
    NOERROR = 0
    FORMERR = 1
    SERVFAIL = 2
    NXDOMAIN = 3
    NOTIMP = 4
    REFUSED = 5


class WireError(ValueError):
    """Raised for messages that cannot be encoded or parsed."""


def normalize_name(name: str) -> str:
    return name[:-1] if name.endswith(".") else name


def names_equal(a: str, b: str) -> bool:
    return normalize_name(a).lower() == normalize_name(b).lower()


def in_zone(name: str, zone: str) -> bool:
    name = normalize_name(name).lower()
    zone = normalize_name(zone).lower()
    if not zone:
        return True
    return name == zone or name.endswith("." + zone)


@dataclass(frozen=True)
class ARecord:
    name: str
    ttl: int
    address: str

    def __post_init__(self):
        # raises ValueError (AddressValueError) on garbage
        ipaddress.IPv4Address(self.address)
        if not 0 <= self.ttl <= 0xFFFFFFFF:
            raise ValueError(f"ttl out of range: {self.ttl}")


@dataclass(frozen=True)
class DnsMessage:
    id: int
    qname: str
    qtype: int = TYPE_A
    qclass: int = CLASS_IN
    qr: bool = False
    aa: bool = False
    rd: bool = True
    ra: bool = False
    rcode: int = Rcode.NOERROR
    answers: tuple[ARecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not 0 <= self.id <= 0xFFFF:
            raise ValueError(f"id out of range: {self.id}")
        if not 0 <= self.rcode <= 15:
            raise ValueError(f"rcode out of range: {self.rcode}")
        object.__setattr__(self, "qname", normalize_name(self.qname))
        object.__setattr__(self, "answers", tuple(self.answers))
        if self.answers and not self.qr:
            raise ValueError("answers are only allowed in responses")

    @property
    def is_response(self) -> bool:
        return self.qr


def make_query(qname: str, txid: int, qtype: int = TYPE_A, rd: bool = True) -> DnsMessage:
    return DnsMessage(id=txid, qname=qname, qtype=qtype, rd=rd)


def make_response(query: DnsMessage, answers=(), rcode: int = Rcode.NOERROR,
                  aa: bool = False, ra: bool = False) -> DnsMessage:
    """Build a response that echoes the id and question of ``query``."""
    return DnsMessage(id=query.id, qname=query.qname, qtype=query.qtype,
                      qclass=query.qclass, qr=True, aa=aa, rd=query.rd, ra=ra,
                      rcode=rcode, answers=tuple(answers))


def _encode_name(name: str) -> bytes:
    name = normalize_name(name)
    out = bytearray()
    if name:
        for label in name.split("."):
            raw = label.encode("latin-1")
            if not raw:
                raise WireError(f"empty label in {name!r}")
            if len(raw) > MAX_LABEL:
                raise WireError(f"label longer than {MAX_LABEL} bytes in {name!r}")
            out.append(len(raw))
            out += raw
    out.append(0)
    if len(out) > MAX_NAME:
        raise WireError(f"name longer than {MAX_NAME} bytes: {len(out)}")
    return bytes(out)


def encode(msg: DnsMessage) -> bytes:
    flags = (
        (msg.qr << 15)
        | (msg.aa << 10)
        | (msg.rd << 8)
        | (msg.ra << 7)
        | (int(msg.rcode) & 0xF)
    )
    try:
        qname = _encode_name(msg.qname)
    except UnicodeEncodeError as exc:
        raise WireError(f"non-latin-1 name {msg.qname!r}") from exc
    parts = [HEADER.pack(msg.id, flags, 1, len(msg.answers), 0, 0), qname,
             QUESTION_FIXED.pack(msg.qtype, msg.qclass)]
    for rr in msg.answers:
        parts.append(_encode_name(rr.name))
        parts.append(RR_FIXED.pack(TYPE_A, CLASS_IN, rr.ttl, 4))
        parts.append(ipaddress.IPv4Address(rr.address).packed)
    return b"".join(parts)


def _decode_name(raw: bytes, offset: int) -> tuple[str, int]:
    """Return (name, offset just past the name in the original stream)."""
    labels = []
    total = 1
    jumps = 0
    end = None
    pos = offset
    while True:
        if pos >= len(raw):
            raise WireError("name runs past end of message")
        length = raw[pos]
        if length & 0xC0 == 0xC0:
            if pos + 1 >= len(raw):
                raise WireError("truncated compression pointer")
            jumps += 1
            if jumps > MAX_POINTER_JUMPS:
                raise WireError("compression pointer loop")
            if end is None:
                end = pos + 2
            pos = ((length & 0x3F) << 8) | raw[pos + 1]
            continue
        if length & 0xC0:
            raise WireError(f"unsupported label type 0x{length:02x}")
        pos += 1
        if length == 0:
            break
        if pos + length > len(raw):
            raise WireError("label runs past end of message")
        label = raw[pos:pos + length].decode("latin-1")
        if "." in label:
            raise WireError("label contains a dot")
        total += length + 1
        if total > MAX_NAME:
            raise WireError("name too long")
        labels.append(label)
        pos += length
    return ".".join(labels), (end if end is not None else pos)


def decode(raw: bytes) -> DnsMessage:
    """Parse a UDP payload, raising WireError for anything malformed."""
    if len(raw) < HEADER.size:
        raise WireError(f"message shorter than header: {len(raw)} bytes")
    txid, flags, qdcount, ancount, _nscount, _arcount = HEADER.unpack_from(raw)
    if qdcount != 1:
        raise WireError(f"expected exactly one question, got {qdcount}")
    qr = bool(flags & 0x8000)
    if ancount and not qr:
        raise WireError("answer records in a query")
    qname, pos = _decode_name(raw, HEADER.size)
    if pos + QUESTION_FIXED.size > len(raw):
        raise WireError("truncated question")
    qtype, qclass = QUESTION_FIXED.unpack_from(raw, pos)
    pos += QUESTION_FIXED.size

    answers = []
    for _ in range(ancount):
        name, pos = _decode_name(raw, pos)
        if pos + RR_FIXED.size > len(raw):
            raise WireError("truncated resource record")
        rtype, rclass, ttl, rdlength = RR_FIXED.unpack_from(raw, pos)
        pos += RR_FIXED.size
        if pos + rdlength > len(raw):
            raise WireError("truncated rdata")
        if rtype == TYPE_A and rclass == CLASS_IN:
            if rdlength != 4:
                raise WireError(f"A record with rdlength {rdlength}")
            answers.append(ARecord(name, ttl, str(ipaddress.IPv4Address(raw[pos:pos + 4]))))
        pos += rdlength

    return DnsMessage(
        id=txid, qname=qname, qtype=qtype, qclass=qclass, qr=qr,
        aa=bool(flags & 0x0400), rd=bool(flags & 0x0100), ra=bool(flags & 0x0080),
        rcode=flags & 0xF, answers=tuple(answers),
    )


def try_decode(raw: bytes) -> DnsMessage | None:
    try:
        return decode(raw)
    except WireError:
        return None
