"""File-based address attribution: prefix to ASN, ASN to country, projects."""

from __future__ import annotations

import configparser
import csv
import ipaddress
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

UNKNOWN = "Unknown"


class PrefixTable:
    """Longest-prefix match over IPv4 prefixes, one dict per prefix length."""

    def __init__(self, entries: Iterable[tuple[str, int]] = ()):
        self._by_len: dict[int, dict[int, int]] = {}
        for prefix, asn in entries:
            self.add(prefix, asn)

    def add(self, prefix: str, asn: int) -> None:
        net = ipaddress.IPv4Network(prefix, strict=False)
        self._by_len.setdefault(net.prefixlen, {})[int(net.network_address)] = int(asn)
        self._lengths = sorted(self._by_len, reverse=True)

    def __len__(self) -> int:
        return sum(len(d) for d in self._by_len.values())

    def lookup(self, addr: str) -> int | None:
        a = int(ipaddress.IPv4Address(addr))
        for length in getattr(self, "_lengths", ()):
            mask = (0xFFFFFFFF << (32 - length)) & 0xFFFFFFFF
            asn = self._by_len[length].get(a & mask)
            if asn is not None:
                return asn
        return None

    def entries(self) -> list[tuple[str, int]]:
        out = []
        for length, d in self._by_len.items():
            for net, asn in d.items():
                out.append((f"{ipaddress.IPv4Address(net)}/{length}", asn))
        return sorted(out)

    @classmethod
    def parse(cls, lines: Iterable[str], source: str = "<input>") -> "PrefixTable":
        """``CIDR<TAB>ASN`` lines, or Routeviews pfx2as ``addr<TAB>len<TAB>asn``.

        Multi-origin (``a_b``) and AS-set (``a,b``) fields keep the first ASN.
        """
        table = cls()
        for n, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if len(parts) == 2:
                    prefix, asn = parts
                elif len(parts) == 3:
                    prefix, asn = f"{parts[0]}/{parts[1]}", parts[2]
                else:
                    raise ValueError("expected 2 or 3 fields")
                first = asn.strip("{}").replace(",", "_").split("_")[0]
                table.add(prefix, int(first))
            except ValueError as exc:
                raise ValueError(f"{source}:{n}: {exc}") from exc
        return table

    @classmethod
    def load(cls, path) -> "PrefixTable":
        with open(path) as fh:
            return cls.parse(fh, str(path))


def load_asn2country(path) -> dict[int, str]:
    """CSV with columns asn,country; a header row is optional."""
    out: dict[int, str] = {}
    with open(path, newline="") as fh:
        for n, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            if n == 1 and not row[0].strip().lstrip("AS").isdigit():
                continue
            try:
                out[int(row[0].strip().lstrip("AS"))] = row[1].strip().upper()
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{n}: bad row {row!r}") from exc
    return out


@dataclass
class Project:
    name: str
    prefixes: list[ipaddress.IPv4Network] = field(default_factory=list)
    asns: set[int] = field(default_factory=set)

    def covers(self, addr: str) -> bool:
        a = ipaddress.IPv4Address(addr)
        return any(a in net for net in self.prefixes)


def load_projects(path=None) -> dict[str, Project]:
    """INI file, one section per project with ``prefixes`` and optional ``asns``.

    Without a path the bundled snapshot is used.
    """
    cp = configparser.ConfigParser()
    if path is None:
        text = resources.files("transfwd").joinpath("data/projects.ini").read_text()
        cp.read_string(text, "projects.ini")
    else:
        with open(path) as fh:
            cp.read_file(fh)
    out = {}
    for name in cp.sections():
        sec = cp[name]
        prefixes = [ipaddress.IPv4Network(p.strip(), strict=False)
                    for p in sec.get("prefixes", "").replace("\n", ",").split(",") if p.strip()]
        asns = {int(a) for a in sec.get("asns", "").replace("\n", ",").split(",") if a.strip()}
        out[name] = Project(name, prefixes, asns)
    return out


@dataclass
class GeoMaps:
    prefix2asn: PrefixTable
    asn2country: dict[int, str]
    projects: dict[str, Project] = field(default_factory=dict)

    def asn(self, addr: str) -> int | None:
        return self.prefix2asn.lookup(addr)

    def country(self, addr: str) -> str:
        asn = self.asn(addr)
        return self.asn2country.get(asn, UNKNOWN) if asn is not None else UNKNOWN

    def project_of(self, addr: str) -> str | None:
        for name, p in self.projects.items():
            if p.covers(addr):
                return name
        return None

    def project_asns(self) -> dict[int, str]:
        """ASN to project, from the explicit list and the projects' own prefixes."""
        out = {}
        for name, p in self.projects.items():
            for net in p.prefixes:
                asn = self.prefix2asn.lookup(str(net.network_address))
                if asn is not None:
                    out.setdefault(asn, name)
            for asn in p.asns:
                out.setdefault(asn, name)
        return out

    @classmethod
    def load(cls, prefix2asn, asn2country, projects=None) -> "GeoMaps":
        for p in (prefix2asn, asn2country, projects):
            if p is not None and not Path(p).is_file():
                raise FileNotFoundError(f"no such file: {p}")
        return cls(PrefixTable.load(prefix2asn), load_asn2country(asn2country),
                   load_projects(projects))
