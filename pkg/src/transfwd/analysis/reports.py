"""Aggregate reports over classified scan output."""

from __future__ import annotations

import csv
import io
import ipaddress
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, fields
from typing import Iterable

from ..classify import ClassifiedTarget, Component
from .geo import GeoMaps

OTHER = "other"
SPARSE_MAX = 25
FULL_MIN = 254


def _forwarders(classified: Iterable[ClassifiedTarget]) -> list[ClassifiedTarget]:
    return [c for c in classified if c.cls == Component.TRANSPARENT_FORWARDER]


def _by_count(counts: dict) -> list:
    return sorted(counts, key=lambda k: (-counts[k], k))


# country CDF

@dataclass(frozen=True)
class CdfRow:
    rank: int
    country: str
    count: int
    cumulative: float


@dataclass
class CountryCdf:
    rows: list[CdfRow]
    zero: list[str]

    def share_at(self, rank: int) -> float:
        if not self.rows:
            return 0.0
        return self.rows[min(rank, len(self.rows)) - 1].cumulative


def country_cdf(classified: Iterable[ClassifiedTarget], maps: GeoMaps) -> CountryCdf:
    """Cumulative share of transparent forwarders over countries ranked by count.

    Countries that host other ODNS components but no transparent forwarder
    are listed in ``zero``.
    """
    classified = list(classified)
    tf = Counter(maps.country(c.target) for c in _forwarders(classified))
    seen = {maps.country(c.target) for c in classified}
    total = sum(tf.values())
    rows, run = [], 0
    for i, cc in enumerate(_by_count(tf), 1):
        run += tf[cc]
        rows.append(CdfRow(i, cc, tf[cc], run / total))
    return CountryCdf(rows, sorted(seen - set(tf)))


# resolver project shares

def resolver_shares(classified: Iterable[ClassifiedTarget],
                    maps: GeoMaps) -> dict[str, dict[str, float]]:
    """Per forwarder country, the share of forwarders answered from each
    project's prefixes, plus ``other``."""
    names = list(maps.projects) + [OTHER]
    counts: dict[str, Counter] = defaultdict(Counter)
    for c in _forwarders(classified):
        counts[maps.country(c.target)][maps.project_of(c.responder) or OTHER] += 1
    out = {}
    for cc in sorted(counts):
        total = sum(counts[cc].values())
        out[cc] = {n: counts[cc][n] / total for n in names}
    return out


# indirect consolidation

@dataclass(frozen=True)
class IndirectRow:
    country: str
    top_asn: int | None
    forwarders: int
    with_hint: int
    via_project: int

    @property
    def fraction(self) -> float | None:
        return self.via_project / self.with_hint if self.with_hint else None


def indirect_consolidation(classified: Iterable[ClassifiedTarget],
                           maps: GeoMaps) -> dict[str, IndirectRow]:
    """Among forwarders answered from outside every project, the fraction
    whose resolver address lies in a project's AS.

    Forwarders without a resolver address count in neither part of the
    fraction.  ``top_asn`` is the most common responder AS.
    """
    proj_asns = maps.project_asns()
    per: dict[str, list[ClassifiedTarget]] = defaultdict(list)
    for c in _forwarders(classified):
        if maps.project_of(c.responder) is None:
            per[maps.country(c.target)].append(c)
    out = {}
    for cc in sorted(per):
        rows = per[cc]
        asns = Counter(maps.asn(c.responder) for c in rows)
        asns.pop(None, None)
        top = min(asns, key=lambda a: (-asns[a], a)) if asns else None
        hinted = [c for c in rows if c.resolver_hint]
        via = sum(1 for c in hinted if maps.asn(c.resolver_hint) in proj_asns)
        out[cc] = IndirectRow(cc, top, len(rows), len(hinted), via)
    return out


def top_other(table: dict[str, IndirectRow], n: int = 10) -> list[IndirectRow]:
    return sorted(table.values(), key=lambda r: (-r.forwarders, r.country))[:n]


# country ranking against a reference

@dataclass(frozen=True)
class RankRow:
    country: str
    rank_ours: int | None
    count_ours: int | None
    rank_ref: int | None
    count_ref: int | None

    @property
    def delta_rank(self) -> int | None:
        if self.rank_ours is None or self.rank_ref is None:
            return None
        return self.rank_ref - self.rank_ours

    @property
    def delta_count(self) -> int | None:
        if self.count_ours is None or self.count_ref is None:
            return None
        return self.count_ours - self.count_ref


def _ranks(counts: dict[str, int]) -> dict[str, int]:
    return {cc: i for i, cc in enumerate(_by_count(counts), 1)}


def rank_countries(counts_ours: dict[str, int], counts_ref: dict[str, int]) -> list[RankRow]:
    """Every country with a count in either column, ordered by our rank.

    Ranks are 1-based by descending count, ties broken by country code.
    """
    ro, rr = _ranks(counts_ours), _ranks(counts_ref)
    rows = [RankRow(cc, ro.get(cc), counts_ours.get(cc), rr.get(cc), counts_ref.get(cc))
            for cc in set(counts_ours) | set(counts_ref)]
    big = float("inf")
    return sorted(rows, key=lambda r: (r.rank_ours or big, r.rank_ref or big, r.country))


@dataclass(frozen=True)
class RankCell:
    country: str
    rank_ours: str
    count_ours: str
    rank_ref: str
    count_ref: str
    delta_rank: str
    delta_count: str


def _signed(v: int) -> str:
    return f"+{v}" if v > 0 else str(v)


def format_ranking(rows: list[RankRow], top: int = 20) -> list[RankCell]:
    """Our top ``top`` rows as printable cells.

    A reference rank beyond ``top`` is shown as ``n/a`` and its rank delta
    as a lower bound, e.g. ``>1``.
    """
    out = []
    for r in [r for r in rows if r.rank_ours is not None][:top]:
        if r.rank_ref is None or r.rank_ref > top:
            ref_rank = "n/a"
            dr = f">{top - r.rank_ours}"
        else:
            ref_rank = str(r.rank_ref)
            dr = _signed(r.delta_rank)
        dc = "n/a" if r.delta_count is None else _signed(r.delta_count)
        out.append(RankCell(r.country, str(r.rank_ours), str(r.count_ours), ref_rank,
                            "" if r.count_ref is None else str(r.count_ref), dr, dc))
    return out


def load_counts(path) -> dict[str, int]:
    """CSV with columns country,count (header optional)."""
    out = {}
    with open(path, newline="") as fh:
        for n, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            if n == 1 and not row[1].strip().isdigit():
                continue
            out[row[0].strip()] = int(row[1])
    return out


def odns_counts(classified: Iterable[ClassifiedTarget], maps: GeoMaps) -> dict[str, int]:
    return dict(Counter(maps.country(c.target) for c in classified
                        if c.cls in (Component.TRANSPARENT_FORWARDER,
                                     Component.RECURSIVE_FORWARDER,
                                     Component.RECURSIVE_RESOLVER)))


# /24 population

@dataclass
class PrefixPopulation:
    per_prefix: dict[str, int]
    histogram: dict[int, int]
    sparse_share: float
    full_share: float

    @property
    def full_prefixes(self) -> int:
        return sum(1 for v in self.per_prefix.values() if v >= FULL_MIN)


def prefix_population(classified: Iterable[ClassifiedTarget]) -> PrefixPopulation:
    """Transparent forwarders per covering /24.

    ``sparse_share`` and ``full_share`` are fractions of forwarders (not of
    prefixes) sitting in prefixes with at most 25 and at least 254 of them.
    """
    per = Counter(str(ipaddress.IPv4Network(f"{c.target}/24", strict=False))
                  for c in _forwarders(classified))
    hist = Counter(per.values())
    total = sum(per.values())
    sparse = sum(v for v in per.values() if v <= SPARSE_MAX)
    full = sum(v for v in per.values() if v >= FULL_MIN)
    return PrefixPopulation(dict(sorted(per.items())), dict(sorted(hist.items())),
                            sparse / total if total else 0.0, full / total if total else 0.0)


# output

def _table(header: list[str], rows: Iterable[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else v for v in r])
    return buf.getvalue()


def cdf_csv(cdf: CountryCdf) -> str:
    rows = [[r.rank, r.country, r.count, f"{r.cumulative:.6f}"] for r in cdf.rows]
    rows += [["", cc, 0, ""] for cc in cdf.zero]
    return _table(["rank", "country", "transparent_forwarders", "cumulative_share"], rows)


def shares_csv(shares: dict[str, dict[str, float]]) -> str:
    names = list(next(iter(shares.values()))) if shares else [OTHER]
    return _table(["country"] + names,
                  [[cc] + [f"{v[n]:.6f}" for n in names] for cc, v in shares.items()])


def indirect_csv(table: dict[str, IndirectRow]) -> str:
    return _table(["country", "top_asn", "transparent_forwarders", "with_hint", "via_project",
                   "indirect_share"],
                  [[r.country, r.top_asn, r.forwarders, r.with_hint, r.via_project,
                    None if r.fraction is None else f"{r.fraction:.6f}"]
                   for r in top_other(table, len(table))])


def ranking_csv(cells: list[RankCell]) -> str:
    names = [f.name for f in fields(RankCell)]
    return _table(names, [[asdict(c)[n] for n in names] for c in cells])


def population_csv(pop: PrefixPopulation) -> str:
    return _table(["forwarders_in_prefix", "prefixes"], [[k, v] for k, v in pop.histogram.items()])


def long_format(cdf=None, shares=None, indirect=None, ranking=None, population=None) -> str:
    """All reports as (report, key, metric, value) rows for plotting."""
    rows = []
    if cdf is not None:
        for r in cdf.rows:
            rows.append(["country_cdf", r.country, "count", r.count])
            rows.append(["country_cdf", r.country, "cumulative_share", r.cumulative])
        for cc in cdf.zero:
            rows.append(["country_cdf", cc, "count", 0])
    if shares is not None:
        for cc, v in shares.items():
            for name, s in v.items():
                rows.append(["resolver_shares", cc, name, s])
    if indirect is not None:
        for r in indirect.values():
            rows.append(["indirect_consolidation", r.country, "forwarders", r.forwarders])
            if r.fraction is not None:
                rows.append(["indirect_consolidation", r.country, "share", r.fraction])
    if ranking is not None:
        for r in ranking:
            for metric in ("rank_ours", "count_ours", "rank_ref", "count_ref",
                           "delta_rank", "delta_count"):
                v = getattr(r, metric)
                if v is not None:
                    rows.append(["ranking", r.country, metric, v])
    if population is not None:
        for k, v in population.histogram.items():
            rows.append(["prefix_population", str(k), "prefixes", v])
        rows.append(["prefix_population", "all", "sparse_share", population.sparse_share])
        rows.append(["prefix_population", "all", "full_share", population.full_share])
    return _table(["report", "key", "metric", "value"], rows)
