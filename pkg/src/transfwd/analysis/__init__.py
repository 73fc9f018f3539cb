from .geo import UNKNOWN, GeoMaps, PrefixTable, Project, load_asn2country, load_projects
from .reports import (
    OTHER, CountryCdf, IndirectRow, PrefixPopulation, RankCell, RankRow, country_cdf,
    format_ranking, indirect_consolidation, load_counts, long_format, odns_counts,
    prefix_population, rank_countries, resolver_shares, top_other,
)

__all__ = [
    "UNKNOWN", "GeoMaps", "PrefixTable", "Project", "load_asn2country", "load_projects",
    "OTHER", "CountryCdf", "IndirectRow", "PrefixPopulation", "RankCell", "RankRow",
    "country_cdf", "format_ranking", "indirect_consolidation", "load_counts", "long_format",
    "odns_counts", "prefix_population", "rank_countries", "resolver_shares", "top_other",
]
