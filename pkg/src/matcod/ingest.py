"""Observation records, ICD-10 classification and the three data adjustments.

The adjustments are pure functions returning new records:

* ``resolve_zero_vs_missing`` decides whether a reported zero is a true zero.
* ``adjust_hiv_contamination`` removes HIV/AIDS deaths hidden in IND.
* ``scale_multiyear`` brings long multi-year studies to a one-year scale.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import categories as cat
from .exceptions import DuplicateCode, MissingEnvelope, SchemaError, UnknownCategoryLabel

logger = logging.getLogger(__name__)

HIV_CODE = "O98.7"
TRUE_ZERO_ENVELOPE_LIMIT = 7.0
MULTIYEAR_DEATHS_PER_YEAR = 5.0


class SourceKind(str, Enum):
    CRVS = "CRVS"
    GreyLiterature = "GreyLiterature"
    Study = "Study"

    def __str__(self):
        return self.value


class GeoLevel(str, Enum):
    National = "National"
    ADM1OrHigher = "ADM1OrHigher"
    BelowADM1 = "BelowADM1"

    def __str__(self):
        return self.value


# --------------------------------------------------------------------------
# cause map


@dataclass(frozen=True)
class CauseMapEntry:
    icd10: str
    main: str
    sub: str | None = None


@dataclass(frozen=True)
class CauseMap:
    entries: tuple[CauseMapEntry, ...]
    _lookup: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lookup = {}
        for e in self.entries:
            if e.icd10 in lookup:
                raise DuplicateCode(e.icd10)
            lookup[e.icd10] = e
        object.__setattr__(self, "_lookup", lookup)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, code):
        return _normalize_code(code) in self._lookup

    def get(self, code):
        return self._lookup.get(_normalize_code(code))


def _normalize_code(code):
    return str(code).strip()


def _parse_entry(row):
    code = _normalize_code(row.get("icd10") or "")
    main = (row.get("main") or "").strip()
    sub = (row.get("sub") or "").strip() or None
    if not code or main not in cat.MAIN:
        raise UnknownCategoryLabel(row)
    if sub is not None and (not cat.is_label(sub) or sub in cat.MAIN or cat.parent(sub) != main):
        raise UnknownCategoryLabel(row)
    return CauseMapEntry(code, main, sub)


def load_cause_map(path=None):
    """Read an ``icd10,main,sub`` CSV into a validated :class:`CauseMap`.

    With no ``path`` the packaged ICD-10 assignment table is used.
    """
    if path is None:
        text = resources.files("matcod").joinpath("data/causemap.csv").read_text("utf-8")
        lines = text.splitlines()
    else:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or not {"icd10", "main"} <= set(reader.fieldnames):
        raise SchemaError(f"cause map needs columns icd10,main,sub; got {reader.fieldnames}")
    return CauseMap(tuple(_parse_entry(row) for row in reader))


def classify_counts(raw, cause_map):
    """Bucket ``(icd10_code, count)`` pairs into main and subcause totals.

    Returns ``(main_counts, sub_counts, excluded)``. ``main_counts`` has all
    seven main categories; ``sub_counts`` is keyed by subcause or sentinel
    label and only holds labels that received deaths. ``excluded`` lists
    ``(code, count, reason)`` for the HIV code and for unmapped codes, so that
    ``sum(input) == sum(main_counts) + sum(excluded counts)``.
    """
    main_counts = {m: 0.0 for m in cat.MAIN}
    sub_counts = {}
    excluded = []
    for code, count in raw:
        count = float(count)
        if not np.isfinite(count) or count < 0:
            raise ValueError(f"count for {code!r} must be a nonnegative number, got {count}")
        code = _normalize_code(code)
        if code == HIV_CODE:
            excluded.append((code, count, "HIV code"))
            continue
        entry = cause_map.get(code)
        if entry is None:
            excluded.append((code, count, "unmapped code"))
            continue
        main_counts[entry.main] += count
        if entry.sub is not None:
            sub_counts[entry.sub] = sub_counts.get(entry.sub, 0.0) + count
    return main_counts, sub_counts, excluded


def reports_o98(codes):
    """True if any deaths were coded to the O98 family other than O98.7."""
    return any(
        _normalize_code(c).startswith("O98") and _normalize_code(c) != HIV_CODE for c in codes
    )


# --------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class ObservationRecord:
    """One source-year (or source-period) of cause-specific death counts.

    ``counts`` holds all seven main categories; entries named in ``missing``
    are unknown and never enter totals. ``sub_counts`` may also hold the
    unknown-subcause sentinels.
    """

    observation_id: str
    country: str
    year_start: int
    year_end: int
    source_kind: SourceKind
    geo_level: GeoLevel
    counts: Mapping[str, float]
    missing: frozenset = frozenset()
    sub_counts: Mapping[str, float] = field(default_factory=dict)
    sub_missing: frozenset = frozenset()
    hiv_deaths: float | None = None
    ill_defined_prop: float = 0.0
    contributory_prop: float = 0.0
    reports_group7_or_o98: bool = False
    source_id: str | None = None
    type_override: int | None = None
    scaled: bool = False
    hiv_adjusted: bool = False

    def __post_init__(self):
        object.__setattr__(self, "source_kind", SourceKind(self.source_kind))
        object.__setattr__(self, "geo_level", GeoLevel(self.geo_level))
        object.__setattr__(self, "missing", frozenset(self.missing))
        object.__setattr__(self, "sub_missing", frozenset(self.sub_missing))
        counts = {m: float(self.counts.get(m, 0.0)) for m in cat.MAIN}
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "sub_counts", {k: float(v) for k, v in self.sub_counts.items()})
        if self.year_start > self.year_end:
            raise ValueError(f"{self.observation_id}: year_start > year_end")
        for k, v in list(counts.items()) + list(self.sub_counts.items()):
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{self.observation_id}: count for {k} must be >= 0, got {v}")
        unknown = (set(self.missing) - set(cat.MAIN)) | {
            k for k in self.sub_counts if not (cat.is_subcause(k) or cat.is_sentinel(k))
        }
        if unknown:
            raise UnknownCategoryLabel(sorted(unknown))
        for name in ("ill_defined_prop", "contributory_prop"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{self.observation_id}: {name} must lie in [0, 1], got {v}")
        for m in cat.SUB:
            if m in self.missing:
                continue
            classified = sum(
                v for k, v in self.sub_counts.items()
                if cat.parent(k) == m and k not in self.sub_missing
            )
            if classified > counts[m] * (1 + 1e-9) + 1e-9:
                raise ValueError(
                    f"{self.observation_id}: subcause counts for {m} exceed the main count"
                )

    @property
    def total(self):
        """Deaths over non-missing main categories (d_i)."""
        return float(sum(v for k, v in self.counts.items() if k not in self.missing))

    @property
    def span(self):
        return self.year_end - self.year_start + 1

    @property
    def source_key(self):
        return self.source_id or f"{self.country}/{self.source_kind.value}"

    def main_array(self):
        """Counts in model order with ``nan`` for missing categories."""
        return np.array(
            [np.nan if m in self.missing else self.counts[m] for m in cat.MAIN], dtype=float
        )

    def sub_array(self, main):
        """Classified subcause counts for ``main`` (``nan`` if unknown)."""
        out = []
        for s in cat.SUB[main]:
            if main in self.missing or s in self.sub_missing or s not in self.sub_counts:
                out.append(np.nan)
            else:
                out.append(self.sub_counts[s])
        return np.array(out, dtype=float)

    def subclassified(self, main):
        return float(np.nansum(self.sub_array(main)))


@dataclass(frozen=True)
class EnvelopeEstimate:
    country: str
    year: int
    d_ring: float
    d_ring_hiv: float
    wpp_female_deaths: float
    crvs_female_deaths: float | None = None

    def __post_init__(self):
        if not (self.d_ring >= 0 and self.d_ring_hiv >= 0):
            raise ValueError(f"{self.country} {self.year}: envelope counts must be >= 0")
        if not self.wpp_female_deaths > 0:
            raise ValueError(f"{self.country} {self.year}: wpp_female_deaths must be > 0")

    @property
    def total(self):
        return self.d_ring + self.d_ring_hiv

    @property
    def hiv_proportion(self):
        """MMEIG proportion of maternal deaths attributed to HIV/AIDS."""
        return self.d_ring_hiv / self.total if self.total > 0 else 0.0


class EnvelopeTable(Mapping):
    """Envelopes keyed by ``(country, year)``."""

    def __init__(self, envelopes: Iterable[EnvelopeEstimate] = ()):
        self._data = {}
        for e in envelopes:
            self._data[(e.country, int(e.year))] = e

    def __getitem__(self, key):
        return self._data[key]

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def get_year(self, country, year):
        try:
            return self._data[(country, int(year))]
        except KeyError:
            raise MissingEnvelope(country, year) from None

    def for_span(self, country, year_start, year_end):
        """Average of the yearly envelopes over an observation period."""
        years = range(int(year_start), int(year_end) + 1)
        envs = [self.get_year(country, y) for y in years]
        if len(envs) == 1:
            return envs[0]
        crvs = [e.crvs_female_deaths for e in envs]
        return EnvelopeEstimate(
            country=country,
            year=int(year_start),
            d_ring=float(np.mean([e.d_ring for e in envs])),
            d_ring_hiv=float(np.mean([e.d_ring_hiv for e in envs])),
            wpp_female_deaths=float(np.mean([e.wpp_female_deaths for e in envs])),
            crvs_female_deaths=None if any(c is None for c in crvs) else float(np.mean(crvs)),
        )

    def for_observation(self, obs):
        return self.for_span(obs.country, obs.year_start, obs.year_end)

    def countries(self):
        return sorted({c for c, _ in self._data})


# --------------------------------------------------------------------------
# adjustments


def resolve_zero_vs_missing(obs, history, env, quality_type):
    """Mark unreliable reported zeros as missing.

    A reported zero for a main cause stays a true zero only when the record is
    quality type 1 or 2, the same source reported that cause as non-zero in
    some other year, and the HIV-inclusive envelope is below 7 deaths.
    Missing main causes also hide their subcauses.
    """
    if quality_type not in (1, 2, 3, 4):
        raise ValueError(f"quality_type must be 1-4, got {quality_type}")
    if env is None:
        raise MissingEnvelope(obs.country, obs.year_start)
    low_envelope = env.d_ring + env.d_ring_hiv < TRUE_ZERO_ENVELOPE_LIMIT
    others = [
        h for h in history
        if h.source_key == obs.source_key and h.observation_id != obs.observation_id
        and (h.year_start, h.year_end) != (obs.year_start, obs.year_end)
    ]
    missing = set(obs.missing)
    for m in cat.MAIN:
        if m in missing or obs.counts[m] != 0:
            continue
        seen_nonzero = any(m not in h.missing and h.counts[m] > 0 for h in others)
        if not (quality_type in (1, 2) and seen_nonzero and low_envelope):
            missing.add(m)
    if missing == set(obs.missing):
        return obs
    sub_missing = set(obs.sub_missing)
    for m in missing & set(cat.SUB):
        sub_missing.update(cat.SUB[m])
    return replace(obs, missing=frozenset(missing), sub_missing=frozenset(sub_missing))


def hiv_subtraction(obs, env):
    """Deaths to remove from IND: envelope HIV deaths scaled by coverage."""
    if env.total <= 0:
        return 0.0
    return env.d_ring_hiv * (obs.total / env.total)


def adjust_hiv_contamination(obs, env):
    """Subtract coverage-scaled HIV/AIDS deaths from IND, floored at zero.

    Only records that report Group 7 or O98 deaths are touched, and only once.
    """
    if env is None:
        raise MissingEnvelope(obs.country, obs.year_start)
    if not obs.reports_group7_or_o98 or obs.hiv_adjusted or "IND" in obs.missing:
        return obs
    counts = dict(obs.counts)
    counts["IND"] = max(0.0, counts["IND"] - hiv_subtraction(obs, env))
    return replace(obs, counts=counts, hiv_adjusted=True)


def scale_multiyear(obs):
    """Rescale a multi-year record to one-year size when it has > 5n deaths."""
    n = obs.span
    if obs.scaled or n <= 1 or obs.total <= MULTIYEAR_DEATHS_PER_YEAR * n:
        return obs
    f = 1.0 / n
    counts = {k: v * f for k, v in obs.counts.items()}
    subs = {k: v * f for k, v in obs.sub_counts.items()}
    hiv = None if obs.hiv_deaths is None else obs.hiv_deaths * f
    return replace(obs, counts=counts, sub_counts=subs, hiv_deaths=hiv, scaled=True)


# --------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class RegionMap:
    """Country to modeling region and SDG reporting region."""

    model_region: Mapping[str, str]
    sdg_region: Mapping[str, str]

    def __contains__(self, country):
        return country in self.model_region

    @property
    def countries(self):
        return sorted(self.model_region)

    def model_regions(self, countries=None):
        countries = self.countries if countries is None else countries
        return sorted({self.model_region[c] for c in countries})

    def sdg_regions(self, countries=None):
        countries = self.countries if countries is None else countries
        return sorted({self.sdg_region[c] for c in countries})

    def restrict(self, countries):
        keep = set(countries)
        return RegionMap(
            {c: r for c, r in self.model_region.items() if c in keep},
            {c: r for c, r in self.sdg_region.items() if c in keep},
        )


def load_regions(path=None):
    """Read ``country,model_region,sdg_region`` (packaged table by default)."""
    if path is None:
        text = resources.files("matcod").joinpath("data/regions.csv").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    reader = csv.DictReader(line for line in text.splitlines() if not line.startswith("#"))
    need = {"country", "model_region", "sdg_region"}
    if reader.fieldnames is None or not need <= set(reader.fieldnames):
        raise SchemaError(f"regions file needs columns {sorted(need)}; got {reader.fieldnames}")
    model, sdg = {}, {}
    for row in reader:
        c = row["country"].strip()
        if c in model:
            raise SchemaError(f"country listed twice in regions file: {c}")
        model[c] = row["model_region"].strip()
        sdg[c] = row["sdg_region"].strip()
    return RegionMap(model, sdg)
