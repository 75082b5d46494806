"""CSV readers and writers for every file the command line reads or writes.

Output files start with a ``# manifest_sha256=...`` comment line tying them
to the run manifest; readers skip ``#`` lines.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import platform
from collections import defaultdict
from pathlib import Path

import numpy as np
import pandas as pd

from . import categories as cat
from .exceptions import SchemaError, UnknownCategoryLabel
from .ingest import EnvelopeEstimate, EnvelopeTable, ObservationRecord, classify_counts

OBSERVATION_COLUMNS = ["observation_id", "country", "year_start", "year_end", "source_kind",
                       "geo_level", "cause", "count", "missing"]
OPTIONAL_COLUMNS = ["ill_defined_prop", "contributory_prop", "hiv_deaths",
                    "reports_group7_or_o98", "type_override", "source_id"]
ENVELOPE_COLUMNS = ["country", "year", "d_ring", "d_ring_hiv", "wpp_female_deaths",
                    "crvs_female_deaths"]
QUALITY_COLUMNS = ["observation_id", "usability", "type", "coverage"]
ESTIMATE_COLUMNS = ["scope", "cause", "median", "lo95", "hi95"]


# --------------------------------------------------------------------------
# manifest


def _versions():
    from importlib.metadata import version

    import scipy
    import sklearn

    from . import __version__
    return {"matcod": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "pandas": pd.__version__, "scikit-learn": sklearn.__version__,
            "click": version("click"), "python": platform.python_version()}


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Inputs, configuration, seed and versions of one command invocation.

    ``hash`` covers everything except the timestamps, so reruns with the same
    inputs and configuration share a hash.
    """

    def __init__(self, command, inputs=(), config=None, seed=None):
        self.command = command
        self.inputs = {str(p): file_digest(p) for p in inputs if p is not None}
        self.config = dict(config or {})
        self.seed = seed
        self.versions = _versions()
        self.started = _dt.datetime.now(_dt.timezone.utc).isoformat()
        self.finished = None

    def _core(self):
        return {"command": self.command, "inputs": self.inputs,
                "config": self.config, "seed": self.seed, "versions": self.versions}

    @property
    def hash(self):
        blob = json.dumps(self._core(), sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def to_dict(self):
        d = self._core()
        d.update(hash=self.hash, started=self.started, finished=self.finished)
        return d

    def write(self, path):
        self.finished = _dt.datetime.now(_dt.timezone.utc).isoformat()
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, default=str) + "\n")


def write_csv(df, path, manifest_hash=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if manifest_hash:
            fh.write(f"# manifest_sha256={manifest_hash}\n")
        df.to_csv(fh, index=False, lineterminator="\n")


def read_csv(path, required=(), **kwargs):
    try:
        df = pd.read_csv(path, comment="#", **kwargs)
    except FileNotFoundError:
        raise
    except Exception as exc:  # noqa: BLE001 - any parse failure is a schema problem
        raise SchemaError(f"{path}: cannot parse CSV ({exc})") from None
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing required columns {missing}")
    return df


def manifest_of(path):
    """Manifest hash recorded in the first line of an output file, if any."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    if first.startswith("# manifest_sha256="):
        return first.split("=", 1)[1]
    return None


# --------------------------------------------------------------------------
# observations


def _flag(value):
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return False
    if isinstance(value, str):
        return value.strip().lower() in ("1", "true", "yes", "y", "t")
    return bool(value)


def _optional(value, kind=float):
    if value is None or (isinstance(value, float) and np.isnan(value)) or value == "":
        return None
    return kind(value)


def _constant(group, column, oid):
    if column not in group.columns:
        return None
    vals = group[column].dropna().unique()
    if len(vals) > 1:
        raise SchemaError(f"observation {oid}: column {column} varies across rows")
    return vals[0] if len(vals) else None


def records_from_frame(df):
    """Group long-format rows into :class:`ObservationRecord` objects.

    ``cause`` must be a category label. A main-category row holds deaths of
    that cause without subcause detail; its subcause rows add to the main
    total. Categories without any row are missing.
    """
    missing_cols = [c for c in OBSERVATION_COLUMNS if c not in df.columns]
    if missing_cols:
        raise SchemaError(f"observations: missing required columns {missing_cols}")
    records = []
    for oid, g in df.groupby("observation_id", sort=False):
        oid = str(oid)
        meta = {}
        for col in ("country", "year_start", "year_end", "source_kind", "geo_level"):
            meta[col] = _constant(g, col, oid)
        counts = {m: 0.0 for m in cat.MAIN}
        present, missing, sub_missing = set(), set(), set()
        sub_counts = defaultdict(float)
        for row in g.itertuples(index=False):
            label = str(row.cause).strip()
            if not cat.is_label(label):
                raise UnknownCategoryLabel({"observation_id": oid, "cause": label})
            is_missing = _flag(row.missing)
            count = 0.0 if is_missing or pd.isna(row.count) else float(row.count)
            main = cat.parent(label)
            present.add(main)
            if label in cat.MAIN:
                if is_missing:
                    missing.add(main)
                else:
                    counts[main] += count
            elif is_missing:
                sub_missing.add(label)
            else:
                counts[main] += count
                sub_counts[label] += count
        missing |= set(cat.MAIN) - present
        sub_counts = {k: v for k, v in sub_counts.items() if cat.parent(k) not in missing}
        hiv = _constant(g, "hiv_deaths", oid)
        override = _constant(g, "type_override", oid)
        src = _constant(g, "source_id", oid)
        try:
            records.append(ObservationRecord(
                observation_id=oid, country=str(meta["country"]),
                year_start=int(meta["year_start"]), year_end=int(meta["year_end"]),
                source_kind=meta["source_kind"], geo_level=meta["geo_level"],
                counts=counts, missing=frozenset(missing), sub_counts=dict(sub_counts),
                sub_missing=frozenset(sub_missing),
                hiv_deaths=_optional(hiv),
                ill_defined_prop=float(_constant(g, "ill_defined_prop", oid) or 0.0),
                contributory_prop=float(_constant(g, "contributory_prop", oid) or 0.0),
                reports_group7_or_o98=_flag(_constant(g, "reports_group7_or_o98", oid)),
                source_id=None if src is None else str(src),
                type_override=_optional(override, int),
            ))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, (SchemaError, UnknownCategoryLabel)):
                raise
            raise SchemaError(f"observation {oid}: {exc}") from None
    return records


def read_observations(path):
    df = read_csv(path, required=OBSERVATION_COLUMNS, dtype={"observation_id": str,
                                                             "country": str, "cause": str})
    return records_from_frame(df)


def records_to_frame(records):
    """Inverse of :func:`records_from_frame`."""
    rows = []
    for r in records:
        base = dict(observation_id=r.observation_id, country=r.country,
                    year_start=r.year_start, year_end=r.year_end,
                    source_kind=r.source_kind.value, geo_level=r.geo_level.value)
        extra = dict(ill_defined_prop=r.ill_defined_prop, contributory_prop=r.contributory_prop,
                     hiv_deaths=r.hiv_deaths,
                     reports_group7_or_o98=int(r.reports_group7_or_o98),
                     type_override=r.type_override, source_id=r.source_id)
        for m in cat.MAIN:
            if m in r.missing:
                rows.append({**base, "cause": m, "count": 0.0, "missing": 1, **extra})
                continue
            subs = {k: v for k, v in r.sub_counts.items()
                    if cat.parent(k) == m and not cat.is_sentinel(k)}
            rest = r.counts[m] - sum(subs.values())
            rows.append({**base, "cause": m, "count": max(rest, 0.0), "missing": 0, **extra})
            for s in cat.SUB.get(m, ()):
                if s in r.sub_missing:
                    rows.append({**base, "cause": s, "count": 0.0, "missing": 1, **extra})
                elif s in subs:
                    rows.append({**base, "cause": s, "count": subs[s], "missing": 0, **extra})
    df = pd.DataFrame(rows, columns=OBSERVATION_COLUMNS + OPTIONAL_COLUMNS)
    df["type_override"] = df["type_override"].astype("Int64")
    return df


def write_observations(records, path, manifest_hash=None):
    write_csv(records_to_frame(records), path, manifest_hash)


def classify_frame(df, cause_map):
    """Replace ICD-10 codes in ``cause`` by category labels.

    Rows already holding a label pass through. Returns ``(labelled, excluded)``
    where ``excluded`` lists the codes routed out with their reasons.
    """
    missing_cols = [c for c in OBSERVATION_COLUMNS if c not in df.columns]
    if missing_cols:
        raise SchemaError(f"observations: missing required columns {missing_cols}")
    out, excluded = [], []
    for row in df.to_dict("records"):
        label = str(row["cause"]).strip()
        if cat.is_label(label):
            out.append(row)
            continue
        if _flag(row["missing"]):
            entry = cause_map.get(label)
            if entry is None:
                excluded.append({"observation_id": row["observation_id"], "code": label,
                                 "count": 0.0, "reason": "unmapped code"})
                continue
            out.append({**row, "cause": entry.sub or entry.main})
            continue
        mains, subs, exc = classify_counts([(label, float(row["count"]))], cause_map)
        for code, count, reason in exc:
            excluded.append({"observation_id": row["observation_id"], "code": code,
                             "count": count, "reason": reason})
        for s, v in subs.items():
            if v:
                out.append({**row, "cause": s, "count": v})
        sub_total = {m: sum(v for s, v in subs.items() if cat.parent(s) == m) for m in cat.MAIN}
        for m, v in mains.items():
            rest = v - sub_total[m]
            if rest > 0:
                out.append({**row, "cause": m, "count": rest})
    labelled = pd.DataFrame(out, columns=list(df.columns))
    excl = pd.DataFrame(excluded, columns=["observation_id", "code", "count", "reason"])
    return labelled, excl


# --------------------------------------------------------------------------
# envelopes, weights, quality


def read_envelopes(path):
    df = read_csv(path, required=ENVELOPE_COLUMNS[:5], dtype={"country": str})
    envs = []
    for row in df.to_dict("records"):
        crvs = row.get("crvs_female_deaths")
        try:
            envs.append(EnvelopeEstimate(
                country=str(row["country"]), year=int(row["year"]),
                d_ring=float(row["d_ring"]), d_ring_hiv=float(row["d_ring_hiv"]),
                wpp_female_deaths=float(row["wpp_female_deaths"]),
                crvs_female_deaths=None if crvs is None or pd.isna(crvs) else float(crvs),
            ))
        except ValueError as exc:
            raise SchemaError(f"{path}: {exc}") from None
    return EnvelopeTable(envs)


def envelopes_to_frame(envelopes):
    return pd.DataFrame(
        [(e.country, e.year, e.d_ring, e.d_ring_hiv, e.wpp_female_deaths, e.crvs_female_deaths)
         for e in envelopes.values()], columns=ENVELOPE_COLUMNS)


def regions_to_frame(region_map):
    return pd.DataFrame([(c, region_map.model_region[c], region_map.sdg_region[c])
                         for c in region_map.countries],
                        columns=["country", "model_region", "sdg_region"])


def quality_frame(profiles):
    return pd.DataFrame([(p.observation_id, p.usability, p.quality_type, p.coverage)
                         for p in profiles.values()], columns=QUALITY_COLUMNS)


def read_quality_types(path):
    df = read_csv(path, required=QUALITY_COLUMNS, dtype={"observation_id": str})
    return dict(zip(df["observation_id"], df["type"].astype(int)))


# --------------------------------------------------------------------------
# draws and diagnostics


def draws_frame(draws):
    """Long-format draws: one row per (chain, iteration)."""
    m, n, d = draws.draws.shape
    df = pd.DataFrame(draws.draws.reshape(m * n, d), columns=draws.parameter_names)
    df.insert(0, "iteration", np.tile(np.arange(n), m))
    df.insert(0, "chain", np.repeat(np.arange(m), n))
    return df


def read_draws(path):
    df = read_csv(path, required=["chain", "iteration"])
    names = [c for c in df.columns if c not in ("chain", "iteration")]
    chains = sorted(df["chain"].unique())
    arr = np.stack([df.loc[df["chain"] == c, names].to_numpy() for c in chains])
    return arr, names
