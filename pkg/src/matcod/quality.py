"""Usability index, data-quality types and country information weights."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import categories as cat
from .ingest import (
    SourceKind,
    adjust_hiv_contamination,
    resolve_zero_vs_missing,
    scale_multiyear,
)

logger = logging.getLogger(__name__)

FEW_DEATHS = 5
HIGH_USABILITY = 0.85
MEDIUM_USABILITY = 0.65
RUN_USABILITY = 0.60
RUN_LENGTH = 3


@dataclass(frozen=True)
class QualityProfile:
    observation_id: str
    usability: float
    quality_type: int
    coverage: float


@dataclass(frozen=True)
class CountryWeights:
    """Coverage weight ``w`` and subcause information weights ``z``.

    ``z`` is keyed by main category; only HEM, SEP and DIR are used downstream
    but every main category is reported.
    """

    country: str
    w: float
    z: dict

    def sub_weight(self, main):
        return self.z.get(main, 0.0) * self.w


def coverage(obs, env):
    """Observed deaths as a fraction of the HIV-omitted envelope, clamped."""
    if env.d_ring <= 0:
        return 1.0 if obs.total > 0 else 0.0
    return float(min(1.0, max(0.0, obs.total / env.d_ring)))


def usability_index(obs, env, few_deaths=FEW_DEATHS):
    """Usability of a record given its envelope, in [0, 1].

    Records with more than ``few_deaths`` deaths are additionally discounted
    by the contributory-cause proportion.
    """
    if env.d_ring <= 0:
        raise ValueError(f"{obs.country} {env.year}: envelope d_ring must be > 0")
    d = obs.total
    nu = d / env.d_ring * (1.0 - obs.ill_defined_prop)
    if d > few_deaths:
        nu *= 1.0 - obs.contributory_prop
    return float(min(1.0, max(0.0, nu)))


def in_consecutive_run(year, series, threshold=RUN_USABILITY, length=RUN_LENGTH):
    """Whether ``year`` sits in ``length`` consecutive observed years above ``threshold``."""
    good = {int(y) for y, v in series.items() if v > threshold}
    if year not in good:
        return False
    lo = hi = year
    while lo - 1 in good:
        lo -= 1
    while hi + 1 in good:
        hi += 1
    return hi - lo + 1 >= length


def assign_type(obs, usability_series, *, high=HIGH_USABILITY, medium=MEDIUM_USABILITY,
                run_threshold=RUN_USABILITY, run_length=RUN_LENGTH):
    """Data-quality type (1 best, 4 worst) of one record.

    ``usability_series`` maps year to usability for the CRVS source the record
    belongs to; it is ignored for grey literature and studies.
    """
    if obs.type_override is not None:
        return int(obs.type_override)
    if obs.source_kind is SourceKind.GreyLiterature:
        return 1
    if obs.source_kind is SourceKind.Study:
        return 4
    year = obs.year_start
    nu = usability_series.get(year)
    if nu is None or not in_consecutive_run(year, usability_series, run_threshold, run_length):
        return 4
    if nu > high:
        return 2
    if medium < nu <= high:
        return 3
    return 4


def usability_series(observations, envelopes):
    """Per-source ``{year: usability}`` for CRVS records."""
    series = defaultdict(dict)
    for obs in observations:
        if obs.source_kind is SourceKind.CRVS:
            env = envelopes.for_observation(obs)
            series[obs.source_key][obs.year_start] = usability_index(obs, env)
    return dict(series)


def country_weights(observations, envelopes, countries=()):
    """Coverage weight and subcause information weights for each country.

    Countries listed in ``countries`` without any record get ``w = 0``.
    """
    by_country = defaultdict(list)
    for obs in observations:
        by_country[obs.country].append(obs)
    out = {c: CountryWeights(c, 0.0, {m: 0.0 for m in cat.MAIN}) for c in countries}
    for country, obs_list in by_country.items():
        w = max(coverage(o, envelopes.for_observation(o)) for o in obs_list)
        z = {}
        for m in cat.MAIN:
            ratios = []
            for o in obs_list:
                if m in o.missing or o.counts[m] <= 0:
                    continue
                ratios.append(min(1.0, o.subclassified(m) / o.counts[m]) if m in cat.SUB else 1.0)
            z[m] = max(ratios) if ratios else 0.0
        out[country] = CountryWeights(country, float(w), z)
    return out


def weights_frame(weights):
    rows = []
    for cw in weights.values():
        row = {"country": cw.country, "w": cw.w}
        row.update({f"z_{m}": cw.z.get(m, 0.0) for m in cat.MAIN})
        rows.append(row)
    return pd.DataFrame(rows, columns=["country", "w"] + [f"z_{m}" for m in cat.MAIN])


class QualityAssessor(TransformerMixin, BaseEstimator):
    """Learn per-source CRVS usability series and type each record.

    Parameters
    ----------
    high, medium : float
        Usability cut-offs for types 2 and 3.
    run_threshold : float
        Usability every year of a qualifying consecutive run must exceed.
    run_length : int
        Minimum length of that run.
    """

    def __init__(self, high=HIGH_USABILITY, medium=MEDIUM_USABILITY,
                 run_threshold=RUN_USABILITY, run_length=RUN_LENGTH):
        self.high = high
        self.medium = medium
        self.run_threshold = run_threshold
        self.run_length = run_length

    def fit(self, X, y=None, envelopes=None):
        if envelopes is None:
            raise ValueError("QualityAssessor.fit needs envelopes")
        self.envelopes_ = envelopes
        self.series_ = usability_series(X, envelopes)
        return self

    def profile(self, obs):
        check_is_fitted(self, "series_")
        env = self.envelopes_.for_observation(obs)
        nu = usability_index(obs, env) if env.d_ring > 0 else 0.0
        qtype = assign_type(
            obs, self.series_.get(obs.source_key, {}), high=self.high, medium=self.medium,
            run_threshold=self.run_threshold, run_length=self.run_length,
        )
        return QualityProfile(obs.observation_id, nu, qtype, coverage(obs, env))

    def transform(self, X):
        rows = [self.profile(o) for o in X]
        return pd.DataFrame(
            [(p.observation_id, p.usability, p.quality_type, p.coverage) for p in rows],
            columns=["observation_id", "usability", "type", "coverage"],
        )


def prepare_observations(observations, envelopes, assessor=None):
    """Run the adjustment chain and return ``(records, profiles)``.

    Order: multi-year scaling, HIV subtraction, quality typing, then the
    zero-versus-missing rule (which needs the type). Records whose deaths
    are all missing or zero are kept; the model drops them.
    """
    obs = [scale_multiyear(o) for o in observations]
    obs = [adjust_hiv_contamination(o, envelopes.for_observation(o)) for o in obs]
    assessor = assessor if assessor is not None else QualityAssessor()
    assessor.fit(obs, envelopes=envelopes)
    profiles = {o.observation_id: assessor.profile(o) for o in obs}
    by_source = defaultdict(list)
    for o in obs:
        by_source[o.source_key].append(o)
    resolved = [
        resolve_zero_vs_missing(
            o, by_source[o.source_key], envelopes.for_observation(o),
            profiles[o.observation_id].quality_type,
        )
        for o in obs
    ]
    return resolved, profiles


def hiv_sigma(observations, envelopes):
    """Standard deviation of observed minus envelope HIV proportions.

    Only records that report HIV/AIDS deaths contribute; with fewer than two
    such records the spread is taken as 0.
    """
    diffs = []
    for o in observations:
        if o.hiv_deaths is None:
            continue
        denom = o.total + o.hiv_deaths
        if denom <= 0:
            continue
        env = envelopes.for_observation(o)
        diffs.append(o.hiv_deaths / denom - env.hiv_proportion)
    if len(diffs) < 2:
        logger.info("fewer than two records report HIV deaths; using sigma_hiv = 0")
        return 0.0
    return float(np.std(diffs, ddof=1))
