"""From posterior draws to country, regional and global cause distributions.

Country proportions mix the fitted country effect with a fresh draw from the
country-effect distribution, weighted by how much of the country's deaths the
data cover. HIV/AIDS deaths are then added to the indirect category, and
death counts are summed over countries and years for regional and global
aggregates.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from . import categories as cat
from .exceptions import MissingCountryYear

DEFAULT_PERIOD = (2009, 2017)
INTERVAL = (2.5, 97.5)

# RNG stream labels
_STREAM_MAIN = 0
_STREAM_SUB = {"HEM": 1, "SEP": 2, "DIR": 3}
_STREAM_HIV = 9


def country_key(country):
    """Stable integer key of a country code for seeding."""
    return zlib.crc32(str(country).encode("utf-8"))


def country_rng(seed, stream, country, *extra):
    return np.random.default_rng([int(seed), int(stream), country_key(country), *map(int, extra)])


def softmax_with_reference(log_ratios):
    """Proportions from ``(..., K)`` log-ratios against a final reference category."""
    full = np.concatenate([log_ratios, np.zeros(log_ratios.shape[:-1] + (1,))], axis=-1)
    full = full - full.max(axis=-1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class CountryYearDistribution:
    """Per-draw HIV-inclusive cause proportions and deaths for one country-year."""

    country: str
    year: int
    draws_main: np.ndarray
    deaths_main: np.ndarray
    draws_sub: dict = field(default_factory=dict)


@dataclass
class AggregateDistribution:
    """Per-draw cause proportions for an SDG region or the world over a period."""

    scope: str
    period: tuple
    draws: np.ndarray
    deaths: np.ndarray
    categories: tuple = cat.MAIN
    sub_draws: dict = field(default_factory=dict)

    @property
    def summary(self):
        return summarize(self.draws, self.categories, self.scope)


def summarize(draws, categories, scope):
    """Median and central 95% interval per category."""
    lo, hi = np.percentile(draws, INTERVAL, axis=0)
    med = np.median(draws, axis=0)
    return pd.DataFrame({"scope": scope, "cause": list(categories),
                         "median": med, "lo95": lo, "hi95": hi})


# --------------------------------------------------------------------------
# country proportions


def generic_country_effects(v, chol, rng):
    """One draw of a new country effect per posterior draw: ``diag(v) L eps``."""
    eps = rng.standard_normal(v.shape)
    return v * np.einsum("sij,sj->si", chol, eps)


def true_country_log_ratios(effects, region, w, rng, country=None, u_tilde=None):
    """Per-draw log-ratios mixing fitted and generic country effects.

    Parameters
    ----------
    effects : dict
        Output of :meth:`matcod.model.CauseModel.effects`.
    region : int
        Modeling region index.
    w : float or array_like
        Weight on the fitted country effect, scalar or one per category.
    rng : numpy.random.Generator
        Source of the generic effect; ignored when ``u_tilde`` is given.
    country : int, optional
        Country index in the fitted model; ``None`` for countries without
        data, which must then have ``w == 0``.
    """
    w = np.asarray(w, dtype=float)
    base = effects["beta0"] + effects["beta_region"][:, region]
    if u_tilde is None:
        u_tilde = generic_country_effects(effects["v"], effects["chol"], rng)
    if country is None:
        if np.any(w != 0):
            raise ValueError("a country absent from the fit must have weight 0")
        return base + u_tilde
    return base + w * effects["u"][:, country] + (1.0 - w) * u_tilde


def true_country_proportions(effects, region, w, rng, country=None, u_tilde=None):
    """Per-draw true cause proportions ``p*`` of one country (reference last)."""
    return softmax_with_reference(
        true_country_log_ratios(effects, region, w, rng, country, u_tilde))


def subcause_distributions(effects, region, z, w, rng, country=None, u_tilde=None):
    """Subcause proportions with weight ``z * w`` on the fitted country effect."""
    return true_country_proportions(effects, region, np.asarray(z) * w, rng, country, u_tilde)


# --------------------------------------------------------------------------
# HIV


def truncated_normal_unit(mean, sd, u):
    """Inverse-CDF draws of Normal(mean, sd) truncated to (0, 1)."""
    if sd <= 0 or mean <= 0:
        return np.full(np.shape(u), float(np.clip(mean, 0.0, 1.0)))
    a, b = (0.0 - mean) / sd, (1.0 - mean) / sd
    return stats.truncnorm.ppf(u, a, b, loc=mean, scale=sd)


def incorporate_hiv(p_star, env, sigma_hiv, rng, country=None, year=None,
                    ind_index=cat.MAIN.index("IND")):
    """Add HIV/AIDS maternal deaths to the indirect category.

    Parameters
    ----------
    p_star : ndarray, shape (S, 7)
        HIV-omitted proportions.
    env : EnvelopeEstimate
    sigma_hiv : float
        Relative spread of the HIV proportion.
    rng : numpy.random.Generator

    Returns
    -------
    CountryYearDistribution
    """
    p_star = np.atleast_2d(np.asarray(p_star, dtype=float))
    total = env.d_ring + env.d_ring_hiv
    p_ring = env.d_ring_hiv / total if total > 0 else 0.0
    u = rng.uniform(size=p_star.shape[0])
    p_hiv = truncated_normal_unit(p_ring, p_ring * sigma_hiv, u)
    d_hiv = p_hiv * total
    deaths = p_star * env.d_ring
    deaths[:, ind_index] += d_hiv
    s = deaths.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(s > 0, deaths / s, p_star)
    return CountryYearDistribution(
        country=env.country if country is None else country,
        year=env.year if year is None else year,
        draws_main=p, deaths_main=deaths,
    )


# --------------------------------------------------------------------------
# aggregation


def _years(period):
    return range(int(period[0]), int(period[1]) + 1)


def aggregate(dists, grouping, period=DEFAULT_PERIOD, countries=None):
    """Sum country-year deaths into SDG regions and the world.

    Parameters
    ----------
    dists : iterable of CountryYearDistribution
        May be a generator; distributions are consumed one at a time.
    grouping : mapping
        Country to SDG region.
    period : (int, int)
        Inclusive year range.
    countries : iterable of str, optional
        Countries that must be present for every year; defaults to all
        countries in ``grouping``.

    Returns
    -------
    dict
        Scope (region name or ``"global"``) to :class:`AggregateDistribution`.
    """
    years = set(_years(period))
    required = {(c, t) for c in (countries if countries is not None else grouping) for t in years}
    seen = set()
    totals, subs = {}, {}
    for d in dists:
        if d.year not in years:
            continue
        region = grouping[d.country]
        seen.add((d.country, d.year))
        totals[region] = totals.get(region, 0.0) + d.deaths_main
        for main, p_sub in d.draws_sub.items():
            k = cat.MAIN.index(main)
            sub_deaths = p_sub * d.deaths_main[:, k:k + 1]
            key = (region, main)
            subs[key] = subs.get(key, 0.0) + sub_deaths
    missing = required - seen
    if missing:
        raise MissingCountryYear(missing)
    out = {}
    for region, deaths in sorted(totals.items()):
        out[region] = _finish(region, period, deaths, {m: s for (r, m), s in subs.items()
                                                      if r == region})
    if totals:
        g = sum(totals.values())
        gsub = {}
        for (_, m), s in subs.items():
            gsub[m] = gsub.get(m, 0.0) + s
        out["global"] = _finish("global", period, g, gsub)
    return out


def _finish(scope, period, deaths, sub_deaths):
    p = deaths / deaths.sum(axis=1, keepdims=True)
    sub = {m: s / s.sum(axis=1, keepdims=True) for m, s in sub_deaths.items()}
    return AggregateDistribution(scope=scope, period=tuple(period), draws=p, deaths=deaths,
                                 sub_draws=sub)


def sub_summary(agg_or_draws, scope=None):
    """Subcause summary rows for an aggregate or a ``{main: draws}`` mapping."""
    if isinstance(agg_or_draws, AggregateDistribution):
        scope, sub = agg_or_draws.scope, agg_or_draws.sub_draws
    else:
        sub = agg_or_draws
    frames = [summarize(sub[m], cat.SUB[m], scope) for m in cat.SUB if m in sub]
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["scope", "cause", "median", "lo95", "hi95"])
