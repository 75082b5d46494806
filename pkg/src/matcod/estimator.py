"""End-to-end estimator: adjust and type the data, fit, and report distributions."""

from __future__ import annotations

import logging

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import categories as cat
from .diagnostics import diagnose, passes
from .exceptions import MatcodError
from .ingest import EnvelopeTable, ObservationRecord, RegionMap
from .model import CauseModel, build_model_spec
from .posterior import (DEFAULT_PERIOD, _STREAM_HIV, _STREAM_MAIN, _STREAM_SUB, aggregate,
                        country_rng, generic_country_effects, incorporate_hiv, sub_summary,
                        subcause_distributions, summarize, true_country_proportions)
from .quality import QualityAssessor, country_weights, hiv_sigma, prepare_observations
from .sampler import SamplerConfig, sample

logger = logging.getLogger(__name__)

TARGETS = ("main",) + tuple(cat.SUB)


def check_records(X):
    """Validate the observation input of :meth:`CauseOfDeathModel.fit`."""
    records = list(X)
    if not records:
        raise ValueError("no observations given")
    bad = [type(r).__name__ for r in records if not isinstance(r, ObservationRecord)]
    if bad:
        raise TypeError(f"expected ObservationRecord objects, got {sorted(set(bad))}")
    ids = [r.observation_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("observation ids must be unique")
    return records


class FittedTarget:
    """Model and draws for one of the four model instances."""

    def __init__(self, model, draws, diagnostics):
        self.model = model
        self.draws = draws
        self.diagnostics = diagnostics

    def effects(self, max_draws=None):
        flat = self.draws.flat()
        if max_draws is not None and len(flat) > max_draws:
            idx = np.linspace(0, len(flat) - 1, max_draws).round().astype(int)
            flat = flat[idx]
        return self.model.effects(flat)


class CauseOfDeathModel(BaseEstimator):
    """Hierarchical estimator of cause-of-death distributions.

    Parameters
    ----------
    chains, warmup_iters, sampling_iters, seed, target_accept, max_tree_depth, metric
        Sampler settings (see :class:`~matcod.sampler.SamplerConfig`).
    phi_parameterization : {"offset", "raw"}
    country_effects : {"noncentered", "centered"}
    intercept_scale : float, optional
        Normal prior scale on the intercepts; flat when ``None``.
    fit_subcauses : bool
        Also fit the hemorrhage, sepsis and other-direct submodels.
    quality_assessor : QualityAssessor, optional
    threads : int, optional
        Worker processes for chains.

    Attributes
    ----------
    records_ : list of ObservationRecord
        Observations after all data adjustments.
    profiles_ : dict
        Observation id to :class:`~matcod.quality.QualityProfile`.
    weights_ : dict
        Country to :class:`~matcod.quality.CountryWeights`.
    sigma_hiv_ : float
    fits_ : dict
        Target (``"main"``, ``"HEM"``, ``"SEP"``, ``"DIR"``) to :class:`FittedTarget`.
    diagnostics_ : pandas.DataFrame
    converged_ : bool
    """

    def __init__(self, chains=4, warmup_iters=6000, sampling_iters=4000, seed=1,
                 target_accept=0.8, max_tree_depth=10, metric="diag",
                 phi_parameterization="offset",
                 country_effects="noncentered", intercept_scale=None, fit_subcauses=True,
                 quality_assessor=None, threads=None):
        self.chains = chains
        self.warmup_iters = warmup_iters
        self.sampling_iters = sampling_iters
        self.seed = seed
        self.target_accept = target_accept
        self.max_tree_depth = max_tree_depth
        self.metric = metric
        self.phi_parameterization = phi_parameterization
        self.country_effects = country_effects
        self.intercept_scale = intercept_scale
        self.fit_subcauses = fit_subcauses
        self.quality_assessor = quality_assessor
        self.threads = threads

    def sampler_config(self, target="main"):
        offset = TARGETS.index(target)
        return SamplerConfig(chains=self.chains, warmup_iters=self.warmup_iters,
                             sampling_iters=self.sampling_iters,
                             seed=(int(self.seed) + offset) % 2**64,
                             target_accept=self.target_accept,
                             max_tree_depth=self.max_tree_depth, metric=self.metric,
                             threads=self.threads)

    def _model(self, spec):
        return CauseModel(spec, phi_parameterization=self.phi_parameterization,
                          intercept_scale=self.intercept_scale,
                          country_effects=self.country_effects)

    def fit(self, X, y=None, envelopes=None, regions=None):
        """Adjust, type and fit.

        Parameters
        ----------
        X : iterable of ObservationRecord
            Raw (unadjusted) observations.
        y : ignored
        envelopes : EnvelopeTable
        regions : RegionMap
        """
        records = check_records(X)
        if not isinstance(envelopes, EnvelopeTable):
            raise TypeError("fit needs envelopes=EnvelopeTable")
        if not isinstance(regions, RegionMap):
            raise TypeError("fit needs regions=RegionMap")
        assessor = self.quality_assessor if self.quality_assessor is not None else QualityAssessor()
        adjusted, profiles = prepare_observations(records, envelopes, assessor)
        self.records_ = adjusted
        self.profiles_ = profiles
        self.envelopes_ = envelopes
        self.regions_ = regions
        universe = [c for c in envelopes.countries() if c in regions]
        self.weights_ = country_weights(adjusted, envelopes, universe)
        self.sigma_hiv_ = hiv_sigma(adjusted, envelopes)
        model_regions = regions.model_regions(universe)
        types = {k: p.quality_type for k, p in profiles.items()}

        self.fits_ = {}
        tables = []
        targets = TARGETS if self.fit_subcauses else ("main",)
        for target in targets:
            spec = build_model_spec(adjusted, types, regions, target, regions=model_regions)
            if spec.N == 0:
                if target == "main":
                    raise MatcodError("no observation has observed deaths")
                logger.warning("no subcause data for %s; submodel skipped", target)
                continue
            for j, name in enumerate(spec.categories):
                if not spec.observed[:, j].any():
                    logger.warning("%s: category %s is never observed", target, name)
            model = self._model(spec)
            draws = sample(model, self.sampler_config(target))
            table = diagnose(draws, model=model)
            table.insert(0, "model", target)
            tables.append(table)
            self.fits_[target] = FittedTarget(model, draws, table)
        self.diagnostics_ = pd.concat(tables, ignore_index=True)
        self.converged_ = passes(self.diagnostics_)
        self.n_features_in_ = len(cat.MAIN)
        return self

    # ---- posterior quantities -------------------------------------------

    def _country_index(self, target, country):
        spec = self.fits_[target].model.spec
        region = self.regions_.model_region[country]
        if region not in spec.regions:
            raise KeyError(f"{country}: region {region!r} is not part of the fitted model")
        r = spec.regions.index(region)
        c = spec.countries.index(country) if country in spec.countries else None
        return r, c

    def country_proportions(self, country, target="main", w=None, max_draws=None, seed=None,
                            u_tilde=None):
        """Per-draw true proportions of one country (HIV excluded).

        ``w`` overrides the country's coverage weight; for submodels the
        weight on the country effect is ``z * w``.
        """
        check_is_fitted(self, "fits_")
        fit = self.fits_[target]
        eff = fit.effects(max_draws)
        r, c = self._country_index(target, country)
        weights = self.weights_.get(country)
        w = (weights.w if weights is not None else 0.0) if w is None else w
        if c is None:
            w = 0.0
        seed = self.seed if seed is None else seed
        if target == "main":
            rng = country_rng(seed, _STREAM_MAIN, country)
            return true_country_proportions(eff, r, w, rng, c, u_tilde)
        z = weights.z.get(target, 0.0) if weights is not None else 0.0
        rng = country_rng(seed, _STREAM_SUB[target], country)
        return subcause_distributions(eff, r, z if c is not None else 0.0, w, rng, c, u_tilde)

    def generic_effects(self, country, target="main", max_draws=None, seed=None):
        """The ``u_tilde`` draws used for ``country`` (common random numbers)."""
        fit = self.fits_[target]
        eff = fit.effects(max_draws)
        stream = _STREAM_MAIN if target == "main" else _STREAM_SUB[target]
        rng = country_rng(self.seed if seed is None else seed, stream, country)
        return generic_country_effects(eff["v"], eff["chol"], rng)

    def prediction_countries(self, period=DEFAULT_PERIOD):
        """Countries with a modeling region in the fit and envelopes for the period."""
        check_is_fitted(self, "fits_")
        spec = self.fits_["main"].model.spec
        years = range(period[0], period[1] + 1)
        out = []
        for c in self.envelopes_.countries():
            if c not in self.regions_ or self.regions_.model_region[c] not in spec.regions:
                continue
            if all((c, t) in self.envelopes_ for t in years):
                out.append(c)
        return out

    def country_year_distributions(self, countries=None, period=DEFAULT_PERIOD, max_draws=None,
                                   seed=None):
        """Yield HIV-inclusive distributions for each country and year of the period."""
        check_is_fitted(self, "fits_")
        seed = self.seed if seed is None else seed
        countries = self.prediction_countries(period) if countries is None else countries
        for country in countries:
            p_star = self.country_proportions(country, max_draws=max_draws, seed=seed)
            subs = {m: self.country_proportions(country, m, max_draws=max_draws, seed=seed)
                    for m in cat.SUB if m in self.fits_}
            for t in range(period[0], period[1] + 1):
                env = self.envelopes_.get_year(country, t)
                rng = country_rng(seed, _STREAM_HIV, country, t)
                d = incorporate_hiv(p_star, env, self.sigma_hiv_, rng)
                d.draws_sub = subs
                yield d

    def predict(self, X=None, period=DEFAULT_PERIOD, max_draws=None, seed=None):
        """Summaries for countries, SDG regions and the world.

        Parameters
        ----------
        X : sequence of str, optional
            Countries to report; defaults to :meth:`prediction_countries`.

        Returns
        -------
        (main, sub) : tuple of pandas.DataFrame
            Columns ``scope, cause, median, lo95, hi95``.
        """
        check_is_fitted(self, "fits_")
        countries = self.prediction_countries(period) if X is None else list(X)
        per_country = {}

        def collect():
            for d in self.country_year_distributions(countries, period, max_draws, seed):
                acc = per_country.setdefault(d.country, [0.0, {}])
                acc[0] = acc[0] + d.deaths_main
                for m, p in d.draws_sub.items():
                    k = cat.MAIN.index(m)
                    acc[1][m] = acc[1].get(m, 0.0) + p * d.deaths_main[:, k:k + 1]
                yield d

        grouping = {c: self.regions_.sdg_region[c] for c in countries}
        aggs = aggregate(collect(), grouping, period, countries)
        main_rows, sub_rows = [], []
        for country in countries:
            deaths, subs = per_country[country]
            main_rows.append(summarize(deaths / deaths.sum(axis=1, keepdims=True),
                                       cat.MAIN, country))
            sub_rows.append(sub_summary({m: s / s.sum(axis=1, keepdims=True)
                                         for m, s in subs.items()}, country))
        for scope, agg in aggs.items():
            main_rows.append(agg.summary)
            sub_rows.append(sub_summary(agg))
        return (pd.concat(main_rows, ignore_index=True),
                pd.concat(sub_rows, ignore_index=True))

    def country_medians(self, countries=None, max_draws=None, seed=None):
        """Posterior median of ``p*`` per country and cause (countries x causes)."""
        check_is_fitted(self, "fits_")
        countries = self.prediction_countries() if countries is None else countries
        rows = {c: np.median(self.country_proportions(c, max_draws=max_draws, seed=seed), axis=0)
                for c in countries}
        return pd.DataFrame.from_dict(rows, orient="index", columns=list(cat.MAIN))

    def country_median_mcse(self, countries=None, seed=None):
        """Monte Carlo standard error of each median in :meth:`country_medians`."""
        from .diagnostics import mcse_quantile

        check_is_fitted(self, "fits_")
        countries = self.prediction_countries() if countries is None else countries
        m, n, _ = self.fits_["main"].draws.draws.shape
        rows = {}
        for c in countries:
            p = self.country_proportions(c, seed=seed).reshape(m, n, -1)
            rows[c] = [mcse_quantile(p[:, :, j], 0.5) for j in range(p.shape[-1])]
        return pd.DataFrame.from_dict(rows, orient="index", columns=list(cat.MAIN))
