"""Synthetic data from the generative model, for calibration and recovery checks.

Parameters are drawn from their priors (intercepts from a Normal), counts
from multinomials, and the result is written with the same CSV schemas the
readers accept, plus a JSON sidecar with the true parameter values.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from . import categories as cat
from .ingest import EnvelopeEstimate, EnvelopeTable, GeoLevel, ObservationRecord, RegionMap, SourceKind
from .model import (QUALITY_TYPES, SIGMA_BETA_SCALE, SIGMA_TYPE_SCALE, V_SCALE, ModelParameters,
                    ModelSpec, cpc_to_cholesky)

DEVELOPED = "Developed regions"


@dataclass
class ScenarioConfig:
    """Shape of a synthetic world.

    ``source_mix`` gives the probability of each source kind per observation;
    regions listed in ``study_only_regions`` get studies only. Missingness is
    applied independently per non-reference main category.
    """

    n_regions: int = 3
    countries_per_region: int = 3
    obs_per_country: tuple = (3, 6)
    deaths_range: tuple = (20, 200)
    missing_rate: float | dict = 0.1
    source_mix: dict = field(default_factory=lambda: {
        "CRVS": 0.5, "GreyLiterature": 0.2, "Study": 0.3})
    study_only_regions: tuple = ()
    developed_regions: tuple = ()
    type_of_crvs: tuple = (2, 3, 4)
    years: tuple = (2005, 2017)
    envelope_range: tuple = (150, 400)
    hiv_proportion_range: tuple = (0.0, 0.1)
    subclassified_range: tuple = (0.5, 1.0)
    intercept_scale: float = 1.0
    abundant: bool = False

    def missing_rate_of(self, category):
        """``missing_rate`` may be one rate or a mapping of category to rate."""
        if isinstance(self.missing_rate, Mapping):
            return float(self.missing_rate.get(category, 0.0))
        return float(self.missing_rate)

    def region_names(self):
        names = [f"Region {chr(ord('A') + k)}" for k in range(self.n_regions)]
        for k in self.developed_regions:
            names[k] = DEVELOPED if k == self.developed_regions[0] else f"{DEVELOPED} {k}"
        return names

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("obs_per_country", "deaths_range", "study_only_regions",
                    "developed_regions", "type_of_crvs", "years", "envelope_range",
                    "hiv_proportion_range", "subclassified_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


DESK = ScenarioConfig()


def abundant_scenario(**kwargs):
    """Large counts, no missingness, all type 1 and full coverage."""
    kw = dict(obs_per_country=(2, 2), deaths_range=(100_000, 100_000), missing_rate=0.0,
              source_mix={"GreyLiterature": 1.0}, abundant=True)
    kw.update(kwargs)
    return ScenarioConfig(**kw)


@dataclass
class Truth:
    """Generating parameters of one synthetic world."""

    main: ModelParameters
    sub: dict
    countries: list
    regions: list
    region_of_country: np.ndarray
    observation_types: dict

    def country_proportions(self, target="main"):
        p = self.main if target == "main" else self.sub[target]
        eta = p.beta0 + p.beta_region[self.region_of_country] + p.u
        full = np.concatenate([eta, np.zeros((len(eta), 1))], axis=1)
        e = np.exp(full - full.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def to_dict(self):
        def par(p):
            return {"beta0": p.beta0.tolist(), "beta_region": p.beta_region.tolist(),
                    "sigma_beta": float(p.sigma_beta), "u": p.u.tolist(), "v": p.v.tolist(),
                    "omega": p.omega.tolist(), "sigma_type": p.sigma_type.tolist()}
        return {
            "countries": self.countries, "regions": self.regions,
            "region_of_country": self.region_of_country.tolist(),
            "main": par(self.main), "sub": {k: par(v) for k, v in self.sub.items()},
            "country_proportions": {
                t: dict(zip(self.countries, self.country_proportions(t).tolist()))
                for t in ["main", *self.sub]},
            "observation_types": self.observation_types,
        }


def draw_lkj_cholesky(K, rng):
    """Cholesky factor of a uniformly distributed K x K correlation matrix."""
    y = []
    for i in range(1, K):
        for k in range(i):
            a = (K - k) / 2.0
            z = 2.0 * rng.beta(a, a) - 1.0
            y.append(np.arctanh(np.clip(z, -1 + 1e-12, 1 - 1e-12)))
    L, _ = cpc_to_cholesky(np.array(y), K)
    return L


def draw_parameters(K, R, C, rng, intercept_scale=1.0, quality=True):
    """Draw all non-observation parameters from their priors."""
    beta0 = rng.normal(0.0, intercept_scale, K)
    sigma_beta = abs(rng.normal(0.0, SIGMA_BETA_SCALE))
    beta_region = rng.normal(0.0, 1.0, (R, K)) * sigma_beta
    v = np.abs(rng.normal(0.0, V_SCALE, K))
    L = draw_lkj_cholesky(K, rng)
    u = rng.standard_normal((C, K)) @ (v[:, None] * L).T
    sigma_type = np.abs(rng.normal(0.0, SIGMA_TYPE_SCALE, len(QUALITY_TYPES)))
    if not quality:
        sigma_type = np.ones(len(QUALITY_TYPES))
    return ModelParameters(beta0=beta0, beta_region=beta_region, sigma_beta=sigma_beta, u=u,
                           v=v, omega=L @ L.T, q=np.zeros((0, K)), sigma_type=sigma_type,
                           phi=np.zeros(0), chol_omega=L)


def _proportions(eta):
    full = np.append(eta, 0.0)
    e = np.exp(full - full.max())
    return e / e.sum()


def simulate_spec(n_regions=3, countries_per_region=3, obs_per_country=(3, 6),
                  deaths_range=(20, 200), missing_rate=0.1, type_probs=(0.2, 0.25, 0.25, 0.3),
                  intercept_scale=1.0, seed=0, rng=None):
    """Draw parameters and a :class:`ModelSpec` for the main model directly.

    Used for calibration: the counts follow the model exactly, with no
    data-adjustment step in between. Returns ``(spec, params)``.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    K = len(cat.MAIN) - 1
    R, C = n_regions, n_regions * countries_per_region
    params = draw_parameters(K, R, C, rng, intercept_scale)
    region_of_country = np.repeat(np.arange(R), countries_per_region)
    ys, obs, country, types, q_rows = [], [], [], [], []
    for c in range(C):
        for _ in range(rng.integers(obs_per_country[0], obs_per_country[1] + 1)):
            t = int(rng.choice(4, p=type_probs)) + 1
            q = np.zeros(K)
            if t >= 2:
                q = rng.normal(0.0, params.sigma_type[t - 2], K)
            eta = params.beta0 + params.beta_region[region_of_country[c]] + params.u[c] + q
            d = int(rng.integers(deaths_range[0], deaths_range[1] + 1))
            y = rng.multinomial(d, _proportions(eta)).astype(float)
            mask = np.ones(K + 1, dtype=bool)
            mask[:K] = rng.random(K) >= missing_rate
            if y[mask].sum() <= 0:
                continue
            ys.append(y)
            obs.append(mask)
            country.append(c)
            types.append(t)
            q_rows.append(q)
    spec = ModelSpec(y=np.array(ys), observed=np.array(obs), country_of_obs=np.array(country),
                     region_of_country=region_of_country, type_of_obs=np.array(types),
                     n_regions=R)
    params.q = np.array(q_rows)
    return spec, params


def _source_kinds(config, region, rng, n):
    if region in config.study_only_regions:
        return ["Study"] * n
    kinds = list(config.source_mix)
    probs = np.array([config.source_mix[k] for k in kinds], dtype=float)
    return list(rng.choice(kinds, size=n, p=probs / probs.sum()))


def simulate_dataset(config=DESK, seed=0):
    """Generate a complete synthetic input set.

    Returns
    -------
    dict
        ``records`` (list of ObservationRecord), ``envelopes`` (EnvelopeTable),
        ``regions`` (RegionMap) and ``truth`` (:class:`Truth`).
    """
    rng = np.random.default_rng(seed)
    K = len(cat.MAIN) - 1
    R, C = config.n_regions, config.n_regions * config.countries_per_region
    regions = config.region_names()
    countries = [f"C{c + 1:02d}" for c in range(C)]
    region_of_country = np.repeat(np.arange(R), config.countries_per_region)
    main = draw_parameters(K, R, C, rng, config.intercept_scale)
    sub = {m: draw_parameters(len(cat.SUB[m]) - 1, R, C, rng, config.intercept_scale,
                              quality=False) for m in cat.SUB}
    years = np.arange(config.years[0], config.years[1] + 1)

    envelopes = []
    env_scale = {}
    for c, name in enumerate(countries):
        if config.abundant:
            base = float(config.deaths_range[1])
        else:
            base = float(rng.uniform(*config.envelope_range))
        hiv = float(rng.uniform(*config.hiv_proportion_range))
        env_scale[name] = base
        for t in years:
            d_ring = base * float(rng.uniform(0.95, 1.05)) if not config.abundant else base
            envelopes.append(EnvelopeEstimate(
                country=name, year=int(t), d_ring=d_ring, d_ring_hiv=d_ring * hiv / (1 - hiv),
                wpp_female_deaths=d_ring * 40.0))
    env_table = EnvelopeTable(envelopes)

    records, types = [], {}
    idx = 0
    for c, name in enumerate(countries):
        r = region_of_country[c]
        n = int(rng.integers(config.obs_per_country[0], config.obs_per_country[1] + 1))
        kinds = _source_kinds(config, r, rng, n)
        obs_years = sorted(rng.choice(years, size=n, replace=n > len(years)))
        for kind, year in zip(kinds, obs_years):
            idx += 1
            oid = f"obs{idx:04d}"
            if kind == "GreyLiterature":
                t = 1
            elif kind == "Study":
                t = 4
            else:
                t = int(rng.choice(config.type_of_crvs))
            q = rng.normal(0.0, main.sigma_type[t - 2], K) if t >= 2 else np.zeros(K)
            eta = main.beta0 + main.beta_region[r] + main.u[c] + q
            env = env_table.get_year(name, int(year))
            if config.abundant:
                d = int(config.deaths_range[1])
            elif kind == "Study":
                d = int(rng.integers(config.deaths_range[0], config.deaths_range[1] + 1))
            else:
                d = int(np.clip(env.d_ring * rng.uniform(0.5, 1.0), *config.deaths_range))
            y = rng.multinomial(d, _proportions(eta)).astype(float)
            missing = {m for m in cat.MAIN[:-1] if rng.random() < config.missing_rate_of(m)}
            counts = {m: 0.0 if m in missing else v for m, v in zip(cat.MAIN, y)}
            sub_counts = {}
            for m, sp in sub.items():
                if m in missing or counts[m] == 0:
                    continue
                share = rng.uniform(*config.subclassified_range)
                n_sub = int(rng.binomial(int(counts[m]), share))
                p_sub = _proportions(sp.beta0 + sp.beta_region[r] + sp.u[c])
                split = rng.multinomial(n_sub, p_sub)
                sub_counts.update(zip(cat.SUB[m], split.astype(float)))
            geo = GeoLevel.National if kind != "Study" else GeoLevel.BelowADM1
            hiv_deaths = None
            if kind == "CRVS" and env.hiv_proportion > 0:
                hiv_deaths = float(rng.binomial(d, env.hiv_proportion))
            records.append(ObservationRecord(
                observation_id=oid, country=name, year_start=int(year), year_end=int(year),
                source_kind=SourceKind(kind), geo_level=geo, counts=counts,
                missing=frozenset(missing), sub_counts=sub_counts, hiv_deaths=hiv_deaths,
                type_override=t, source_id=f"{name}/{kind}",
            ))
            types[oid] = t
    region_map = RegionMap(
        {c: regions[region_of_country[k]] for k, c in enumerate(countries)},
        {c: regions[region_of_country[k]] for k, c in enumerate(countries)},
    )
    truth = Truth(main=main, sub=sub, countries=countries, regions=regions,
                  region_of_country=region_of_country, observation_types=types)
    return {"records": records, "envelopes": env_table, "regions": region_map, "truth": truth}


def write_dataset(dataset, outdir, config=None, seed=None):
    """Write observations, envelopes, regions and the truth sidecar to ``outdir``."""
    from .io import envelopes_to_frame, regions_to_frame, write_csv, write_observations

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_observations(dataset["records"], outdir / "observations.csv")
    write_csv(envelopes_to_frame(dataset["envelopes"]), outdir / "envelopes.csv")
    write_csv(regions_to_frame(dataset["regions"]), outdir / "regions.csv")
    truth = dataset["truth"].to_dict()
    if config is not None:
        truth["scenario"] = asdict(config)
    truth["seed"] = seed
    (outdir / "truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
    return outdir
