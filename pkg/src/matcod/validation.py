"""Leave-out validation: refit without part of the data and compare estimates."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd
from sklearn.base import clone

from . import categories as cat
from .exceptions import EmptyAfterExclusion
from .ingest import SourceKind
from .simulate import DEVELOPED

# Row order of the reported tables.
TABLE_CAUSES = ("ABO", "DIR", "EMB", "HEM", "SEP", "IND", "HYP")
REFIT_SEED_OFFSET = 1000
LEAVE_OUT_FRACTION = 0.2


class Scenario(str, Enum):
    LeaveOutStudies = "leave-out-studies"
    LeaveOutDeveloped = "leave-out-developed"
    LeaveOut20Percent = "leave-out-20-percent"
    NoExclusion = "no-exclusion"

    def __str__(self):
        return self.value


@dataclass
class ValidationReport:
    """Mean absolute differences of country proportion medians.

    ``mad`` has one row per (SDG region, cause); ``mcse`` holds the matching
    mean Monte Carlo standard error of the differences.
    """

    scenario: Scenario
    mad: pd.DataFrame
    excluded: list
    full_medians: pd.DataFrame
    reduced_medians: pd.DataFrame

    def table(self):
        """Causes by SDG region, in the layout of the published tables."""
        wide = self.mad.pivot(index="cause", columns="sdg_region", values="mad")
        wide = wide.reindex(list(TABLE_CAUSES))
        wide.columns.name = None
        return wide.reset_index().rename(columns={"cause": "Cause"})


def exclusion_set(scenario, records, regions, quality_types=None, seed=0):
    """Observation ids removed by ``scenario``.

    ``LeaveOut20Percent`` shuffles each quality type's observations with a
    generator seeded by ``seed`` and drops the first 20% (rounded) of each.
    """
    scenario = Scenario(scenario)
    if scenario is Scenario.NoExclusion:
        return []
    if scenario is Scenario.LeaveOutStudies:
        return [r.observation_id for r in records if r.source_kind is SourceKind.Study]
    if scenario is Scenario.LeaveOutDeveloped:
        return [r.observation_id for r in records
                if regions.model_region.get(r.country, "").startswith(DEVELOPED)]
    if quality_types is None:
        raise ValueError("the 20% scenario needs quality types")
    rng = np.random.default_rng(seed)
    out = []
    for t in (1, 2, 3, 4):
        ids = sorted(r.observation_id for r in records if quality_types[r.observation_id] == t)
        if not ids:
            continue
        order = rng.permutation(len(ids))
        k = int(round(LEAVE_OUT_FRACTION * len(ids)))
        out.extend(ids[i] for i in sorted(order[:k]))
    return out


def mean_absolute_difference(full, reduced, sdg_region):
    """Average ``|full - reduced|`` over the countries of each SDG region."""
    diff = (full - reduced.loc[full.index]).abs()
    diff["sdg_region"] = [sdg_region[c] for c in diff.index]
    long = diff.groupby("sdg_region")[list(cat.MAIN)].mean().reset_index()
    return long.melt(id_vars="sdg_region", var_name="cause", value_name="mad")


def run_validation(scenario, dataset, estimator, full_fit=None, seed=None):
    """Refit with the scenario's exclusion and compare country medians.

    Parameters
    ----------
    scenario : Scenario or str
    dataset : dict
        ``records``, ``envelopes`` and ``regions``.
    estimator : CauseOfDeathModel
        Template; cloned for each fit.
    full_fit : CauseOfDeathModel, optional
        Reuse an existing fit to all the data.
    seed : int, optional
        Seed of the exclusion shuffle; defaults to the estimator's seed.

    The reduced fit uses a different sampler seed from the full fit, so with
    no exclusion the differences measure Monte Carlo error only.
    """
    scenario = Scenario(scenario)
    records, envelopes, regions = dataset["records"], dataset["envelopes"], dataset["regions"]
    if full_fit is None:
        full_fit = clone(estimator).fit(records, envelopes=envelopes, regions=regions)
    types = {k: p.quality_type for k, p in full_fit.profiles_.items()}
    seed = estimator.seed if seed is None else seed
    excluded = exclusion_set(scenario, records, regions, types, seed)
    drop = set(excluded)
    kept = [r for r in records if r.observation_id not in drop]
    if not kept:
        raise EmptyAfterExclusion("all regions")
    reduced = clone(estimator).set_params(seed=int(full_fit.seed) + REFIT_SEED_OFFSET)
    reduced.fit(kept, envelopes=envelopes, regions=regions)
    countries = full_fit.prediction_countries()
    full_med = full_fit.country_medians(countries)
    red_med = reduced.country_medians(countries)
    mad = mean_absolute_difference(full_med, red_med, regions.sdg_region)
    mcse = (full_fit.country_median_mcse(countries) ** 2
            + reduced.country_median_mcse(countries) ** 2) ** 0.5
    mcse_long = mean_absolute_difference(mcse, 0.0 * mcse, regions.sdg_region)
    mad["mcse"] = mcse_long["mad"].to_numpy()
    return ValidationReport(scenario=scenario, mad=mad, excluded=excluded,
                            full_medians=full_med, reduced_medians=red_med)
