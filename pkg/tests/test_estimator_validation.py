import numpy as np
import pandas as pd
import pytest
from sklearn.base import clone

from matcod import categories as cat
from matcod.estimator import CauseOfDeathModel
from matcod.exceptions import EmptyAfterExclusion
from matcod.simulate import ScenarioConfig, simulate_dataset
from matcod.validation import (
    TABLE_CAUSES,
    Scenario,
    exclusion_set,
    mean_absolute_difference,
    run_validation,
)

FAST = dict(chains=2, warmup_iters=80, sampling_iters=60, seed=3)


@pytest.fixture(scope="module")
def dataset():
    cfg = ScenarioConfig(n_regions=2, countries_per_region=2, obs_per_country=(2, 3),
                         developed_regions=(1,))
    return simulate_dataset(cfg, seed=22)


@pytest.fixture(scope="module")
def fitted(dataset):
    est = CauseOfDeathModel(**FAST)
    return est.fit(dataset["records"], envelopes=dataset["envelopes"],
                   regions=dataset["regions"])


def test_params_and_clone():
    est = CauseOfDeathModel(chains=3, metric="dense")
    params = est.get_params()
    assert params["chains"] == 3 and params["metric"] == "dense"
    twin = clone(est)
    assert twin.get_params() == params and twin is not est


def test_fit_requires_envelopes(dataset):
    with pytest.raises(TypeError):
        CauseOfDeathModel(**FAST).fit(dataset["records"])


def test_fitted_attributes(fitted):
    assert set(fitted.fits_) == {"main", "HEM", "SEP", "DIR"}
    assert {"model", "parameter", "rhat", "ess"} <= set(fitted.diagnostics_.columns)
    assert isinstance(fitted.converged_, bool)
    assert fitted.fits_["main"].draws.draws.shape[:2] == (2, 60)
    assert fitted.sigma_hiv_ >= 0


def test_country_proportions_shape(fitted):
    country = fitted.prediction_countries()[0]
    p = fitted.country_proportions(country)
    assert p.shape == (120, 7) and np.allclose(p.sum(axis=1), 1.0)
    sub = fitted.country_proportions(country, "DIR")
    assert sub.shape == (120, 4)
    again = fitted.country_proportions(country)
    assert np.array_equal(p, again)


def test_predict_tables(fitted, dataset):
    main, sub = fitted.predict(period=(2010, 2011), max_draws=40)
    scopes = set(main["scope"])
    assert "global" in scopes and set(dataset["regions"].sdg_region.values()) <= scopes
    g = main[main["scope"] == "global"]
    assert list(g["cause"]) == list(cat.MAIN)
    assert (main["lo95"] <= main["median"]).all() and (main["median"] <= main["hi95"]).all()
    assert set(sub["cause"]) == set(cat.SUBCAUSES)


def test_end_to_end_determinism(dataset, fitted):
    again = CauseOfDeathModel(**FAST).fit(dataset["records"], envelopes=dataset["envelopes"],
                                          regions=dataset["regions"])
    for t in fitted.fits_:
        assert np.array_equal(fitted.fits_[t].draws.draws, again.fits_[t].draws.draws)
    a, _ = fitted.predict(period=(2010, 2010), max_draws=30)
    b, _ = again.predict(period=(2010, 2010), max_draws=30)
    pd.testing.assert_frame_equal(a, b)


# ---- validation ----------------------------------------------------------

def test_exclusion_sets(dataset, fitted):
    recs, regions = dataset["records"], dataset["regions"]
    types = {k: p.quality_type for k, p in fitted.profiles_.items()}
    studies = exclusion_set(Scenario.LeaveOutStudies, recs, regions)
    assert studies == [r.observation_id for r in recs if r.source_kind.value == "Study"]
    dev = exclusion_set("leave-out-developed", recs, regions)
    assert dev and all(regions.model_region[r.country].startswith("Developed")
                       for r in recs if r.observation_id in dev)
    a = exclusion_set(Scenario.LeaveOut20Percent, recs, regions, types, seed=4)
    b = exclusion_set(Scenario.LeaveOut20Percent, recs, regions, types, seed=4)
    assert a == b
    for t in (1, 2, 3, 4):
        n = sum(types[r.observation_id] == t for r in recs)
        assert sum(types[o] == t for o in a) == int(round(0.2 * n))
    assert exclusion_set(Scenario.NoExclusion, recs, regions) == []
    with pytest.raises(ValueError):
        exclusion_set(Scenario.LeaveOut20Percent, recs, regions)


def test_mad_symmetric_and_nonnegative(rng):
    idx = ["a", "b", "c"]
    full = pd.DataFrame(rng.dirichlet(np.ones(7), 3), index=idx, columns=list(cat.MAIN))
    red = pd.DataFrame(rng.dirichlet(np.ones(7), 3), index=idx, columns=list(cat.MAIN))
    sdg = {"a": "S1", "b": "S1", "c": "S2"}
    ab = mean_absolute_difference(full, red, sdg)
    ba = mean_absolute_difference(red, full, sdg)
    pd.testing.assert_frame_equal(ab, ba)
    assert (ab["mad"] >= 0).all()
    hem = ab[(ab.sdg_region == "S1") & (ab.cause == "HEM")]["mad"].iloc[0]
    assert hem == pytest.approx(abs(full.loc[["a", "b"], "HEM"]
                                    - red.loc[["a", "b"], "HEM"]).mean())


class _FullFitStub:
    seed = 0
    profiles_ = {}


def test_empty_after_exclusion():
    ds = simulate_dataset(ScenarioConfig(n_regions=1, countries_per_region=2,
                                         source_mix={"Study": 1.0}), seed=1)
    with pytest.raises(EmptyAfterExclusion):
        run_validation(Scenario.LeaveOutStudies, ds, CauseOfDeathModel(**FAST),
                       full_fit=_FullFitStub())


def test_run_validation_report(dataset, fitted):
    est = CauseOfDeathModel(**{**FAST, "fit_subcauses": False})
    rep = run_validation(Scenario.NoExclusion, dataset, est, full_fit=fitted)
    assert rep.excluded == []
    assert {"sdg_region", "cause", "mad", "mcse"} <= set(rep.mad.columns)
    assert (rep.mad["mad"] >= 0).all() and (rep.mad["mcse"] >= 0).all()
    table = rep.table()
    assert list(table["Cause"]) == list(TABLE_CAUSES)
    assert set(table.columns) - {"Cause"} == set(dataset["regions"].sdg_region.values())
