import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_envelope, make_record
from matcod.ingest import EnvelopeTable
from matcod.quality import (
    QualityAssessor,
    assign_type,
    country_weights,
    hiv_sigma,
    in_consecutive_run,
    prepare_observations,
    usability_index,
)


def _rec(d, ill=0.0, contr=0.0, **kw):
    return make_record(counts={"HEM": d / 2, "HYP": d / 2}, ill_defined_prop=ill,
                       contributory_prop=contr, **kw)


# ---- usability -----------------------------------------------------------

def test_usability_few_deaths_ignores_contributory():
    assert usability_index(_rec(4, contr=0.5), make_envelope(d_ring=10)) == pytest.approx(0.4)


def test_usability_full_formula():
    nu = usability_index(_rec(80, ill=0.05, contr=0.1), make_envelope(d_ring=100))
    assert nu == pytest.approx(0.8 * 0.95 * 0.9)
    assert nu == pytest.approx(0.684)


def test_usability_zero_deaths():
    assert usability_index(_rec(0), make_envelope(d_ring=100)) == 0.0


def test_usability_clamped():
    assert usability_index(_rec(300), make_envelope(d_ring=100)) == 1.0


def test_usability_needs_positive_envelope():
    with pytest.raises(ValueError):
        usability_index(_rec(3), make_envelope(d_ring=0))


@settings(max_examples=80, deadline=None)
@given(d=st.floats(0, 200), ill=st.floats(0, 0.9), contr=st.floats(0, 0.9),
       bump=st.floats(0, 0.1))
def test_usability_monotone_in_misclassification(d, ill, contr, bump):
    env = make_envelope(d_ring=100)
    base = usability_index(_rec(d, ill, contr), env)
    assert usability_index(_rec(d, ill + bump, contr), env) <= base + 1e-12
    assert usability_index(_rec(d, ill, contr + bump), env) <= base + 1e-12
    assert 0.0 <= base <= 1.0


# ---- types ---------------------------------------------------------------

def test_type_high_usability_in_run():
    series = {2009: 0.7, 2010: 0.9, 2011: 0.8}
    assert assign_type(_rec(10, year=2010), series) == 2


def test_type_isolated_year():
    series = {2009: 0.5, 2010: 0.9, 2011: 0.4}
    assert assign_type(_rec(10, year=2010), series) == 4


def test_type_medium_band():
    series = {2009: 0.7, 2010: 0.8, 2011: 0.8}
    assert assign_type(_rec(10, year=2010), series) == 3
    series[2010] = 0.85
    assert assign_type(_rec(10, year=2010), series) == 3


def test_type_low_in_run():
    series = {2009: 0.7, 2010: 0.62, 2011: 0.8}
    assert assign_type(_rec(10, year=2010), series) == 4


def test_type_by_source_kind():
    assert assign_type(_rec(10, kind="Study"), {2010: 1.0}) == 4
    assert assign_type(_rec(10, kind="GreyLiterature"), {}) == 1


def test_type_override_wins():
    assert assign_type(_rec(10, kind="Study", type_override=2), {}) == 2


def test_consecutive_run_ends():
    series = {2001: 0.7, 2002: 0.7, 2003: 0.7, 2005: 0.9}
    assert in_consecutive_run(2001, series) and in_consecutive_run(2003, series)
    assert not in_consecutive_run(2005, series)
    assert not in_consecutive_run(2004, series)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.5, 1.0), min_size=4, max_size=8), st.floats(0, 1))
def test_types_ignore_unrelated_records(nus, other_nu):
    years = range(2000, 2000 + len(nus))
    recs = [_rec(100 * nu, year=y, oid=f"a{y}") for y, nu in zip(years, nus)]
    envs = EnvelopeTable([make_envelope("X", y) for y in years]
                         + [make_envelope("Y", y) for y in years])
    base = QualityAssessor().fit(recs, envelopes=envs).transform(recs)
    noise = [_rec(100 * other_nu, year=y, oid=f"b{y}", country="Y") for y in years]
    both = QualityAssessor().fit(noise + recs, envelopes=envs).transform(recs)
    assert base["type"].tolist() == both["type"].tolist()


def test_assessor_frame_columns(envelope_table):
    recs = [_rec(90, year=y, oid=str(y)) for y in (2001, 2002, 2003)]
    df = QualityAssessor().fit(recs, envelopes=envelope_table).transform(recs)
    assert list(df.columns) == ["observation_id", "usability", "type", "coverage"]
    assert df["type"].tolist() == [2, 2, 2]


def test_assessor_needs_envelopes():
    with pytest.raises(ValueError):
        QualityAssessor().fit([])


# ---- weights -------------------------------------------------------------

def test_coverage_weight_small_country():
    envs = EnvelopeTable([make_envelope("B", 2010, d_ring=66000)])
    w = country_weights([_rec(1400, country="B")], envs)["B"]
    assert w.w == pytest.approx(1400 / 66000)
    assert round(w.w, 4) == 0.0212


def test_weight_zero_without_data(envelope_table):
    assert country_weights([], envelope_table, countries=["Z"])["Z"].w == 0.0


def test_weight_is_max_coverage():
    envs = EnvelopeTable([make_envelope("X", t, d_ring=100) for t in (2010, 2011)])
    recs = [_rec(30, year=2010, oid="a"), _rec(70, year=2011, oid="b")]
    assert country_weights(recs, envs)["X"].w == pytest.approx(0.7)


def test_subcause_weight_full_and_partial(envelope_table):
    r = make_record(counts={"HEM": 10, "SEP": 4, "HYP": 1},
                    sub_counts={"HEM_ante": 6, "HEM_post": 4, "SEP_ante": 1})
    z = country_weights([r], envelope_table)["X"].z
    assert z["HEM"] == pytest.approx(1.0)
    assert z["SEP"] == pytest.approx(0.25)
    assert z["DIR"] == 0.0


# ---- pipeline ------------------------------------------------------------

def test_prepare_chain_scales_before_typing(envelope_table):
    r = make_record(year=2010, year_end=2012, counts={"HEM": 150, "HYP": 150})
    out, profiles = prepare_observations([r], envelope_table)
    assert out[0].total == pytest.approx(100.0)
    assert profiles[r.observation_id].usability == pytest.approx(1.0)


def test_hiv_sigma():
    envs = EnvelopeTable([make_envelope("X", t, d_ring=90, d_hiv=10) for t in (2010, 2011)])
    recs = [make_record("a", year=2010, counts={"HEM": 80}, hiv_deaths=20),
            make_record("b", year=2011, counts={"HEM": 100}, hiv_deaths=0)]
    assert hiv_sigma(recs, envs) == pytest.approx(abs(0.2 - 0.0) / 2 ** 0.5)
    assert hiv_sigma(recs[:1], envs) == 0.0
