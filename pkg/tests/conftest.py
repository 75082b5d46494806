import numpy as np
import pytest

from matcod.ingest import EnvelopeEstimate, EnvelopeTable, ObservationRecord

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def make_record(oid="o1", country="X", year=2010, kind="CRVS", counts=None, **kw):
    counts = counts if counts is not None else {"HEM": 10, "HYP": 5}
    return ObservationRecord(observation_id=oid, country=country, year_start=year,
                             year_end=kw.pop("year_end", year), source_kind=kind,
                             geo_level=kw.pop("geo_level", "National"), counts=counts, **kw)


def make_envelope(country="X", year=2010, d_ring=100.0, d_hiv=0.0):
    return EnvelopeEstimate(country=country, year=year, d_ring=d_ring, d_ring_hiv=d_hiv,
                            wpp_female_deaths=1000.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def envelope_table():
    return EnvelopeTable([make_envelope("X", t) for t in range(2000, 2020)])
