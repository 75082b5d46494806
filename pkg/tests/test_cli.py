import json

import pandas as pd
import pytest
from click.testing import CliRunner

from matcod import categories as cat
from matcod.cli import main
from matcod.io import manifest_of, read_csv

SCENARIO = """scenario:
  n_regions: 2
  countries_per_region: 2
  obs_per_country: [2, 3]
  developed_regions: [1]
"""
FIT = """chains: 2
warmup_iters: 60
sampling_iters: 40
seed: 5
fit_subcauses: false
"""


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "scenario.yaml").write_text(SCENARIO)
    (d / "fit.yaml").write_text(FIT)
    res = invoke("simulate", "--out-dir", d / "data", "--seed", 22,
                 "--config", d / "scenario.yaml")
    assert res.exit_code == 0, res.output
    return d


@pytest.fixture(scope="module")
def fit_dir(workdir):
    data = workdir / "data"
    res = invoke("fit", data / "observations.csv", "--envelopes", data / "envelopes.csv",
                 "--regions", data / "regions.csv", "--config", workdir / "fit.yaml",
                 "--out-dir", workdir / "fit")
    # short runs need not converge; exit 1 signals that
    assert res.exit_code in (0, 1), res.output
    assert "converged=" in res.output
    return workdir / "fit"


def test_simulate_files(workdir):
    names = {p.name for p in (workdir / "data").iterdir()}
    assert names == {"observations.csv", "envelopes.csv", "regions.csv", "truth.json"}
    truth = json.loads((workdir / "data" / "truth.json").read_text())
    assert truth["seed"] == 22 and truth["scenario"]["n_regions"] == 2


def test_quality_command(workdir):
    data = workdir / "data"
    res = invoke("quality", data / "observations.csv", "--envelopes", data / "envelopes.csv",
                 "--out", workdir / "quality.csv", "--weights", workdir / "weights.csv")
    assert res.exit_code == 0, res.output
    q = read_csv(workdir / "quality.csv")
    assert list(q.columns) == ["observation_id", "usability", "type", "coverage"]
    w = read_csv(workdir / "weights.csv")
    assert list(w.columns) == ["country", "w"] + [f"z_{m}" for m in cat.MAIN]


def test_fit_outputs(fit_dir):
    names = {p.name for p in fit_dir.iterdir()}
    assert {"fit.pkl", "draws_main.csv", "diagnostics.csv", "quality.csv",
            "manifest.json"} <= names
    manifest = json.loads((fit_dir / "manifest.json").read_text())
    assert manifest_of(fit_dir / "diagnostics.csv") == manifest["hash"]
    diag = read_csv(fit_dir / "diagnostics.csv")
    assert {"parameter", "rhat", "ess"} <= set(diag.columns)


def test_estimate_and_aggregate(workdir, fit_dir):
    res = invoke("estimate", fit_dir / "fit.pkl", "--period", "2010:2011", "--max-draws", 30,
                 "--out-dir", workdir / "est")
    assert res.exit_code == 0, res.output
    est = read_csv(workdir / "est" / "estimates.csv")
    assert list(est.columns) == ["scope", "cause", "median", "lo95", "hi95"]
    assert "global" in set(est["scope"])

    grouping = workdir / "grouping.csv"
    regions = read_csv(workdir / "data" / "regions.csv")
    pd.DataFrame({"country": regions["country"], "group": "all"}).to_csv(grouping, index=False)
    res = invoke("aggregate", fit_dir / "fit.pkl", "--grouping", grouping, "--period",
                 "2010:2010", "--max-draws", 20, "--out", workdir / "agg.csv",
                 "--draws-out", workdir / "agg_draws.csv")
    assert res.exit_code == 0, res.output
    agg = read_csv(workdir / "agg.csv")
    assert set(agg["scope"]) == {"all", "global"}
    g = agg.set_index(["scope", "cause"])["median"]
    assert g.loc["all"].to_numpy() == pytest.approx(g.loc["global"].to_numpy())
    draws = read_csv(workdir / "agg_draws.csv")
    assert len(draws) == 40


def test_validate_reuses_fit(workdir, fit_dir):
    data = workdir / "data"
    res = invoke("validate", data / "observations.csv", "--envelopes", data / "envelopes.csv",
                 "--regions", data / "regions.csv", "--scenario", "leave-out-developed",
                 "--full-fit", fit_dir / "fit.pkl", "--config", workdir / "fit.yaml",
                 "--out", workdir / "table.csv", "--long-out", workdir / "long.csv")
    assert res.exit_code == 0, res.output
    table = read_csv(workdir / "table.csv")
    assert table.columns[0] == "Cause" and len(table) == 7
    assert {"sdg_region", "cause", "mad", "mcse"} <= set(read_csv(workdir / "long.csv").columns)


def test_classify_codes(tmp_path):
    obs = tmp_path / "raw.csv"
    obs.write_text(
        "observation_id,country,year_start,year_end,source_kind,geo_level,cause,count,missing\n"
        "o1,X,2010,2010,CRVS,National,O72.1,4,0\n"
        "o1,X,2010,2010,CRVS,National,O15,3,0\n"
        "o1,X,2010,2010,CRVS,National,O98.7,2,0\n")
    res = invoke("classify", obs, "--out", tmp_path / "lab.csv",
                 "--excluded", tmp_path / "excl.csv")
    assert res.exit_code == 0, res.output
    lab = read_csv(tmp_path / "lab.csv")
    assert set(lab["cause"]) == {"HEM_post", "HYP"}
    assert read_csv(tmp_path / "excl.csv")["reason"].tolist() == ["HIV code"]


def test_unknown_config_key_exits_2(workdir):
    bad = workdir / "bad.yaml"
    bad.write_text("chians: 2\n")
    data = workdir / "data"
    res = CliRunner().invoke(main, ["fit", str(data / "observations.csv"), "--envelopes",
                                    str(data / "envelopes.csv"), "--config", str(bad),
                                    "--out-dir", str(workdir / "never")])
    assert res.exit_code == 2
    payload = json.loads(res.output.strip().splitlines()[-1])
    assert payload["error"] == "SchemaError"


def test_bad_observation_file_exits_2(tmp_path):
    p = tmp_path / "o.csv"
    p.write_text("observation_id,country\no1,X\n")
    res = CliRunner().invoke(main, ["classify", str(p), "--out", str(tmp_path / "x.csv")])
    assert res.exit_code == 2
    assert "SchemaError" in res.output


def test_bad_period_rejected(fit_dir, tmp_path):
    res = CliRunner().invoke(main, ["estimate", str(fit_dir / "fit.pkl"), "--period", "2017",
                                    "--out-dir", str(tmp_path)])
    assert res.exit_code == 2
