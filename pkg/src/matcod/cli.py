"""Command line interface.

Every subcommand checks its inputs before doing any work and writes CSV or
JSON outputs carrying the hash of a run manifest. Package errors end the
process with exit code 2 and a JSON object on stderr.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import logging
import os
import pickle
import sys
from pathlib import Path

import click
import pandas as pd
import yaml

from .exceptions import MatcodError, SchemaError
from .ingest import load_cause_map, load_regions
from .io import (RunManifest, classify_frame, draws_frame, quality_frame, read_csv,
                 read_envelopes, read_observations, read_quality_types, write_csv)
from .posterior import aggregate
from .quality import country_weights, prepare_observations, weights_frame
from .sampler import THREADS_ENV
from .simulate import DESK, ScenarioConfig, abundant_scenario, simulate_dataset, write_dataset

logger = logging.getLogger("matcod")

# Config file keys and their estimator parameter names.
ESTIMATOR_KEYS = {
    "chains": "chains", "warmup_iters": "warmup_iters", "sampling_iters": "sampling_iters",
    "seed": "seed", "target_accept": "target_accept", "max_tree_depth": "max_tree_depth",
    "threads": "threads", "metric": "metric", "phi_parameterization": "phi_parameterization",
    "country_effects": "country_effects", "intercept_scale": "intercept_scale",
    "fit_subcauses": "fit_subcauses",
}
SCENARIO_FLAGS = {"leave-out-studies", "leave-out-developed", "leave-out-20-percent",
                  "no-exclusion"}


def fail(exc, code=2):
    if isinstance(exc, MatcodError):
        payload = exc.to_dict()
    else:
        payload = {"error": type(exc).__name__, "message": str(exc)}
    click.echo(json.dumps(payload), err=True)
    sys.exit(code)


def guarded(fn):
    """Turn package and input errors into exit code 2 with JSON on stderr."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (MatcodError, FileNotFoundError, KeyError, ValueError, TypeError) as exc:
            fail(exc)
    return wrapper


def load_config(path):
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise SchemaError(f"{path}: config must be a mapping of keys to values")
    unknown = set(data) - set(ESTIMATOR_KEYS) - {"scenario"}
    if unknown:
        raise SchemaError(f"{path}: unknown config keys {sorted(unknown)}")
    return data


def build_estimator(config, **overrides):
    from .estimator import CauseOfDeathModel

    params = {ESTIMATOR_KEYS[k]: v for k, v in config.items() if k in ESTIMATOR_KEYS}
    params.update({k: v for k, v in overrides.items() if v is not None})
    if params.get("threads") is None and os.environ.get(THREADS_ENV):
        params["threads"] = int(os.environ[THREADS_ENV])
    return CauseOfDeathModel(**params)


def parse_period(text):
    try:
        a, b = (int(p) for p in text.split(":"))
    except ValueError:
        raise click.BadParameter(f"expected START:END, got {text!r}") from None
    if b < a:
        raise click.BadParameter("period end precedes its start")
    return a, b


def apply_quality_types(records, path):
    types = read_quality_types(path)
    missing = [r.observation_id for r in records if r.observation_id not in types]
    if missing:
        raise SchemaError(f"{path}: no type for observations {missing[:5]}")
    return [dataclasses.replace(r, type_override=int(types[r.observation_id])) for r in records]


def load_inputs(observations, envelopes, regions, quality=None):
    records = read_observations(observations)
    env = read_envelopes(envelopes)
    reg = load_regions(regions)
    if quality is not None:
        records = apply_quality_types(records, quality)
    return records, env, reg


def load_fit(path):
    with open(path, "rb") as fh:
        est = pickle.load(fh)
    if not hasattr(est, "fits_"):
        raise SchemaError(f"{path}: not a fitted model")
    return est


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Estimate maternal cause-of-death distributions."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("observations", type=click.Path(exists=True, dir_okay=False))
@click.option("--cause-map", type=click.Path(exists=True, dir_okay=False),
              help="ICD-10 code table (packaged table by default).")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--excluded", type=click.Path(dir_okay=False),
              help="Where to write the codes routed out of the model.")
@guarded
def classify(observations, cause_map, out, excluded):
    """Map ICD-10 codes in the cause column to category labels."""
    df = read_csv(observations, dtype={"observation_id": str, "country": str, "cause": str})
    labelled, excl = classify_frame(df, load_cause_map(cause_map))
    manifest = RunManifest("classify", [observations, cause_map])
    write_csv(labelled, out, manifest.hash)
    if excluded:
        write_csv(excl, excluded, manifest.hash)
    click.echo(f"{labelled['observation_id'].nunique()} observations, "
               f"{len(excl)} excluded code rows")


@main.command()
@click.argument("observations", type=click.Path(exists=True, dir_okay=False))
@click.option("--envelopes", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--regions", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Per-observation usability, type and coverage.")
@click.option("--weights", type=click.Path(dir_okay=False),
              help="Where to write per-country coverage weights.")
@guarded
def quality(observations, envelopes, regions, out, weights):
    """Apply the data adjustments and assign quality types."""
    records = read_observations(observations)
    env = read_envelopes(envelopes)
    adjusted, profiles = prepare_observations(records, env)
    manifest = RunManifest("quality", [observations, envelopes, regions])
    write_csv(quality_frame(profiles), out, manifest.hash)
    if weights:
        reg = load_regions(regions)
        universe = [c for c in env.countries() if c in reg]
        write_csv(weights_frame(country_weights(adjusted, env, universe)), weights,
                  manifest.hash)
    counts = quality_frame(profiles)["type"].value_counts().sort_index()
    click.echo(" ".join(f"type{t}={n}" for t, n in counts.items()))


@main.command()
@click.argument("observations", type=click.Path(exists=True, dir_okay=False))
@click.option("--envelopes", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--regions", type=click.Path(exists=True, dir_okay=False))
@click.option("--quality", "quality_path", type=click.Path(exists=True, dir_okay=False),
              help="Quality types from the quality subcommand.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--chains", type=int)
@click.option("--warmup", type=int)
@click.option("--samples", type=int)
@click.option("--seed", type=int)
@click.option("--threads", type=int)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@guarded
def fit(observations, envelopes, regions, quality_path, config_path, chains, warmup, samples,
        seed, threads, out_dir):
    """Fit the main model and the three subcause models.

    Exits with code 1 when any R-hat or ESS check fails.
    """
    config = load_config(config_path)
    est = build_estimator(config, chains=chains, warmup_iters=warmup, sampling_iters=samples,
                          seed=seed, threads=threads)
    records, env, reg = load_inputs(observations, envelopes, regions, quality_path)
    manifest = RunManifest("fit", [observations, envelopes, regions, quality_path, config_path],
                           config=est.get_params(deep=False), seed=est.seed)
    est.fit(records, envelopes=env, regions=reg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "fit.pkl", "wb") as fh:
        pickle.dump(est, fh)
    for target, f in est.fits_.items():
        write_csv(draws_frame(f.draws), out / f"draws_{target}.csv", manifest.hash)
    write_csv(est.diagnostics_, out / "diagnostics.csv", manifest.hash)
    write_csv(quality_frame(est.profiles_), out / "quality.csv", manifest.hash)
    manifest.write(out / "manifest.json")
    divergent = sum(f.draws.divergence_count for f in est.fits_.values())
    click.echo(f"converged={est.converged_} divergences={divergent}")
    if not est.converged_:
        sys.exit(1)


@main.command()
@click.argument("fit_path", metavar="FIT", type=click.Path(exists=True, dir_okay=False))
@click.option("--period", default="2009:2017", show_default=True, callback=lambda c, p, v:
              parse_period(v))
@click.option("--max-draws", type=int, help="Thin the posterior to this many draws.")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@guarded
def estimate(fit_path, period, max_draws, out_dir):
    """Country, SDG-region and global cause distributions for a period."""
    est = load_fit(fit_path)
    manifest = RunManifest("estimate", [fit_path], config={"period": period,
                                                           "max_draws": max_draws})
    main_df, sub_df = est.predict(period=period, max_draws=max_draws)
    out = Path(out_dir)
    write_csv(main_df, out / "estimates.csv", manifest.hash)
    write_csv(sub_df, out / "subestimates.csv", manifest.hash)
    manifest.write(out / "estimate_manifest.json")
    click.echo(f"{main_df['scope'].nunique()} scopes written")


@main.command("aggregate")
@click.argument("fit_path", metavar="FIT", type=click.Path(exists=True, dir_okay=False))
@click.option("--grouping", type=click.Path(exists=True, dir_okay=False),
              help="CSV with columns country,group; SDG regions by default.")
@click.option("--period", default="2009:2017", show_default=True, callback=lambda c, p, v:
              parse_period(v))
@click.option("--max-draws", type=int)
@click.option("--draws-out", type=click.Path(dir_okay=False),
              help="Also write the aggregate proportion draws.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@guarded
def aggregate_cmd(fit_path, grouping, period, max_draws, draws_out, out):
    """Sum country deaths draw by draw over groups and the world."""
    est = load_fit(fit_path)
    countries = est.prediction_countries(period)
    if grouping:
        g = read_csv(grouping, required=["country", "group"], dtype=str)
        groups = dict(zip(g["country"], g["group"]))
        countries = [c for c in countries if c in groups]
    else:
        groups = {c: est.regions_.sdg_region[c] for c in countries}
    manifest = RunManifest("aggregate", [fit_path, grouping], config={"period": period})
    dists = est.country_year_distributions(countries, period, max_draws)
    aggs = aggregate(dists, groups, period, countries)
    write_csv(pd.concat([a.summary for a in aggs.values()], ignore_index=True), out,
              manifest.hash)
    if draws_out:
        frames = []
        for scope, a in aggs.items():
            df = pd.DataFrame(a.draws, columns=list(a.categories))
            df.insert(0, "draw", range(len(df)))
            df.insert(0, "scope", scope)
            frames.append(df)
        write_csv(pd.concat(frames, ignore_index=True), draws_out, manifest.hash)
    click.echo(f"{len(aggs)} aggregates written")


@main.command()
@click.argument("observations", type=click.Path(exists=True, dir_okay=False))
@click.option("--envelopes", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--regions", type=click.Path(exists=True, dir_okay=False))
@click.option("--scenario", required=True, type=click.Choice(sorted(SCENARIO_FLAGS)))
@click.option("--full-fit", type=click.Path(exists=True, dir_okay=False),
              help="Reuse a fit to all the data.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Causes by SDG region table of mean absolute differences.")
@click.option("--long-out", type=click.Path(dir_okay=False),
              help="Also write the long table with Monte Carlo errors.")
@guarded
def validate(observations, envelopes, regions, scenario, full_fit, config_path, seed, out,
             long_out):
    """Refit without part of the data and compare country estimates."""
    from .validation import run_validation

    config = load_config(config_path)
    est = build_estimator(config, seed=seed)
    records, env, reg = load_inputs(observations, envelopes, regions)
    full = load_fit(full_fit) if full_fit else None
    manifest = RunManifest("validate", [observations, envelopes, regions, full_fit,
                                        config_path],
                           config={**est.get_params(deep=False), "scenario": scenario},
                           seed=est.seed)
    report = run_validation(scenario, {"records": records, "envelopes": env, "regions": reg},
                            est, full_fit=full)
    write_csv(report.table(), out, manifest.hash)
    if long_out:
        write_csv(report.mad, long_out, manifest.hash)
    click.echo(f"{scenario}: {len(report.excluded)} observations left out")


@main.command()
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="YAML file whose 'scenario' mapping sets ScenarioConfig fields.")
@click.option("--abundant", is_flag=True, help="Large counts, no missingness, grey sources.")
@guarded
def simulate(out_dir, seed, config_path, abundant):
    """Write a synthetic input file set with a ground-truth sidecar."""
    fields = load_config(config_path).get("scenario", {}) if config_path else {}
    config = abundant_scenario(**fields) if abundant else (
        ScenarioConfig.from_dict(fields) if fields else DESK)
    dataset = simulate_dataset(config, seed)
    write_dataset(dataset, out_dir, config, seed)
    click.echo(f"{len(dataset['records'])} observations written to {out_dir}")


if __name__ == "__main__":
    main()
