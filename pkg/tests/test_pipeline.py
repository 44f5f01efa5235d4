import csv
import shutil

import numpy as np
import pytest

from excess_engine.data_model import Tier
from excess_engine.drawsio import read_draws
from excess_engine.pipeline import STAGES, StageCache, load_inputs, run_pipeline, stage_aggregate
from excess_engine.config import load_config
from tests.conftest import QUICK


def _summary(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def test_routes_follow_tiers(world_run):
    result, _ = world_run
    for c, tier in result.tiers.items():
        route = result.routes[c]
        if tier is Tier.FULL:
            assert route == "observed"
        elif tier is Tier.NO_DATA:
            assert route == "covariate"
        elif tier is Tier.PARTIAL:
            assert route.startswith("benchmarked")
    kinds = {r.split()[0] for r in result.routes.values()}
    assert {"observed", "covariate", "benchmarked", "share", "annual", "constrained"} <= kinds


def test_full_country_uses_observed_counts(world, world_run):
    result, _ = world_run
    arrays, meta = read_draws(result.out_dir / "draws.bin")
    codes = meta["labels"]["country"]
    inputs = load_inputs(load_config(world[0]))
    for i, c in enumerate(codes):
        s = inputs.series[c]
        if s.tier is Tier.FULL:
            np.testing.assert_array_equal(arrays["Y"][i], np.tile(s.counts, (arrays["Y"].shape[1], 1)))
        np.testing.assert_allclose(arrays["delta"][i], arrays["Y"][i] - arrays["E"][i], atol=1e-9)


def test_every_country_once_per_period(world, world_run):
    result, _ = world_run
    rows = _summary(result.out_dir / "summary.csv")
    inputs = load_inputs(load_config(world[0]))
    seen = {}
    for r in rows:
        if r["level"] == "country":
            key = (r["key"], r["period"])
            seen[key] = seen.get(key, 0) + 1
    periods = {p for _, p in seen}
    assert set(seen.values()) == {1}
    assert {c for c, _ in seen} == set(inputs.countries)
    assert len(seen) == len(inputs.countries) * len(periods)
    assert "2020-01" in periods and "total" in periods


def test_group_additivity_per_draw(world, world_run):
    result, _ = world_run
    ex = result.results["aggregate"]["excess"]
    inputs = load_inputs(load_config(world[0]))
    arrays, _ = read_draws(result.out_dir / "draws.bin")
    np.testing.assert_array_equal(arrays["delta"], ex.delta)
    world_total = ex.group_sum(ex.countries)
    for lookup in (inputs.region, inputs.income):
        parts = sum(ex.group_sum([c for c in ex.countries if lookup[c] == g])
                    for g in sorted(set(lookup.values())))
        np.testing.assert_allclose(parts, world_total, rtol=0, atol=1e-6)


def test_outputs_written(world_run):
    result, _ = world_run
    names = {p.name for p in result.out_dir.iterdir()}
    for f in ("summary.csv", "rates.csv", "ratios.csv", "ranks.csv", "expected.csv", "routes.csv",
              "diagnostics.csv", "draws.bin", "manifest.json", "config.toml"):
        assert f in names
    assert result.cache.executed == list(STAGES)


def test_cache_hits_and_invalidation(world, world_run, tmp_path):
    result, cache = world_run
    config, _ = world
    copy = tmp_path / "w"
    shutil.copytree(config.parent, copy)
    again = run_pipeline(copy / "run.toml", tmp_path / "r1", cache_dir=cache, overrides=QUICK)
    assert again.cache.executed == [] and again.cache.cached == list(STAGES)
    assert (tmp_path / "r1" / "summary.csv").read_bytes() == \
        (result.out_dir / "summary.csv").read_bytes()
    # touch one covariate value: only the covariate stage and its dependants re-run
    path = copy / "covariates.csv"
    lines = path.read_text().splitlines()
    head, first = lines[0], lines[1].split(",")
    first[-1] = str(float(first[-1]) + 0.01)
    path.write_text("\n".join([head, ",".join(first)] + lines[2:]) + "\n")
    changed = run_pipeline(copy / "run.toml", tmp_path / "r2", cache_dir=cache, overrides=QUICK)
    assert changed.cache.cached == ["expected", "seasonal", "gamma"]
    assert changed.cache.executed == ["covariate", "predict", "subnational", "aggregate"]


def test_aggregate_stage_is_deterministic(world, world_run):
    result, _ = world_run
    inputs = load_inputs(load_config(world[0], QUICK))
    res = result.results
    a = stage_aggregate(inputs, res["ydraws"], res["gamma"])
    b = stage_aggregate(inputs, res["ydraws"], res["gamma"])
    assert a["summary"].rows == b["summary"].rows
    np.testing.assert_array_equal(a["excess"].delta, b["excess"].delta)


def test_cache_key_depends_on_parts(tmp_path):
    cache = StageCache(tmp_path)
    calls = []
    cache.run("expected", {"a": 1}, lambda: calls.append(1) or 5)
    assert StageCache(tmp_path).run("expected", {"a": 1}, lambda: calls.append(2) or 6) == 5
    assert StageCache(tmp_path).run("expected", {"a": 2}, lambda: calls.append(3) or 7) == 7
    assert calls == [1, 3]
