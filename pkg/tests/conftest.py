"""Shared fixtures: a small synthetic world and one pipeline run over it."""

import numpy as np
import pytest

from excess_engine.synthetic import write_world

# enough iterations for the diagnostics gates, small enough for the unit suite
QUICK = {
    "run": {"draws": 400},
    "covariate": {"warmup": 400, "iterations": 1000},
    "subnational": {"warmup": 300, "iterations": 600, "constrained_iterations": 8000},
    "expected": {"gamma_samples": 4000},
    "output": {"plots": False},
}


@pytest.fixture(scope="session")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("world")
    config, truth = write_world(root, seed=5)
    return config, truth


@pytest.fixture(scope="session")
def world_run(world, tmp_path_factory):
    from excess_engine.pipeline import run_pipeline
    config, _ = world
    out = tmp_path_factory.mktemp("run")
    cache = tmp_path_factory.mktemp("cache")
    result = run_pipeline(config, out, cache_dir=cache, overrides=QUICK)
    return result, cache


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record ``(criterion, passed, detail, elapsed, budget)`` for the summary."""
    store = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(n, passed, detail, elapsed, budget):
        ok = passed and elapsed < budget
        store[n] = (ok, detail, elapsed, budget)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(ACCEPTANCE, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        ok, detail, elapsed, budget = store[n]
        terminalreporter.write_line(
            f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  ({elapsed:.1f}s / {budget:.0f}s)")
