import json
import subprocess
import sys

import pytest

from excess_engine.cli import main
from excess_engine.config import dump_config, load_config
from excess_engine.drawsio import read_draws
from tests.conftest import QUICK


def test_print_config(capsys):
    assert main(["--print-config"]) == 0
    out = capsys.readouterr().out
    assert "[run]" in out and "seed = 20220505" in out


def test_console_script_entry_point():
    res = subprocess.run([sys.executable, "-m", "excess_engine.cli", "--print-config"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "[covariate]" in res.stdout


def test_missing_input_exit_2(tmp_path, capsys):
    code = main(["expected", "fit", "--history", str(tmp_path / "absent.csv"),
                 "--out", str(tmp_path / "x.csv")])
    assert code == 2
    assert "not found" in capsys.readouterr().err


def test_bad_config_exit_2(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[run]\nunknown = 1\n")
    assert main(["--config", str(cfg), "--print-config"]) == 2


def test_malformed_csv_exit_2(tmp_path):
    bad = tmp_path / "m.csv"
    bad.write_text("iso3,year,month,deaths\nPER,2015,13,5\n")
    assert main(["expected", "fit", "--history", str(bad), "--out", str(tmp_path / "x.csv")]) == 2


@pytest.fixture(scope="module")
def expected_csv(world, tmp_path_factory):
    config, _ = world
    w = config.parent
    out = tmp_path_factory.mktemp("cli") / "expected.csv"
    code = main(["expected", "fit", "--history", str(w / "mortality.csv"), "--temperature",
                 str(w / "temperature.csv"), "--gamma", "--out", str(out), "--seed", "5"])
    assert code == 0
    return out


def test_seasonal_verify(world, tmp_path):
    w = world[0].parent
    out = tmp_path / "s.json"
    assert main(["seasonal", "fit", "--history", str(w / "mortality.csv"), "--temperature",
                 str(w / "temperature.csv"), "--verify", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["poisson_trick"]["passed"]


def test_covariate_fit_and_diagnostics_exit_3(world, expected_csv, tmp_path):
    w = world[0].parent
    args = ["covariate", "fit", "--obs", str(w / "mortality.csv"), "--expected", str(expected_csv),
            "--covariates", str(w / "covariates.csv"), "--region", str(w / "region.csv")]
    quick = tmp_path / "quick.toml"
    quick.write_text("[run]\ndraws = 200\n[covariate]\nwarmup = 300\niterations = 600\nmin_ess = 100\n")
    assert main(args + ["--draws", str(tmp_path / "c.bin"), "--config", str(quick)]) == 0
    arrays, _ = read_draws(tmp_path / "c.bin")
    assert len(arrays["sigma_eps"]) == 200
    strict = tmp_path / "strict.toml"
    strict.write_text("[run]\ndraws = 100\n[covariate]\nwarmup = 10\niterations = 100\n"
                      "min_ess = 1000000.0\n")
    assert main(args + ["--draws", str(tmp_path / "d.bin"), "--config", str(strict)]) == 3


def test_subnational_fit(world, expected_csv, tmp_path):
    w = world[0].parent
    truth = world[1]
    share = sorted(c for c, k in truth["kind"].items() if k == "share")[0]
    code = main(["subnational", "fit", "--panel", str(w / "subnational.csv"), "--national",
                 str(w / "mortality.csv"), "--country", share, "--expected", str(expected_csv),
                 "--draws", str(tmp_path / "s.bin"), "--csv", str(tmp_path / "s.csv")])
    assert code == 0
    assert (tmp_path / "s.csv").stat().st_size > 0


def test_run_summarize_and_validate(world, world_run, tmp_path):
    result, cache = world_run
    w = world[0].parent
    code = main(["excess", "summarize", "--draws", str(result.out_dir / "draws.bin"), "--region",
                 str(w / "region.csv"), "--population", str(w / "population.csv"), "--out",
                 str(tmp_path / "sum.csv"), "--plots", str(tmp_path / "plots")])
    assert code == 0
    names = {p.name for p in (tmp_path / "plots").iterdir()}
    assert {"timeseries.png", "timeseries.csv", "cumulative.png", "rank_heatmap.png"} <= names
    quick = tmp_path / "q.toml"
    quick.write_text(dump_config(load_config(world[0], QUICK)))
    assert main(["run", "--config", str(quick), "--out", str(tmp_path / "run"),
                 "--cache", str(cache)]) == 0
    assert (tmp_path / "run" / "summary.csv").read_bytes() == \
        (result.out_dir / "summary.csv").read_bytes()
    out = tmp_path / "cv.json"
    code = main(["validate", "cv", "--scheme", "country", "--config", str(quick), "--cache",
                 str(cache), "--folds", "QAA", "--out", str(out)])
    assert code == 0
    assert json.loads(out.read_text())["n_cells"] == 24
