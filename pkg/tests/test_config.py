import pytest

from excess_engine.config import DEFAULTS, dump_config, input_path, load_config
from excess_engine.errors import ValidationError

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib


def test_defaults_roundtrip():
    cfg = load_config()
    text = dump_config(cfg)
    parsed = tomllib.loads(text)
    assert set(parsed) == set(DEFAULTS)
    assert parsed["run"] == DEFAULTS["run"]
    assert parsed["covariate"]["pc_alpha"] == 0.01


def test_file_and_overrides(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text('[run]\nseed = 7\n[inputs]\nmortality = "data/m.csv"\n')
    cfg = load_config(path, {"run": {"draws": 200}})
    assert cfg["run"]["seed"] == 7 and cfg["run"]["draws"] == 200
    assert cfg["inputs"]["mortality"] == str((tmp_path / "data" / "m.csv").resolve())


@pytest.mark.parametrize("text, match", [
    ("[run]\nsedd = 1\n", "unknown config key"),
    ("[run]\nseed = \"x\"\n", "must be a number"),
    ("[run]\npoint = \"mode\"\n", "point"),
    ("[expected]\ntrend = \"Cubic\"\n", "trend"),
    ("[covariate]\nchains = 1\niterations = 10\n", "chains x iterations"),
    ("[output]\nplots = 1\n", "true or false"),
    ("[run\n", "invalid TOML"),
    ("[run]\nseed = -1\n", "64-bit"),
])
def test_rejects_bad_config(tmp_path, text, match):
    path = tmp_path / "bad.toml"
    path.write_text(text)
    with pytest.raises(ValidationError, match=match):
        load_config(path)


def test_missing_config_and_inputs(tmp_path):
    with pytest.raises(ValidationError, match="not found"):
        load_config(tmp_path / "absent.toml")
    cfg = load_config(overrides={"inputs": {"mortality": str(tmp_path / "m.csv"),
                                            "temperature": str(tmp_path / "t.csv")}})
    assert input_path(cfg, "temperature") is None
    with pytest.raises(ValidationError, match="mortality"):
        input_path(cfg, "mortality")
