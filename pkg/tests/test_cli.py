import json
import subprocess
import sys

import numpy as np
import pytest

from pvtrack.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, g_grid, main, parse_grid
from pvtrack.csvio import METRICS_COLUMNS, read_columns, read_frequency, read_metrics, read_trace
from pvtrack.pv_model import EnvState, cs6p_250p_array, derive_base_params, mpp

SHORT = ["--set", "sim.duration=60"]


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def test_run_bundled_sunny(tmp_path, capsys):
    out = tmp_path / "sunny"
    assert main(["run", "--config", "sunny", "--out", str(out), *SHORT]) == EXIT_OK
    assert {"trace.csv", "controller.csv", "estimator.csv", "metrics.csv", "config.json"} <= set(files(out))
    tr = read_trace(out / "trace.csv")
    assert len(tr["t"]) == 1200
    rows = read_metrics(out / "metrics.csv")
    assert len(rows) == 1 and rows[0]["scenario"] == "sunny"
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["sim"]["duration"] == 60
    assert "sunny" in capsys.readouterr().out


def test_echoed_config_reproduces_run(tmp_path):
    a = tmp_path / "a"
    assert main(["run", "--config", "setpoint_steps", "--out", str(a), "--set", "sim.duration=20"]) == EXIT_OK
    b = tmp_path / "b"
    assert main(["run", "--config", str(a / "config.json"), "--out", str(b)]) == EXIT_OK
    assert files(a) == files(b)


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "not found" in capsys.readouterr().err


@pytest.mark.parametrize("bad", [["--set", "sim.nope=1"], ["--set", "sim.duration"], ["--set", "fppt.Vstep_min=0"]])
def test_bad_overrides_exit_2(tmp_path, bad):
    assert main(["run", "--config", "sunny", "--out", str(tmp_path / "o"), *bad]) == EXIT_CONFIG


def test_invalid_json_exits_2(tmp_path):
    f = tmp_path / "c.json"
    f.write_text("{not json")
    assert main(["validate", "--config", str(f)]) == EXIT_CONFIG


def test_runtime_failure_exits_1(tmp_path, monkeypatch):
    import pvtrack.cli as cli

    def boom(*a, **k):
        raise RuntimeError("solver blew up")

    monkeypatch.setattr(cli, "run_scenario", boom)
    assert main(["run", "--config", "sunny", "--out", str(tmp_path / "o"), *SHORT]) == EXIT_RUNTIME


def test_seed_override_byte_identical(tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        assert main(["run", "--config", "setpoint_steps", "--out", str(out), "--seed", "7",
                     "--set", "sim.duration=30"]) == EXIT_OK
        outs.append(files(out))
    assert outs[0] == outs[1]
    assert json.loads(outs[0]["config.json"])["sim"]["seed"] == 7


def test_different_seeds_differ(tmp_path):
    for s in ("1", "2"):
        assert main(["run", "--config", "setpoint_steps", "--out", str(tmp_path / s), "--seed", s,
                     "--set", "sim.duration=10"]) == EXIT_OK
    assert (tmp_path / "1" / "trace.csv").read_bytes() != (tmp_path / "2" / "trace.csv").read_bytes()


# validate --------------------------------------------------------------------------


def test_validate_bundled_ok(capsys):
    for name in ("sunny", "cloudy", "setpoint_steps", "droop_rocof"):
        assert main(["validate", "--config", name]) == EXIT_OK
        assert capsys.readouterr().out.strip() == "OK"


def test_validate_names_rate_violation(capsys):
    assert main(["validate", "--config", "sunny", "--set", "sim.Tstep=0.27"]) == EXIT_CONFIG
    assert "Tstep / Ts" in capsys.readouterr().out


def test_validate_names_short_profile(capsys):
    code = main(["validate", "--config", "setpoint_steps", "--set",
                 'sim.irradiance={"kind": "series", "t": [0, 30], "values": [800, 800]}'])
    assert code == EXIT_CONFIG
    assert "spans [0, 30]" in capsys.readouterr().out


def test_validate_droop_trace_too_short(capsys):
    assert main(["validate", "--config", "droop_rocof", "--set", "sim.duration=500"]) == EXIT_CONFIG
    assert "frequency trace spans" in capsys.readouterr().out


# curves ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def curves(tmp_path_factory):
    out = tmp_path_factory.mktemp("curves")
    assert main(["curves", "--out", str(out)]) == EXIT_OK
    return read_columns(out / "curves.csv"), read_columns(out / "mpp.csv")


def test_default_grid_has_25_levels(curves):
    fam, mp = curves
    np.testing.assert_allclose(mp["G"], np.arange(1, 26) * 0.04)
    assert len(np.unique(fam["G"])) == 25
    assert len(g_grid()) == 25


def test_curve_maxima_match_closed_form(curves):
    fam, mp = curves
    sheet = cs6p_250p_array()
    base = derive_base_params(sheet)
    for G, pmp in zip(mp["G"], mp["Pmp"]):
        sweep_max = fam["P"][fam["G"] == G].max()
        assert sweep_max == pytest.approx(pmp, rel=1e-3)
        assert pmp == pytest.approx(mpp(base, EnvState(G, 1.0), sheet)[2], rel=1e-12)


def test_kph_curves_coincide_below_mpp_voltage(curves):
    fam, mp = curves
    v_lim = mp["Vmp"].min()
    spread = 0.0
    for V in np.unique(fam["V"][fam["V"] < v_lim]):
        k = fam["Kph"][fam["V"] == V]
        spread = max(spread, k.max() - k.min())
    assert spread < 0.02


def test_curves_power_consistent(curves):
    fam, _ = curves
    np.testing.assert_allclose(fam["P"], fam["V"] * fam["I"], rtol=1e-12)
    assert np.all(fam["Kph"] <= 1.0 + 1e-12)


# fixtures / sweep ---------------------------------------------------------------------------


def test_fixtures_written(tmp_path):
    assert main(["fixtures", "--out", str(tmp_path)]) == EXIT_OK
    f = read_frequency(tmp_path / "rocof_2hz_59.csv")
    assert f.values.min() == pytest.approx(59.0)
    rate = np.diff(f.values) / np.diff(f.t)
    assert rate.min() == pytest.approx(-2.0)
    f1 = read_frequency(tmp_path / "rocof_1hz_58.csv")
    assert f1.values.min() == pytest.approx(58.0)
    assert (np.diff(f1.values) / np.diff(f1.t)).min() == pytest.approx(-1.0)
    assert (tmp_path / "configs" / "sunny.json").is_file()


def test_parse_grid_cross_product():
    combos = parse_grid(["fppt.dP_max=4000,5000", "sim.seed=1,2,3"])
    assert len(combos) == 6 and combos[0] == {"fppt.dP_max": 4000, "sim.seed": 1}


def test_sweep_one_directory_per_combination(tmp_path):
    code = main(["sweep", "--config", "setpoint_steps", "--out", str(tmp_path), "--set", "sim.duration=10",
                 "--grid", "sim.seed=1,2", "--grid", "fppt.dP_max=4000,5000"])
    assert code == EXIT_OK
    dirs = sorted(p.name for p in tmp_path.iterdir() if p.is_dir())
    assert len(dirs) == 4
    rows = read_metrics(tmp_path / "metrics.csv")
    assert sorted(r["scenario"] for r in rows) == dirs
    assert tuple(read_columns(tmp_path / "metrics.csv", text_columns=["scenario"])) == METRICS_COLUMNS


def test_sweep_parallel_matches_serial(tmp_path):
    args = ["--config", "setpoint_steps", "--set", "sim.duration=10", "--grid", "sim.seed=1,2"]
    assert main(["sweep", "--out", str(tmp_path / "s"), *args]) == EXIT_OK
    assert main(["sweep", "--out", str(tmp_path / "p"), "--jobs", "2", *args]) == EXIT_OK
    for d in ("sim.seed=1", "sim.seed=2"):
        assert files(tmp_path / "s" / d) == files(tmp_path / "p" / d)


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "pvtrack", "validate", "--config", "sunny"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip() == "OK"
