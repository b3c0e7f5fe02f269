from __future__ import annotations

import json
import math
import re

import pytest

from slowfast.errors import ConfigError
from slowfast.harness.cli import main
from slowfast.harness.config import config_hash, parse_config
from slowfast.harness.experiments import (
    convergence_cell,
    decreasing_verdict,
    fit_slope,
    run_convergence_experiment,
    run_ldp_experiment,
    stream_audit,
)
from slowfast.harness.registry import RunRecord
from slowfast.harness.report import emit_report

BOX = {"kind": "indicator", "set": {"kind": "box", "lower": [-1.0], "upper": [1.0]}}
SMALL = {
    "model": {"name": "linear_test"},
    "operators": {"A1": BOX},
    "sim": {"T": 0.5, "x0": 0.5, "seed": 3},
    "experiment": {"kind": "avg_theta_zero", "deltas": [0.1, 0.01], "n_particles": 8,
                   "repetitions": 4, "dt": 0.05},
}
TRIVIAL = {
    "model": {"name": "linear_test",
              "params": {"a": 0.0, "kappa": 0.0, "c": 0.0, "g": 0.0, "s1": 0.0, "s2": 0.0}},
    "sim": {"T": 1.0, "x0": 0.3},
    "experiment": {"kind": "avg_theta_pos", "deltas": [1.0], "n_particles": 2,
                   "repetitions": 2, "dt": 0.1},
}


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def errors_record(deltas, errs, stderrs=None):
    stderrs = stderrs or [0.0] * len(errs)
    slope, r2 = fit_slope(deltas, errs, stderrs)
    rec = RunRecord.new({}, config_hash({}), 0, "avg_theta_pos", deterministic=True)
    rows = [[d, math.sqrt(d), 0.5, 4, e, s] for d, e, s in zip(deltas, errs, stderrs)]
    rec.results = {"tables": {"errors": {
        "columns": ["delta", "epsilon", "gamma", "n_mc", "err_mean", "err_stderr"], "rows": rows}},
        "slope": slope, "r2": r2, "verdicts": {"slope_ge_0.2": True}}
    return rec


# -- config -------------------------------------------------------------------------------------

def test_config_hash_ignores_key_order():
    permuted = {"experiment": dict(reversed(list(SMALL["experiment"].items()))),
                "sim": {"seed": 3, "x0": 0.5, "T": 0.5},
                "operators": SMALL["operators"], "model": SMALL["model"]}
    assert config_hash(permuted) == config_hash(SMALL)
    assert config_hash({**SMALL, "sim": {"T": 0.5, "x0": 0.5, "seed": 4}}) != config_hash(SMALL)


@pytest.mark.parametrize("bad", [
    {"extra": {}},
    {"sim": {"T": 1.0, "dtt": 0.1}},
    {"experiment": {"kind": "nope"}},
    {"experiment": {"kind": "avg_theta_pos", "epsilon_rule": {"power": 1.5}}},
    {"experiment": {"kind": "ldp", "delta_power": 1.0}},
    {"model": {"name": "unknown"}},
    {"operators": {"A1": {"kind": "indicator", "set": {"kind": "box", "lower": [1.0],
                                                        "upper": [0.0]}}}},
])
def test_config_rejections(bad):
    with pytest.raises(ConfigError):
        parse_config(bad)


def test_seed_flag_overrides_config():
    rc = parse_config(SMALL, seed=11)
    assert rc.sim["seed"] == 11 and rc.raw["sim"]["seed"] == 11


# -- registry and reports ------------------------------------------------------------------------

def test_registry_round_trip(tmp_path):
    rec = errors_record([0.1, 0.01], [0.2, math.inf])
    rec.manifest = {"streams": {"cell0": {"full": "a", "averaged": "a"}}}
    rec.metrics = {"wall_clock": 1.5, "steps": 10}
    rec.save(tmp_path / "run.json")
    back = RunRecord.load(tmp_path / "run.json")
    assert back == rec


def test_empty_table_report(tmp_path):
    rec = RunRecord.new({}, config_hash({}), 0, "avg_theta_pos", deterministic=True)
    rec.results = {"tables": {"errors": {"columns": ["delta", "err_mean"], "rows": []}}}
    emit_report(rec, tmp_path)
    assert (tmp_path / "errors.csv").read_text() == "delta,err_mean\n"
    assert not (tmp_path / "plot.svg").exists()
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert any("no data" in n for n in summary["notes"])


def test_four_point_report_is_consistent(tmp_path):
    rec = errors_record([1e-1, 1e-2, 1e-3, 1e-4], [0.3, 0.1, 0.04, 0.02], [0.01] * 4)
    emit_report(rec, tmp_path)
    svg = (tmp_path / "plot.svg").read_text()
    assert svg.count('class="marker"') == 4
    assert svg.count('class="fit"') == 1
    footer = (tmp_path / "errors.csv").read_text().splitlines()[-1]
    slope = float(re.fullmatch(r"# fitted_slope=(.*)", footer).group(1))
    assert slope == json.loads((tmp_path / "summary.json").read_text())["slope"]


def test_reemit_is_byte_identical(tmp_path):
    rec = errors_record([1e-1, 1e-2, 1e-3], [0.3, 0.1, 0.04])
    emit_report(rec, tmp_path / "a")
    emit_report(rec, tmp_path / "b")
    for name in ("errors.csv", "plot.svg", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fit_slope_weighting():
    deltas = [1e-1, 1e-2, 1e-3]
    errs = [1e-1 ** 0.5, 1e-2 ** 0.5, 1e-3 ** 0.5]
    slope, r2 = fit_slope(deltas, errs, [0.0] * 3)
    assert slope == pytest.approx(0.5, abs=1e-12) and r2 == pytest.approx(1.0)
    noisy = errs[:2] + [0.1]
    full, _ = fit_slope(deltas, noisy, [0.0] * 3)
    halved, _ = fit_slope(deltas, noisy, [0, 0, 0.05])
    assert halved > full
    assert fit_slope([0.1], [0.2], [0.0]) == (None, None)


def test_decreasing_verdict():
    rows = [{"delta": 0.1, "err_mean": 1.0, "err_stderr": 0.1},
            {"delta": 0.01, "err_mean": 0.5, "err_stderr": 0.1}]
    assert decreasing_verdict(rows)
    rows[1]["err_stderr"] = 0.3
    assert not decreasing_verdict(rows)


# -- experiments --------------------------------------------------------------------------------------

def test_trivial_single_cell_slope_undefined(tmp_path):
    rec = run_convergence_experiment(parse_config(TRIVIAL), deterministic=True)
    assert rec.results["cells"][0]["err_mean"] == 0.0
    assert rec.results["slope"] is None
    emit_report(rec, tmp_path)
    assert "# fitted_slope=undefined" in (tmp_path / "errors.csv").read_text()
    assert not (tmp_path / "plot.svg").exists()


def test_small_sweep_and_stream_audit():
    rc = parse_config(SMALL)
    rec = run_convergence_experiment(rc, deterministic=True)
    rows = rec.results["tables"]["errors"]["rows"]
    assert [r[0] for r in rows] == [0.1, 0.01]
    assert all(r[4] > 0 for r in rows)
    assert stream_audit(rec)
    rec.manifest["streams"]["cell0"]["averaged"] = "philox:other"
    assert not stream_audit(rec)


def test_cell_is_reproducible():
    cell = parse_config(SMALL).grid.cells()[0]
    a, b = convergence_cell(SMALL, cell, 0), convergence_cell(SMALL, cell, 0)
    a.pop("wall_clock"), b.pop("wall_clock")
    assert a == b
    assert a["full_slow_stream"] == a["averaged_slow_stream"]


def test_theta_pos_cells_use_uncoupled_limit():
    cfg = {**SMALL, "experiment": {**SMALL["experiment"], "kind": "avg_theta_pos"}}
    row = convergence_cell(cfg, parse_config(cfg).grid.cells()[0], 0)
    assert row["averaged_slow_stream"] == "none" and row["status"] == "ok"


def test_ldp_experiment_rates():
    cfg = {"model": {"name": "linear_test", "params": {"s1": 1.0}},
           "sim": {"T": 1.0, "dt": 0.1, "x0": 0.0},
           "experiment": {"kind": "ldp", "targets": [{"id": "base", "kind": "baseline"},
                                                     {"id": "up", "kind": "offset", "value": 0.5}]}}
    rec = run_ldp_experiment(parse_config(cfg), run_probe=False, deterministic=True)
    rows = {r[0]: r for r in rec.results["tables"]["rates"]["rows"]}
    assert rows["base"][1] == 0.0
    assert 0 < rows["up"][1] < math.inf and rows["up"][3]


# -- command line ----------------------------------------------------------------------------------------

def test_cli_unknown_key_exit_2(tmp_path):
    path = write(tmp_path, {"sim": {"bogus": 1}})
    assert main(["check", "--config", path, "--out", str(tmp_path / "o")]) == 2


def test_cli_bad_flag_exit_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["check", "--no-such-flag"])
    assert exc.value.code == 2


def test_cli_check_exit_codes(tmp_path):
    ok = write(tmp_path, {"model": {"name": "linear_test"}}, "ok.json")
    assert main(["check", "--config", ok, "--out", str(tmp_path / "a")]) == 0
    assert json.loads((tmp_path / "a" / "assumptions.json").read_text())["flags"]["dissipative"]
    bad = write(tmp_path, {"model": {"name": "ou_frozen", "params": {"beta": -1.0}}}, "bad.json")
    assert main(["check", "--config", bad, "--out", str(tmp_path / "b")]) == 3
    assert main(["frozen", "--config", bad, "--out", str(tmp_path / "c")]) == 3


def test_cli_picard_divergence_exit_4(tmp_path):
    cfg = {"model": {"name": "linear_test", "params": {"c": 40.0, "g": 40.0, "beta": 1.0}},
           "sim": {"T": 1.0, "dt": 0.01, "delta": 1.0, "epsilon": 1.0},
           "experiment": {"kind": "picard", "n_particles": 4}}
    assert main(["converge", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 4


def test_cli_converge_and_report(tmp_path, capsys):
    path = write(tmp_path, SMALL)
    out = tmp_path / "run"
    assert main(["converge", "--config", path, "--out", str(out), "--deterministic"]) == 0
    assert "stream_audit: PASS" in capsys.readouterr().out
    header = (out / "errors.csv").read_text().splitlines()[0]
    assert header == "delta,epsilon,gamma,n_mc,err_mean,err_stderr"
    again = tmp_path / "again"
    assert main(["report", "--run", str(out / "run.json"), "--out", str(again),
                 "--deterministic"]) == 0
    assert (again / "errors.csv").read_bytes() == (out / "errors.csv").read_bytes()


def test_cli_assert_mode_exit_5(tmp_path):
    # two nearly equal deltas cannot separate by 2 stderr
    cfg = {**SMALL, "experiment": {**SMALL["experiment"], "deltas": [0.1, 0.099]}}
    path = write(tmp_path, cfg)
    assert main(["converge", "--config", path, "--out", str(tmp_path / "o"), "--assert"]) == 5


def test_cli_other_subcommands(tmp_path):
    cfg = {"model": {"name": "linear_test"},
           "sim": {"T": 0.2, "dt": 0.01, "delta": 0.01, "n_particles": 8, "x0": 0.5}}
    path = write(tmp_path, cfg)
    assert main(["simulate", "--config", path, "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "trajectory.csv").exists()
    assert main(["average", "--config", path, "--out", str(tmp_path / "a")]) == 0
    assert json.loads((tmp_path / "a" / "summary.json").read_text())["mode"] == "theta_zero"
    ldp = {"model": {"name": "linear_test"}, "sim": {"T": 1.0, "dt": 0.1},
           "experiment": {"kind": "ldp", "targets": [{"id": "z", "kind": "endpoint", "value": 0.5}]}}
    assert main(["ldp", "--config", write(tmp_path, ldp, "l.json"), "--out", str(tmp_path / "l")]) == 0
    assert (tmp_path / "l" / "rates.csv").read_text().startswith("target_id,I,residual,converged\n")
