import json

import numpy as np
import pytest

from vfrnn import io
from vfrnn.cli import TOLERANCES, _settings, build_parser, main

from conftest import excitation, small_model


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    io.save_model(small_model(1), d / "plant.json")
    np.savetxt(d / "inputs.csv", excitation(1), delimiter=",", header="u", comments="")
    return d


@pytest.fixture(scope="module")
def controller_result(workdir):
    out = workdir / "plant.controller.result"
    code = main(["design", "controller", str(workdir / "plant.json"), "--data", str(workdir / "inputs.csv")])
    assert code == 0 and out.exists()
    return out


def _scenario(workdir, name, **kw):
    doc = {"kind": "scenario", "name": name, "model": "plant.json", "duration": 40, "controller": "static",
           "setpoints": [{"t": 0, "y_bar": 0.0}, {"t": 150, "y_bar": 0.05}]}
    doc.update(kw)
    path = workdir / f"{name}.json"
    path.write_text(json.dumps(doc))
    return path


def test_check_model_accepts_a_valid_file(workdir, capsys):
    assert main(["check-model", str(workdir / "plant.json")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["n"] == 3 and doc["rank_M"] is True and doc["well_posedness"]["passed"]


def test_check_model_reports_bad_dimensions(workdir, capsys):
    doc = io.model_to_dict(small_model(1))
    doc["B_s"] = [[0.0] * 3] * 3
    (workdir / "bad.json").write_text(json.dumps(doc))
    assert main(["check-model", str(workdir / "bad.json")]) == 2
    err = capsys.readouterr().err
    assert "$.B_s" in err and "shape 3x3 != expected 3x2" in err


def test_missing_file_is_invalid(workdir, capsys):
    assert main(["check-model", str(workdir / "nope.json")]) == 2
    assert "file not found" in capsys.readouterr().err


def test_design_verify_and_gamma(controller_result, capsys):
    capsys.readouterr()
    assert main(["verify", str(controller_result)]) == 0
    assert json.loads(capsys.readouterr().out)["ok"]
    assert main(["verify", str(controller_result), "--verify-margin", "1e9"]) == 2
    capsys.readouterr()
    assert main(["gamma", str(controller_result), "--samples", "2000"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["gamma"] > 0 and doc["soundness"]["ok"]


def test_simulate_and_report(workdir, controller_result, capsys):
    sc = _scenario(workdir, "short")
    out = workdir / "short.csv"
    assert main(["simulate", str(sc), "--controller", str(controller_result), "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["steps"] == 40 and out.exists()
    assert [s["start"] for s in summary["segments"]] == [0, 10]
    assert main(["report", str(out)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["segments"] == summary["segments"]


def test_unreachable_setpoint_is_invalid(workdir, capsys):
    # terminal ingredients designed on the tiny box admit no level at the new setpoint
    sc = _scenario(workdir, "tiny", controller="nmpc", horizon=4, U={"lower": [-0.01], "upper": [0.01]},
                   setpoints=[{"t": 0, "y_bar": 0.0}, {"t": 45, "y_bar": 0.5}])
    assert main(["simulate", str(sc), "--out", str(workdir / "tiny.csv")]) == 2
    assert "[invariant_sets]" in capsys.readouterr().err


def test_diverging_run_exits_3(workdir, capsys):
    term = workdir / "plant.terminal.result"
    assert main(["design", "terminal", str(workdir / "plant.json"), "--data", str(workdir / "inputs.csv"),
                 "--u-box", "-1", "1", "--y-box", "-1", "1", "--out", str(term)]) == 0
    sc = _scenario(workdir, "stuck", controller="nmpc", horizon=4, U={"lower": [-0.01], "upper": [0.01]},
                   setpoints=[{"t": 0, "y_bar": 0.0}, {"t": 45, "y_bar": 0.5}])
    out = workdir / "stuck.csv"
    assert main(["simulate", str(sc), "--terminal", str(term), "--out", str(out)]) == 3
    assert "step 3" in capsys.readouterr().err
    assert len(out.read_text().splitlines()) == 1 + 3


def test_unknown_builtin_scenario(capsys):
    assert main(["simulate", "builtin:nothing"]) == 2
    assert "no such built-in scenario" in capsys.readouterr().err


def test_log_is_json_lines(workdir, capsys):
    log = workdir / "events.jsonl"
    main(["check-model", str(workdir / "plant.json"), "--log", str(log)])
    events = [json.loads(line) for line in log.read_text().splitlines()]
    assert events[0]["message"] == "start" and events[-1]["message"] == "exit" and events[-1]["code"] == 0
    assert any(e["message"] == "check-model" and e["n"] == 3 for e in events)


def test_strict_halves_every_tolerance():
    p = build_parser()
    loose = _settings(p.parse_args(["report", "x.csv"]))
    strict = _settings(p.parse_args(["report", "x.csv", "--strict"]))
    assert set(loose.tol) == set(TOLERANCES)
    assert all(strict.tol[k] == 0.5 * loose.tol[k] for k in TOLERANCES)
    assert strict.verify_margin == loose.verify_margin
