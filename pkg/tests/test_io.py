import json
from dataclasses import replace
from importlib import resources

import numpy as np
import pytest

from vfrnn import io
from vfrnn.casestudy import case_model
from vfrnn.constraints import box
from vfrnn.errors import ModelFormatError
from vfrnn.simulator import PlantSpec, Scenario

from conftest import small_model


def test_model_round_trip_is_exact(tmp_path):
    m = small_model(3)
    io.save_model(m, tmp_path / "m.json")
    back = io.load_model(tmp_path / "m.json")
    for name in ("A", "B", "B_s", "A_tilde", "B_tilde", "B_s_tilde", "C"):
        assert np.array_equal(getattr(back, name), getattr(m, name))


def test_shipped_model_loads():
    doc = json.loads(resources.files("vfrnn.data").joinpath("case_model.json").read_text())
    m = io.model_from_dict(doc)
    assert m.dims == (7, 1, 1, 3)
    assert np.array_equal(m.A, case_model().A)


@pytest.mark.parametrize("edit, path", [
    (lambda d: d.update(B_s=[[0.0]]), "$.B_s"),
    (lambda d: d.pop("C"), "$.C"),
    (lambda d: d.update(kind="other"), "$.kind"),
    (lambda d: d["A"][1].append(0.0), "$.A[1]"),
    (lambda d: d["B"][0].__setitem__(0, "x"), "$.B[0][0]"),
    (lambda d: d["A"][0].__setitem__(0, "nan"), "$.A"),
])
def test_model_errors_name_the_field(edit, path):
    doc = io.model_to_dict(small_model(0))
    edit(doc)
    with pytest.raises(ModelFormatError) as info:
        io.model_from_dict(doc)
    assert info.value.path == path


def test_invalid_json_reported(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ModelFormatError, match="invalid JSON"):
        io.load_model(tmp_path / "bad.json")


def test_result_round_trips(certified_set, tmp_path):
    c = certified_set[0]
    for d, fields in ((c.controller, ("K", "K_tilde", "P_c", "S_c", "gamma_c", "y_bar")),
                      (c.terminal, ("K", "P_f", "S_f", "gamma_f", "Q", "R"))):
        io.save_result(c.model, d, tmp_path / "r.json")
        m2, d2 = io.load_result(tmp_path / "r.json")
        assert np.array_equal(m2.A, c.model.A)
        for f in fields:
            assert np.array_equal(getattr(d2, f), getattr(d, f))
    assert d2.U.contains(np.array([0.9])) and not d2.U.contains(np.array([1.1]))
    _, ctrl = io.result_from_dict(io.result_to_dict(c.model, replace(c.controller, gammas={(0.25,): 1.5})))
    assert ctrl.gammas[(0.25,)] == 1.5


def test_observer_result_keeps_infinite_level(case, case_observer, tmp_path):
    io.save_result(case, case_observer, tmp_path / "o.json")
    assert json.loads((tmp_path / "o.json").read_text())["gamma"] == "inf"
    _, d = io.load_result(tmp_path / "o.json")
    assert d.gamma_o == np.inf and np.array_equal(d.L, case_observer.L)


def test_result_rejects_bad_slopes(certified_set):
    c = certified_set[0]
    doc = io.result_to_dict(c.model, c.controller)
    doc["lambdas"] = [0.5, 1.0]
    with pytest.raises(ModelFormatError) as info:
        io.result_from_dict(doc)
    assert info.value.path == "$.lambdas"


# ---------------------------------------------------------------- scenarios

def _scenario(m):
    return Scenario(m, [(0.0, [0.1]), (300.0, [0.2])], 40, 15.0,
                    PlantSpec(0.05, 4, [(60.0, 120.0, 1.6)], [(30.0, 90.0, np.array([0.15]))]),
                    box([-1.0], [1.0]), box([-2.0], [2.0]), "static", "observer", 7, np.array([0.2]), "t")


def test_scenario_round_trip(tmp_path):
    sc = _scenario(small_model(1))
    io.save_scenario(sc, tmp_path / "s.json")
    back = io.load_scenario(tmp_path / "s.json")
    assert io.scenario_to_dict(back) == io.scenario_to_dict(sc)


def test_scenario_in_minutes_and_model_reference(tmp_path):
    io.save_model(small_model(2), tmp_path / "plant.json")
    doc = {"kind": "scenario", "model": "plant.json", "time_unit": "min", "duration": 10,
           "setpoints": [{"t": 0, "y_bar": 0.0}, {"t": 1.5, "y_bar": 0.1}],
           "plant": {"output_disturbance": [{"t_start": 0.5, "t_end": 1, "d": 0.2}]}}
    (tmp_path / "s.json").write_text(json.dumps(doc))
    sc = io.load_scenario(tmp_path / "s.json")
    assert sc.setpoints[1][0] == 90.0 and sc.plant.output_disturbance[0][:2] == (30.0, 60.0)
    assert sc.controller == "nmpc" and sc.horizon == 10


def test_builtin_scenarios_load():
    for name in ("nominal", "phlike"):
        sc = io.load_scenario(resources.files("vfrnn.data").joinpath(f"{name}.scenario.json"))
        assert sc.name == name and sc.model.dims == (7, 1, 1, 3)


@pytest.mark.parametrize("edit, path", [
    (lambda d: d.update(setpoints=[]), "$.setpoints"),
    (lambda d: d.update(setpoints=[{"t": 5, "y_bar": 0}, {"t": 0, "y_bar": 0}]), "$.setpoints"),
    (lambda d: d.update(duration=1.5), "$.duration"),
    (lambda d: d.update(horizon=0), "$.horizon"),
    (lambda d: d.update(time_unit="h"), "$.time_unit"),
    (lambda d: d.update(controller="pid"), "$.controller"),
    (lambda d: d.update(model="missing.json"), "$.model"),
    (lambda d: d["plant"]["input_gain"].append({"t_start": 9, "t_end": 1, "factor": 2}), "$.plant.input_gain[1]"),
    (lambda d: d.update(U={"lower": [1.0], "upper": [0.0]}), "$.U"),
])
def test_scenario_errors_name_the_field(edit, path, tmp_path):
    doc = io.scenario_to_dict(_scenario(small_model(1)))
    doc.pop("u0")
    edit(doc)
    with pytest.raises(ModelFormatError) as info:
        io.scenario_from_dict(doc, base_dir=tmp_path)
    assert info.value.path == path
