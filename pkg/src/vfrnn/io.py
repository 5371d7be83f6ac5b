"""JSON documents for models, design results and scenarios.

Every document carries ``kind`` and ``version``. Matrices are nested lists
written with ``repr`` precision; non-finite scalars are stored as the
strings ``"inf"``, ``"-inf"`` and ``"nan"``. Validation errors name the
offending field as a dotted path.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .constraints import Polytope, box
from .errors import ModelFormatError, UnsupportedActivation
from .model import MATRICES, RnnModel
from .sector import SectorSpec
from .synthesis import ControllerDesign, ObserverDesign, TerminalIngredients

VERSION = 1
_NONFINITE = {"inf": math.inf, "-inf": -math.inf, "nan": math.nan}


# ---------------------------------------------------------------- scalars and arrays

def _enc(x):
    if isinstance(x, np.ndarray):
        return [_enc(v) for v in x.tolist()] if x.ndim else _enc(x.item())
    if isinstance(x, (list, tuple)):
        return [_enc(v) for v in x]
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(x, np.integer):
        return int(x)
    return x


def _num(value, path):
    if isinstance(value, str) and value in _NONFINITE:
        return _NONFINITE[value]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ModelFormatError(path, f"expected a number, got {type(value).__name__}")
    return float(value)


def _matrix(doc, key, path, shape=None):
    if key not in doc:
        raise ModelFormatError(f"{path}.{key}", "missing field")
    rows = doc[key]
    p = f"{path}.{key}"
    if not isinstance(rows, list) or not rows or not all(isinstance(r, list) for r in rows):
        raise ModelFormatError(p, "expected a non-empty list of rows")
    width = len(rows[0])
    out = np.empty((len(rows), width))
    for i, r in enumerate(rows):
        if len(r) != width:
            raise ModelFormatError(f"{p}[{i}]", f"row has {len(r)} entries, expected {width}")
        for j, v in enumerate(r):
            out[i, j] = _num(v, f"{p}[{i}][{j}]")
    if shape is not None and out.shape != shape:
        raise ModelFormatError(p, f"shape {out.shape[0]}x{out.shape[1]} != expected {shape[0]}x{shape[1]}")
    if not np.all(np.isfinite(out)):
        raise ModelFormatError(p, "non-finite entry")
    return out


def _vector(doc, key, path, length=None, finite=True):
    if key not in doc:
        raise ModelFormatError(f"{path}.{key}", "missing field")
    v = doc[key]
    p = f"{path}.{key}"
    if not isinstance(v, list):
        v = [v]
    out = np.array([_num(x, f"{p}[{i}]") for i, x in enumerate(v)], dtype=float)
    if length is not None and out.size != length:
        raise ModelFormatError(p, f"length {out.size} != expected {length}")
    if finite and not np.all(np.isfinite(out)):
        raise ModelFormatError(p, "non-finite entry")
    return out


def _scalar(doc, key, path, default=None):
    if key not in doc:
        if default is not None:
            return default
        raise ModelFormatError(f"{path}.{key}", "missing field")
    return _num(doc[key], f"{path}.{key}")


def _check_kind(doc, kind, path="$"):
    if not isinstance(doc, dict):
        raise ModelFormatError(path, "expected a JSON object")
    if doc.get("kind") != kind:
        raise ModelFormatError(f"{path}.kind", f"expected {kind!r}, got {doc.get('kind')!r}")
    if doc.get("version", VERSION) != VERSION:
        raise ModelFormatError(f"{path}.version", f"unsupported version {doc.get('version')!r}")


def read_json(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(str(path), f"invalid JSON: {exc}") from None


def write_json(doc, path):
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


# ---------------------------------------------------------------- models

def model_to_dict(model: RnnModel, meta=None) -> dict:
    doc = {"kind": "rnn-model", "version": VERSION, "activations": [a.kind for a in model.activations]}
    for name in MATRICES:
        doc[name] = _enc(getattr(model, name))
    if meta:
        doc["meta"] = meta
    return doc


def model_from_dict(doc, path="$") -> RnnModel:
    """Parse and validate a model document; dimensions are inferred from ``A``, ``B``, ``C``, ``A_tilde``."""
    _check_kind(doc, "rnn-model", path)
    A = _matrix(doc, "A", path)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ModelFormatError(f"{path}.A", f"shape {A.shape[0]}x{A.shape[1]} is not square")
    B = _matrix(doc, "B", path)
    if B.shape[0] != n:
        raise ModelFormatError(f"{path}.B", f"{B.shape[0]} rows != n = {n}")
    m = B.shape[1]
    At = _matrix(doc, "A_tilde", path)
    if At.shape[1] != n:
        raise ModelFormatError(f"{path}.A_tilde", f"{At.shape[1]} columns != n = {n}")
    nu = At.shape[0]
    C = _matrix(doc, "C", path)
    if C.shape[1] != n:
        raise ModelFormatError(f"{path}.C", f"{C.shape[1]} columns != n = {n}")
    p = C.shape[0]
    mats = {"A": A, "B": B, "A_tilde": At, "C": C,
            "B_s": _matrix(doc, "B_s", path, (n, nu)),
            "B_tilde": _matrix(doc, "B_tilde", path, (nu, m)),
            "B_s_tilde": _matrix(doc, "B_s_tilde", path, (nu, nu))}
    acts = doc.get("activations", ["tanh"] * nu)
    if isinstance(acts, str):
        acts = [acts] * nu
    if not isinstance(acts, list) or len(acts) != nu:
        raise ModelFormatError(f"{path}.activations", f"expected {nu} entries")
    try:
        return RnnModel(**mats, activations=tuple(acts))
    except UnsupportedActivation as exc:
        raise ModelFormatError(f"{path}.activations", str(exc)) from None


def load_model(path) -> RnnModel:
    return model_from_dict(read_json(path), "$")


def save_model(model: RnnModel, path, meta=None):
    write_json(model_to_dict(model, meta), path)


# ---------------------------------------------------------------- polytopes

def _poly_from(doc, key, path, dim):
    """Either ``{"G": ..., "b": ...}`` or the box shorthand ``{"lower": ..., "upper": ...}``."""
    if doc.get(key) is None:
        return None
    d = doc[key]
    p = f"{path}.{key}"
    if not isinstance(d, dict):
        raise ModelFormatError(p, "expected an object with G and b (or lower and upper)")
    if "G" not in d and ("lower" in d or "upper" in d):
        lo = _vector(d, "lower", p, dim, finite=False)
        hi = _vector(d, "upper", p, dim, finite=False)
        if np.any(lo > hi):
            raise ModelFormatError(p, "lower exceeds upper")
        try:
            return box(lo, hi)
        except ValueError as exc:
            raise ModelFormatError(p, str(exc)) from None
    G = _matrix(d, "G", p)
    if G.shape[1] != dim:
        raise ModelFormatError(f"{p}.G", f"{G.shape[1]} columns != {dim}")
    b = _vector(d, "b", p, G.shape[0])
    try:
        return Polytope(G, b)
    except ValueError as exc:
        raise ModelFormatError(p, str(exc)) from None


def _poly_to(poly):
    return None if poly is None else {"G": _enc(poly.G), "b": _enc(poly.b)}


# ---------------------------------------------------------------- design results

def _gammas_to(gammas):
    return [{"y_bar": _enc(np.array(k)), "gamma": _enc(v)} for k, v in gammas.items()]


def _gammas_from(items, path):
    out = {}
    for i, it in enumerate(items or []):
        y = _vector(it, "y_bar", f"{path}[{i}]")
        out[tuple(np.round(y, 12))] = _scalar(it, "gamma", f"{path}[{i}]")
    return out


def result_to_dict(model: RnnModel, design) -> dict:
    """Serialise a design together with the model it was certified for."""
    base = {"version": VERSION, "model": model_to_dict(model)}
    if isinstance(design, ControllerDesign):
        base.update(kind="controller-design", K=design.K, K_tilde=design.K_tilde, P=design.P_c, S=design.S_c,
                    lambdas=design.Lambda_c.lambdas, gamma=design.gamma_c, y_bar=design.y_bar,
                    beta=design.beta, alpha=design.alpha, gammas=_gammas_to(design.gammas))
    elif isinstance(design, TerminalIngredients):
        base.update(kind="terminal-design", K=design.K, K_tilde=design.K_tilde, P=design.P_f, S=design.S_f,
                    lambdas=design.Lambda_f.lambdas, gamma=design.gamma_f, y_bar=design.y_bar, Q=design.Q,
                    R=design.R, U=_poly_to(design.U), Y=_poly_to(design.Y), alpha=design.alpha,
                    gammas=_gammas_to(design.gammas))
    elif isinstance(design, ObserverDesign):
        base.update(kind="observer-design", L=design.L, L_tilde=design.L_tilde, P=design.P_o, S=design.S_o,
                    lambdas=design.Lambda_o.lambdas, gamma=design.gamma_o, alpha=design.alpha)
    else:
        raise TypeError(f"unsupported design type {type(design).__name__}")
    return {k: (_enc(v) if k not in ("model", "U", "Y", "gammas") else v) for k, v in base.items()}


RESULT_KINDS = ("controller-design", "terminal-design", "observer-design")


def result_from_dict(doc, path="$"):
    """Returns ``(model, design)``."""
    if not isinstance(doc, dict) or doc.get("kind") not in RESULT_KINDS:
        raise ModelFormatError(f"{path}.kind", f"expected one of {RESULT_KINDS}")
    kind = doc["kind"]
    _check_kind(doc, kind, path)
    if "model" not in doc:
        raise ModelFormatError(f"{path}.model", "missing field")
    model = model_from_dict(doc["model"], f"{path}.model")
    n, m, p, nu = model.dims
    nx = n + p
    lam = _vector(doc, "lambdas", path, nu)
    if np.any(lam < 0) or np.any(lam >= 1):
        raise ModelFormatError(f"{path}.lambdas", "entries must lie in [0, 1)")
    spec = SectorSpec.from_lambdas(lam, model.activations)
    S = _matrix(doc, "S", path, (nu, nu))
    gamma = _scalar(doc, "gamma", path)
    alpha = _scalar(doc, "alpha", path, math.nan)
    if kind == "observer-design":
        d = ObserverDesign(_matrix(doc, "L", path, (nx, p)), _matrix(doc, "L_tilde", path, (nu, p)),
                           _matrix(doc, "P", path, (nx, nx)), S, spec, gamma, alpha)
        return model, d
    K = _matrix(doc, "K", path, (m, nx))
    Kt = _matrix(doc, "K_tilde", path, (m, nu))
    P = _matrix(doc, "P", path, (nx, nx))
    y_bar = _vector(doc, "y_bar", path, p)
    gammas = _gammas_from(doc.get("gammas"), f"{path}.gammas")
    if kind == "controller-design":
        d = ControllerDesign(K, Kt, P, S, spec, gamma, y_bar, _scalar(doc, "beta", path, math.nan), alpha,
                             gammas=gammas)
    else:
        d = TerminalIngredients(K, Kt, P, S, spec, gamma, _matrix(doc, "Q", path, (nx, nx)),
                                _matrix(doc, "R", path, (m, m)), _poly_from(doc, "U", path, m),
                                _poly_from(doc, "Y", path, p), y_bar, alpha, gammas=gammas)
    return model, d


def load_result(path):
    return result_from_dict(read_json(path), "$")


def save_result(model, design, path):
    write_json(result_to_dict(model, design), path)


# ---------------------------------------------------------------- scenarios

BUILTIN_MODELS = ("builtin:case",)


def _model_ref(ref, path, base_dir):
    if isinstance(ref, dict):
        return model_from_dict(ref, path)
    if not isinstance(ref, str):
        raise ModelFormatError(path, "expected a file name, 'builtin:case' or an inline model object")
    if ref == "builtin:case":
        from .casestudy import case_model
        return case_model()
    file = Path(ref)
    if not file.is_absolute() and base_dir is not None:
        file = Path(base_dir) / file
    if not file.exists():
        raise ModelFormatError(path, f"model file {str(file)!r} not found")
    return model_from_dict(read_json(file), path)


def _windows(items, path, value_key, width):
    out = []
    if not isinstance(items, list):
        raise ModelFormatError(path, "expected a list of windows")
    for i, w in enumerate(items):
        p = f"{path}[{i}]"
        if not isinstance(w, dict):
            raise ModelFormatError(p, "expected an object")
        t0, t1 = _scalar(w, "t_start", p), _scalar(w, "t_end", p)
        if t1 < t0:
            raise ModelFormatError(p, "t_end precedes t_start")
        val = _scalar(w, value_key, p) if width is None else _vector(w, value_key, p, width)
        out.append((t0, t1, val))
    return out


def scenario_from_dict(doc, path="$", base_dir=None):
    """Parse a scenario; schedule times are in seconds unless ``time_unit`` is ``"min"``."""
    from .simulator import PlantSpec, Scenario
    _check_kind(doc, "scenario", path)
    if "model" not in doc:
        raise ModelFormatError(f"{path}.model", "missing field")
    model = _model_ref(doc["model"], f"{path}.model", base_dir)
    unit = doc.get("time_unit", "s")
    if unit not in ("s", "min"):
        raise ModelFormatError(f"{path}.time_unit", f"expected 's' or 'min', got {unit!r}")
    c = 60.0 if unit == "min" else 1.0
    sp = doc.get("setpoints")
    if not isinstance(sp, list) or not sp:
        raise ModelFormatError(f"{path}.setpoints", "expected a non-empty list")
    setpoints = []
    for i, it in enumerate(sp):
        p = f"{path}.setpoints[{i}]"
        if not isinstance(it, dict):
            raise ModelFormatError(p, "expected an object with t and y_bar")
        setpoints.append((c * _scalar(it, "t", p), _vector(it, "y_bar", p, model.p)))
    pd = doc.get("plant", {})
    pp = f"{path}.plant"
    if not isinstance(pd, dict):
        raise ModelFormatError(pp, "expected an object")
    gain = [(c * a, c * b, f) for a, b, f in _windows(pd.get("input_gain", []), f"{pp}.input_gain", "factor", None)]
    dist = [(c * a, c * b, d) for a, b, d in
            _windows(pd.get("output_disturbance", []), f"{pp}.output_disturbance", "d", model.p)]
    seed = pd.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ModelFormatError(f"{pp}.seed", "expected an integer")
    plant = PlantSpec(_scalar(pd, "a_perturbation", pp, 0.0), seed, gain, dist)
    duration = doc.get("duration")
    if isinstance(duration, bool) or not isinstance(duration, int):
        raise ModelFormatError(f"{path}.duration", "expected an integer number of steps")
    horizon = doc.get("horizon", 10)
    if isinstance(horizon, bool) or not isinstance(horizon, int) or horizon < 1:
        raise ModelFormatError(f"{path}.horizon", "expected a positive integer")
    u0 = _vector(doc, "u0", path, model.m) if "u0" in doc else None
    try:
        return Scenario(model, setpoints, duration, _scalar(doc, "sampling_period", path, 15.0), plant,
                        _poly_from(doc, "U", path, model.m), _poly_from(doc, "Y", path, model.p),
                        doc.get("controller", "nmpc"), doc.get("feedback", "state"), horizon, u0,
                        doc.get("name", "scenario"))
    except ValueError as exc:
        field_name, _, msg = str(exc).partition(": ")
        raise ModelFormatError(f"{path}.{field_name}", msg or str(exc)) from None


def scenario_to_dict(scenario, model_ref=None) -> dict:
    """``model_ref`` (a path or ``"builtin:case"``) replaces the inline model when given."""
    sc = scenario
    pl = sc.plant
    return {"kind": "scenario", "version": VERSION, "name": sc.name,
            "model": model_ref if model_ref is not None else model_to_dict(sc.model),
            "time_unit": "s", "sampling_period": _enc(sc.sampling_period), "duration": int(sc.duration),
            "setpoints": [{"t": _enc(t), "y_bar": _enc(y)} for t, y in sc.setpoints],
            "plant": {"a_perturbation": _enc(pl.a_perturbation), "seed": int(pl.seed),
                      "input_gain": [{"t_start": _enc(a), "t_end": _enc(b), "factor": _enc(f)}
                                     for a, b, f in pl.input_gain],
                      "output_disturbance": [{"t_start": _enc(a), "t_end": _enc(b), "d": _enc(np.atleast_1d(d))}
                                             for a, b, d in pl.output_disturbance]},
            "U": _poly_to(sc.U), "Y": _poly_to(sc.Y), "controller": sc.controller, "feedback": sc.feedback,
            "horizon": int(sc.horizon), "u0": None if sc.u0 is None else _enc(np.atleast_1d(sc.u0))}


def load_scenario(path):
    doc = read_json(path)
    if isinstance(doc, dict) and doc.get("u0", 0) is None:
        doc = {k: v for k, v in doc.items() if k != "u0"}
    return scenario_from_dict(doc, "$", Path(path).resolve().parent)


def save_scenario(scenario, path, model_ref=None):
    write_json(scenario_to_dict(scenario, model_ref), path)
