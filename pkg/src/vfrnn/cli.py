"""Command-line front end: validate models, synthesise and verify designs, run and report simulations.

Exit codes: 0 on success, 2 on validation or synthesis failure, 3 when a
closed-loop run diverges (solver, observer or implicit-layer failure).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .constraints import box
from .errors import (EmptyInterior, Infeasible, ModelFormatError, NeverFeasible, NonConvergence, NumericalFailure,
                     SingularPhi, SolverStall, SynthesisFailed, VfrnnError)
from .invariant import GUARD_TOL, GammaOptions, controller_problem, max_gamma, observer_problem, soundness_check, \
    terminal_problem
from .io import load_result, load_scenario, model_from_dict, read_json, save_result
from .model import IMPLICIT_TOL, rank_M_check, well_posedness_check
from .nmpc import FEAS_TOL, KKT_TOL, NmpcOptions, write_trace
from .synthesis import SYNTH_MARGIN, VERIFY_MARGIN, ControllerDesign, DesignOptions, GainResult, ObserverDesign, \
    TerminalIngredients, augment, design_controller, design_observer, design_terminal, empirical_bound, \
    verify_controller, verify_observer, verify_terminal
from .simulator import OFFSET_TOL, Designs, RunAborted, export_csv, read_csv, run, summarize

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("vfrnn.cli")

# name -> (default, help); --strict halves each of them
TOLERANCES = {
    "implicit": (IMPLICIT_TOL, "implicit-layer residual in the plant, static law and observer"),
    "kkt": (KKT_TOL, "FHOCP stationarity residual accepted as solved"),
    "feas": (FEAS_TOL, "FHOCP constraint violation accepted as feasible"),
    "gamma": (GammaOptions.rel_tol, "relative tolerance of the level search"),
    "guard": (GUARD_TOL, "row excess allowed by the sampled soundness guard"),
    "offset": (OFFSET_TOL, "output error counted as settled in summaries"),
}


class _JsonLines(logging.Handler):
    def __init__(self, path):
        super().__init__()
        self.fh = open(path, "a")

    def emit(self, record):
        doc = {"time": round(record.created, 3), "level": record.levelname, "logger": record.name,
               "message": record.getMessage()}
        doc.update(getattr(record, "fields", {}))
        self.fh.write(json.dumps(doc, default=_jsonable) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()
        super().close()


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    return str(x)


def _event(message, **fields):
    log.info(message, extra={"fields": fields})


def _print(doc):
    print(json.dumps(doc, indent=1, default=_jsonable))


# ---------------------------------------------------------------- settings

@dataclass
class Settings:
    tol: dict
    seed: int | None
    verify_margin: float
    synth_margin: float

    def gamma_options(self):
        opts = GammaOptions(rel_tol=self.tol["gamma"])
        return opts if self.seed is None else replace(opts, seed=self.seed)

    def nmpc_options(self, trace=False):
        return NmpcOptions(kkt_tol=self.tol["kkt"], feas_tol=self.tol["feas"], trace=trace)

    def design_options(self, **kw):
        return DesignOptions(margin=self.synth_margin, verify_margin=self.verify_margin,
                             gamma=self.gamma_options(), **kw)


def _settings(args):
    scale = 0.5 if args.strict else 1.0
    tol = {k: scale * getattr(args, f"tol_{k}") for k in TOLERANCES}
    return Settings(tol, args.seed, args.verify_margin, args.synth_margin)


# ---------------------------------------------------------------- inputs

def _load_model(ref):
    if ref == "builtin:case":
        from .casestudy import case_model
        return case_model()
    return model_from_dict(read_json(_existing(ref)), "$")


def _existing(path):
    p = Path(path)
    if not p.is_file():
        raise ModelFormatError(str(path), "file not found")
    return p


def _load_inputs(ref, m):
    if ref == "builtin:demo":
        from .casestudy import demo_inputs
        u = demo_inputs()
    else:
        lines = _existing(ref).read_text().splitlines()
        try:
            float(lines[0].split(",")[0])
        except (ValueError, IndexError):
            lines = lines[1:]
        try:
            u = np.loadtxt(lines, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise ModelFormatError(str(ref), f"unreadable input data: {exc}") from None
    if u.shape[1] != m:
        raise ModelFormatError(str(ref), f"{u.shape[1]} input columns != m = {m}")
    return u


def _load_scenario(ref):
    if ref.startswith("builtin:"):
        from importlib import resources
        name = ref.split(":", 1)[1]
        res = resources.files("vfrnn.data").joinpath(f"{name}.scenario.json")
        if not res.is_file():
            raise ModelFormatError(ref, "no such built-in scenario")
        with resources.as_file(res) as path:
            return load_scenario(path)
    return load_scenario(_existing(ref))


def _box(values, dim, what):
    if values is None:
        return None
    lo, hi = values
    if lo >= hi:
        raise ModelFormatError(what, "lower bound must be below the upper bound")
    return box(np.full(dim, lo), np.full(dim, hi))


def _default_out(ref, suffix):
    stem = ref.split(":", 1)[1] if ref.startswith("builtin:") else str(Path(ref).with_suffix(""))
    return f"{stem}.{suffix}"


# ---------------------------------------------------------------- commands

def cmd_check_model(args, st):
    model = _load_model(args.model)
    n, m, p, nu = model.dims
    wp = well_posedness_check(model)
    try:
        rank_ok = rank_M_check(model)
    except SingularPhi:
        rank_ok = False
    doc = {"model": args.model, "n": n, "m": m, "p": p, "nu": nu,
           "activations": [a.kind for a in model.activations],
           "well_posedness": wp.as_dict(), "rank_M": rank_ok}
    _event("check-model", **doc)
    _print(doc)
    if not wp.passed:
        print("error: [model] well-posedness check failed", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def _design(kind, model, args, st, data_bound=None, gains=None):
    y_bar = None if args.y_bar is None else np.asarray(args.y_bar, dtype=float)
    if kind == "observer":
        opts = st.design_options(lambda_init="zero" if data_bound is None else "data")
        return design_observer(model, data_bound, opts)
    opts = st.design_options(y_bar=y_bar, lambda_init="data" if data_bound is not None else "zero")
    if kind == "controller":
        return design_controller(model, data_bound, opts, gains=gains)
    Q = None if args.q is None else args.q * np.eye(model.n + model.p)
    R = None if args.r is None else args.r * np.eye(model.m)
    U = _box(args.u_box, model.m, "--u-box")
    Y = _box(args.y_box, model.p, "--y-box")
    return design_terminal(model, data_bound, Q, R, U, Y, opts, gains=gains)


def _design_summary(model, design):
    if isinstance(design, ObserverDesign):
        rep = verify_observer(model, design)
        return {"kind": "observer", "lambdas": design.Lambda_o.lambdas, "gamma": design.gamma_o,
                "margin": rep["margin"], "L": design.L, "L_tilde": design.L_tilde}
    if isinstance(design, TerminalIngredients):
        rep = verify_terminal(model, design)
        return {"kind": "terminal", "lambdas": design.Lambda_f.lambdas, "gamma": design.gamma_f,
                "y_bar": design.y_bar, "margin": rep["margin"], "K": design.K, "K_tilde": design.K_tilde}
    rep = verify_controller(model, design)
    return {"kind": "controller", "lambdas": design.Lambda_c.lambdas, "gamma": design.gamma_c,
            "y_bar": design.y_bar, "beta": design.beta, "margin": rep["margin"], "K": design.K,
            "K_tilde": design.K_tilde}


def cmd_design(args, st):
    model = _load_model(args.model)
    db = None if args.data is None else empirical_bound(model, _load_inputs(args.data, model.m))
    t0 = time.perf_counter()
    design = _design(args.kind, model, args, st, db)
    out = args.out or _default_out(args.model, f"{args.kind}.result")
    save_result(model, design, out)
    doc = _design_summary(model, design)
    doc.update(out=out, seconds=round(time.perf_counter() - t0, 3))
    _event("design", **doc)
    _print({k: doc[k] for k in doc if k not in ("K", "K_tilde", "L", "L_tilde")})
    return EXIT_OK


def cmd_verify(args, st):
    model, design = load_result(_existing(args.result))
    doc = _design_summary(model, design)
    if isinstance(design, TerminalIngredients):
        ok = doc["margin"] >= 0
    else:
        ok = doc["margin"] >= st.verify_margin
    doc = {"result": args.result, "kind": doc["kind"], "margin": doc["margin"], "required": 0.0 if
           isinstance(design, TerminalIngredients) else st.verify_margin, "ok": ok}
    _event("verify", **doc)
    _print(doc)
    return EXIT_OK if ok else EXIT_INVALID


def _gamma_problem(model, design, y_bar):
    if isinstance(design, ControllerDesign):
        return controller_problem(model, design.P_c, design.Lambda_c, y_bar)
    if isinstance(design, TerminalIngredients):
        return terminal_problem(model, design.P_f, design.Lambda_f, y_bar, design.U, design.Y)
    aug = augment(model)
    return observer_problem(model, design.P_o, design.S_o, design.Lambda_o, aug.At_e,
                            aug.At_e - design.L_tilde @ aug.C_e, design.L_tilde, aug.C_e)


def cmd_gamma(args, st):
    model, design = load_result(_existing(args.result))
    y_bar = getattr(design, "y_bar", None)
    if args.y_bar is not None:
        y_bar = np.asarray(args.y_bar, dtype=float)
    pb = _gamma_problem(model, design, y_bar)
    t0 = time.perf_counter()
    gamma = max_gamma(pb, st.gamma_options())
    doc = {"result": args.result, "y_bar": y_bar, "gamma": gamma, "seconds": round(time.perf_counter() - t0, 3)}
    ok = True
    if args.samples > 0:
        rep = soundness_check(pb, gamma, args.samples, seed=st.seed or 0, tol=st.tol["guard"])
        doc["soundness"] = rep.as_dict()
        ok = rep.ok
    _event("gamma", **doc)
    _print(doc)
    return EXIT_OK if ok else EXIT_INVALID


def _designs_for(sc, args, st):
    """Load the given results and synthesise whatever the scenario still needs."""
    model = sc.model
    got = Designs()
    for attr in ("controller", "terminal", "observer"):
        ref = getattr(args, attr)
        if ref is None:
            continue
        _, d = load_result(_existing(ref))
        want = {"controller": ControllerDesign, "terminal": TerminalIngredients, "observer": ObserverDesign}[attr]
        if not isinstance(d, want):
            raise ModelFormatError(ref, f"expected a {attr} design")
        setattr(got, attr, d)
    db = None if args.data is None else empirical_bound(model, _load_inputs(args.data, model.m))
    y0 = sc.setpoints[0][1]
    opts = st.design_options(y_bar=y0, lambda_init="data" if db is not None else "zero")
    if sc.controller == "static" and got.controller is None:
        _event("designing controller", scenario=sc.name)
        got.controller = design_controller(model, db, opts)
    if sc.controller == "nmpc" and got.terminal is None:
        gains = None
        if got.controller is not None:
            gains = GainResult(got.controller.K, got.controller.K_tilde, got.controller.beta, None, None)
        _event("designing terminal ingredients", scenario=sc.name, reuse_gains=gains is not None)
        got.terminal = design_terminal(model, db, U=sc.U, Y=sc.Y, options=opts, gains=gains)
    if sc.feedback == "observer" and got.observer is None:
        _event("designing observer", scenario=sc.name)
        got.observer = design_observer(model, None, st.design_options(lambda_init="zero"))
    return got


def _simulate_one(ref, args, st, out):
    sc = _load_scenario(ref)
    if args.seed is not None:
        sc.plant.seed = args.seed
    designs = _designs_for(sc, args, st)
    on_solve = None
    if args.trace:
        tdir = Path(args.trace)
        tdir.mkdir(parents=True, exist_ok=True)

        def on_solve(k, sol):
            write_trace(sol, tdir / f"{sc.name}.step{k:05d}.csv")
    t0 = time.perf_counter()
    try:
        traj = run(sc, designs, st.nmpc_options(trace=bool(args.trace)), st.gamma_options(),
                   implicit_tol=st.tol["implicit"], on_solve=on_solve)
        aborted = None
    except RunAborted as exc:
        traj, aborted = exc.trajectory, exc
    export_csv(traj, out)
    summary = summarize(traj, st.tol["offset"], sc.edges())
    summary.update(scenario=ref, csv=out, seconds=round(time.perf_counter() - t0, 3),
                   recovered=all(s["settling_steps"] is not None for s in summary["segments"]))
    if aborted is not None:
        summary["aborted"] = {"step": aborted.step, "cause": str(aborted.cause)}
    _event("simulate", **summary)
    return summary, aborted


def cmd_simulate(args, st):
    refs = args.scenario
    if args.out and len(refs) > 1:
        raise ModelFormatError("--out", "give one scenario per --out, or omit it with several scenarios")
    outs = [args.out or _default_out(r, "csv") for r in refs]
    for r in refs:
        if not r.startswith("builtin:"):
            _existing(r)
    if args.batch and len(refs) > 1:
        with ThreadPoolExecutor() as pool:
            results = list(pool.map(lambda ro: _simulate_one(ro[0], args, st, ro[1]), zip(refs, outs)))
    else:
        results = [_simulate_one(r, args, st, o) for r, o in zip(refs, outs)]
    _print([s for s, _ in results] if len(results) > 1 else results[0][0])
    for _, aborted in results:
        if aborted is not None:
            print(f"error: {aborted}", file=sys.stderr)
            return EXIT_DIVERGED
    return EXIT_OK


def cmd_report(args, st):
    traj = read_csv(_existing(args.trajectory))
    yb = traj.array("y_bar") if traj.records else np.zeros((0, 1))
    edges = [k for k in range(1, len(yb)) if np.any(yb[k] != yb[k - 1])]
    doc = summarize(traj, st.tol["offset"], edges)
    doc["trajectory"] = args.trajectory
    if args.physical and traj.records:
        from .casestudy import to_physical
        u, y = to_physical(traj.array("u")[:, 0], traj.array("y")[:, 0])
        doc["physical"] = {"u_range": [float(u.min()), float(u.max())], "y_range": [float(y.min()), float(y.max())]}
    _event("report", **doc)
    _print(doc)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--log", help="append JSON-lines events to this file")
    g.add_argument("--seed", type=int, help="seed for sampled searches and plant perturbations")
    g.add_argument("--strict", action="store_true", help="halve every --tol-* value")
    g.add_argument("--verify-margin", type=float, default=VERIFY_MARGIN,
                   help=f"eigenvalue margin required by verify (default {VERIFY_MARGIN:g})")
    g.add_argument("--synth-margin", type=float, default=SYNTH_MARGIN,
                   help=f"strictness margin imposed during synthesis (default {SYNTH_MARGIN:g})")
    for name, (default, text) in TOLERANCES.items():
        g.add_argument(f"--tol-{name}", type=float, default=default, help=f"{text} (default {default:g})")
    return p


def _design_flags(p):
    p.add_argument("--data", help="CSV of input samples (one column per input) for the slope bound, "
                                  "or builtin:demo")
    p.add_argument("--y-bar", type=float, nargs="+", help="setpoint used for the level")
    p.add_argument("--u-box", type=float, nargs=2, metavar=("LO", "HI"), help="input constraint box")
    p.add_argument("--y-box", type=float, nargs=2, metavar=("LO", "HI"), help="output constraint box")
    p.add_argument("--q", type=float, help="state weight, Q = q I (terminal)")
    p.add_argument("--r", type=float, help="input-increment weight, R = r I (terminal)")


def build_parser():
    common = _common()
    ap = argparse.ArgumentParser(prog="vfrnn", description=__doc__.splitlines()[0], parents=[common])
    ap.add_argument("--version", action="version", version=f"vfrnn {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check-model", parents=[common], help="validate a model file")
    p.add_argument("model", help="model JSON file or builtin:case")
    p.set_defaults(func=cmd_check_model)

    p = sub.add_parser("design", parents=[common], help="synthesise a controller, terminal ingredients or observer")
    p.add_argument("kind", choices=("controller", "terminal", "observer"))
    p.add_argument("model", help="model JSON file or builtin:case")
    p.add_argument("--out", help="result file (default <model>.<kind>.result)")
    _design_flags(p)
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("verify", parents=[common], help="re-check a design certificate by eigenvalues")
    p.add_argument("result")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gamma", parents=[common], help="admissible level of a design, with a sampled guard")
    p.add_argument("result")
    p.add_argument("--y-bar", type=float, nargs="+", help="setpoint (default: the design's)")
    p.add_argument("--samples", type=int, default=100_000, help="soundness-guard samples (0 disables)")
    p.set_defaults(func=cmd_gamma)

    p = sub.add_parser("simulate", parents=[common], help="closed-loop run of one or more scenarios")
    p.add_argument("scenario", nargs="+", help="scenario JSON file(s) or builtin:nominal / builtin:phlike")
    p.add_argument("--controller", help="controller design result")
    p.add_argument("--terminal", help="terminal design result")
    p.add_argument("--observer", help="observer design result")
    p.add_argument("--data", help="input CSV for slope bounds of designs made on the fly, or builtin:demo")
    p.add_argument("--out", help="trajectory CSV (default <scenario>.csv)")
    p.add_argument("--trace", help="directory for per-step solver traces (cost and KKT per iteration)")
    p.add_argument("--batch", action="store_true", help="run several scenarios on parallel threads")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", parents=[common], help="summarise a trajectory CSV")
    p.add_argument("trajectory")
    p.add_argument("--physical", action="store_true", help="also report ranges in physical units")
    p.set_defaults(func=cmd_report)
    return ap


RUNTIME_ERRORS = (RunAborted, Infeasible, SolverStall, NonConvergence)
INVALID_ERRORS = (ModelFormatError, SynthesisFailed, EmptyInterior, NeverFeasible, NumericalFailure, SingularPhi)


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    handler = None
    if args.log:
        handler = _JsonLines(args.log)
        root = logging.getLogger("vfrnn")
        root.addHandler(handler)
        root.setLevel(logging.INFO)
    try:
        st = _settings(args)
        _event("start", command=args.command, argv=list(sys.argv[1:] if argv is None else argv))
        code = args.func(args, st)
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_DIVERGED
    except INVALID_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_INVALID
    except (VfrnnError, ValueError, OSError) as exc:
        print(f"error: [cli] {exc}", file=sys.stderr)
        code = EXIT_INVALID
    _event("exit", code=code)
    if handler is not None:
        logging.getLogger("vfrnn").removeHandler(handler)
        handler.close()
    return code


if __name__ == "__main__":
    sys.exit(main())
