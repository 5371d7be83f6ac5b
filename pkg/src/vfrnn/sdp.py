"""Small LMI modelling layer on top of cvxpy.

Constraints are written once as callables ``fn(env) -> matrix``.  The same
callable is evaluated on cvxpy variables to pose the program and on plain
numpy values to re-verify the returned point by eigenvalue checks, so the
verification never goes through the solver.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping

import cvxpy as cp
import numpy as np

from .errors import NeverFeasible, NumericalFailure

log = logging.getLogger(__name__)

STRICT_MARGIN = 1e-9
VERIFY_TOL = 1e-7

STRUCTURES = ("symmetric-PD", "symmetric", "diagonal-PD", "diagonal-PSD", "rectangular", "scalar")


def is_expr(x) -> bool:
    return isinstance(x, cp.Expression)


def bmat(blocks):
    """``np.block`` for numeric blocks, ``cp.bmat`` as soon as one block is symbolic."""
    if any(is_expr(b) for row in blocks for b in row):
        return cp.bmat([[b if is_expr(b) else np.atleast_2d(b) for b in row] for row in blocks])
    return np.block(blocks)


def sym(x):
    return (x + x.T) / 2


@dataclass(frozen=True)
class VarSpec:
    name: str
    shape: tuple
    structure: str


@dataclass
class _Constraint:
    name: str
    fn: Callable
    kind: str  # "psd", "strict", "eq", "diag-strict", "diag-nonneg"


@dataclass
class LmiProgram:
    """Decision variables, affine matrix inequalities and a linear objective."""

    name: str = "lmi"
    margin: float = STRICT_MARGIN
    variables: dict = field(default_factory=dict)
    constraints: list = field(default_factory=list)
    objective: tuple | None = None  # ("max" | "min", fn)

    def variable(self, name, shape, structure="rectangular"):
        if structure not in STRUCTURES:
            raise ValueError(f"unknown structure {structure!r}")
        if name in self.variables:
            raise ValueError(f"variable {name!r} declared twice")
        if isinstance(shape, int):
            shape = (shape, shape) if structure != "rectangular" else (shape, 1)
        shape = tuple(shape)
        self.variables[name] = VarSpec(name, shape, structure)
        if structure == "symmetric-PD":
            self.constrain(f"{name}>0", lambda v, _n=name: v[_n], strict=True)
        elif structure == "diagonal-PD":
            self.constraints.append(_Constraint(f"{name}>0", name, "diag-strict"))
        elif structure == "diagonal-PSD":
            self.constraints.append(_Constraint(f"{name}>=0", name, "diag-nonneg"))
        return name

    def symmetric(self, name, n, pd=True):
        return self.variable(name, (n, n), "symmetric-PD" if pd else "symmetric")

    def diagonal(self, name, n, pd=True):
        return self.variable(name, (n, n), "diagonal-PD" if pd else "diagonal-PSD")

    def rectangular(self, name, shape):
        return self.variable(name, shape, "rectangular")

    def scalar(self, name):
        return self.variable(name, (), "scalar")

    def constrain(self, name, fn, strict=False):
        """Add ``fn(env) >= 0`` in the semidefinite sense (``> 0`` if strict)."""
        self.constraints.append(_Constraint(name, fn, "strict" if strict else "psd"))

    def equal(self, name, fn):
        self.constraints.append(_Constraint(name, fn, "eq"))

    def maximize(self, fn):
        self.objective = ("max", fn)

    def minimize(self, fn):
        self.objective = ("min", fn)

    def check(self):
        probe = _numeric_env(self, {n: _zero(s) for n, s in self.variables.items()})
        for c in self.constraints:
            if c.kind.startswith("diag"):
                continue
            try:
                val = np.atleast_2d(np.asarray(c.fn(probe), dtype=float))
            except KeyError as exc:
                raise ValueError(f"constraint {c.name!r} references undeclared {exc}") from None
            if c.kind != "eq" and val.shape[0] != val.shape[1]:
                raise ValueError(f"constraint {c.name!r} is not square: {val.shape}")


@dataclass
class LmiSolution:
    status: str  # optimal | feasible | infeasible | numerical-failure
    values: dict
    violation: float
    objective: float | None = None
    residuals: dict = field(default_factory=dict)
    solver: str = ""

    @property
    def ok(self):
        return self.status in ("optimal", "feasible")

    def __getitem__(self, name):
        return self.values[name]


def _zero(spec: VarSpec):
    return 0.0 if spec.structure == "scalar" else np.zeros(spec.shape)


def _numeric_env(program, values):
    return dict(values)


def _symbolic_env(program):
    env, raw = {}, {}
    for name, spec in program.variables.items():
        if spec.structure == "scalar":
            var = cp.Variable(name=name)
            env[name] = var
        elif spec.structure in ("diagonal-PD", "diagonal-PSD"):
            var = cp.Variable(spec.shape[0], name=name)
            env[name] = cp.diag(var)
        elif spec.structure in ("symmetric-PD", "symmetric"):
            var = cp.Variable(spec.shape, symmetric=True, name=name)
            env[name] = var
        else:
            var = cp.Variable(spec.shape, name=name)
            env[name] = var
        raw[name] = var
    return env, raw


def _extract(program, raw):
    out = {}
    for name, spec in program.variables.items():
        val = raw[name].value
        if val is None:
            return None
        if spec.structure == "scalar":
            out[name] = float(val)
        elif spec.structure in ("diagonal-PD", "diagonal-PSD"):
            out[name] = np.diag(np.asarray(val, dtype=float))
        elif spec.structure in ("symmetric-PD", "symmetric"):
            v = np.asarray(val, dtype=float)
            out[name] = (v + v.T) / 2
        else:
            out[name] = np.asarray(val, dtype=float).reshape(spec.shape)
    return out


def verify(program: LmiProgram, values: Mapping, margin=None) -> tuple[float, dict]:
    """Re-evaluate every constraint on numeric values and return the worst violation.

    PSD constraints use the smallest eigenvalue of the symmetric part; strict
    ones must additionally clear ``margin``.
    """
    margin = program.margin if margin is None else margin
    env = _numeric_env(program, values)
    residuals = {}
    worst = 0.0
    for c in program.constraints:
        if c.kind.startswith("diag"):
            d = np.diag(np.asarray(values[c.fn], dtype=float))
            need = margin if c.kind == "diag-strict" else 0.0
            lam = float(d.min())
            residuals[c.name] = lam
            worst = max(worst, need - lam)
            continue
        val = np.asarray(c.fn(env), dtype=float)
        if c.kind == "eq":
            viol = float(np.max(np.abs(val))) if val.size else 0.0
            residuals[c.name] = viol
        else:
            val = np.atleast_2d(val)
            lam = float(np.linalg.eigvalsh((val + val.T) / 2)[0])
            need = margin if c.kind == "strict" else 0.0
            viol = max(0.0, need - lam)
            residuals[c.name] = lam
        worst = max(worst, viol)
    return worst, residuals


def _cvx_problem(program, margin):
    env, raw = _symbolic_env(program)
    cons = []
    for c in program.constraints:
        if c.kind.startswith("diag"):
            need = margin if c.kind == "diag-strict" else 0.0
            cons.append(raw[c.fn] >= need)
            continue
        expr = c.fn(env)
        if c.kind == "eq":
            cons.append(expr == 0)
            continue
        if not is_expr(expr):
            expr = cp.Constant(np.atleast_2d(expr))
        if expr.ndim < 2:
            expr = cp.reshape(expr, (1, 1), order="F")
        n = expr.shape[0]
        shift = margin * np.eye(n) if c.kind == "strict" else 0.0
        if n == 1:
            cons.append(expr - shift >= 0)
        else:
            cons.append(sym(expr) - shift >> 0)
    if program.objective is None:
        obj = cp.Minimize(0)
    else:
        sense, fn = program.objective
        obj = cp.Maximize(fn(env)) if sense == "max" else cp.Minimize(fn(env))
    return cp.Problem(obj, cons), raw


def solve(program: LmiProgram, solver="CLARABEL", margin=None, verify_tol=VERIFY_TOL) -> LmiSolution:
    """Solve ``program`` and independently re-verify the returned point."""
    margin = program.margin if margin is None else margin
    problem, raw = _cvx_problem(program, margin)
    tried = []
    for name in (solver, "SCS"):
        if name in tried:
            continue
        tried.append(name)
        try:
            # inaccurate solutions are re-verified below, so the warning adds nothing
            with warnings.catch_warnings():
                warnings.filterwarnings("ignore", message="Solution may be inaccurate")
                problem.solve(solver=name)
            break
        except cp.error.SolverError as exc:
            log.debug("solver %s failed on %s: %s", name, program.name, exc)
    else:
        raise NumericalFailure(f"{program.name}: all solvers failed ({', '.join(tried)})")
    status = problem.status
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return LmiSolution("infeasible", {}, np.inf, None, solver=tried[-1])
    values = _extract(program, raw)
    if values is None or status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        return LmiSolution("numerical-failure", values or {}, np.inf, None, solver=tried[-1])
    viol, residuals = verify(program, values, margin)
    objective = None
    if program.objective is not None:
        objective = float(np.asarray(program.objective[1](values)).reshape(()))
    if viol > verify_tol:
        return LmiSolution("numerical-failure", values, viol, objective, residuals, tried[-1])
    kind = "feasible" if program.objective is None else "optimal"
    return LmiSolution(kind, values, viol, objective, residuals, tried[-1])


def maximize_scalar(template: Callable[[float], LmiProgram], t_range, tol=1e-6, solver="CLARABEL"):
    """Largest ``t`` in ``t_range`` for which ``template(t)`` is feasible, by bisection.

    Feasibility must be monotone (feasible below t*, infeasible above).
    """
    lo, hi = map(float, t_range)
    sol_lo = solve(template(lo), solver=solver)
    if not sol_lo.ok:
        raise NeverFeasible(f"infeasible already at t={lo}")
    sol_hi = solve(template(hi), solver=solver)
    if sol_hi.ok:
        return hi, sol_hi
    best = sol_lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        sol = solve(template(mid), solver=solver)
        if sol.ok:
            lo, best = mid, sol
        else:
            hi = mid
    return lo, best


def dump(program: LmiProgram, path, solver="SCS"):
    """Write the canonicalised conic data (SCS layout) of ``program`` as JSON."""
    problem, _ = _cvx_problem(program, program.margin)
    data, _, _ = problem.get_problem_data(solver)
    A = data["A"].tocoo()
    dims = data["dims"]
    doc = {
        "format": "scs-conic/1",
        "name": program.name,
        "c": np.asarray(data["c"]).tolist(),
        "b": np.asarray(data["b"]).tolist(),
        "A": {"shape": list(A.shape), "row": A.row.tolist(), "col": A.col.tolist(), "data": A.data.tolist()},
        "cones": {"zero": dims.zero, "nonneg": dims.nonneg, "soc": list(dims.soc), "psd": list(dims.psd)},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    return doc
