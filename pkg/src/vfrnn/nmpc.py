"""Velocity-form NMPC: finite-horizon problem, single-shooting SQP and receding horizon."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize, nnls

from .constraints import Polytope
from .errors import Infeasible, SolverStall
from .model import RnnModel, implicit_sensitivity, solve_implicit_layer
from .runtime import ControllerState, static_control
from .synthesis import TerminalIngredients
from .velocity import VelocityModel, build_velocity

log = logging.getLogger(__name__)

KKT_TOL = 1e-6
FEAS_TOL = 1e-6


@dataclass
class NmpcOptions:
    maxiter: int = 100
    ftol: float = 1e-12
    kkt_tol: float = KKT_TOL
    feas_tol: float = FEAS_TOL
    # an inaccurate solve raises SolverStall instead of being returned
    strict_kkt: bool = False
    trace: bool = False


@dataclass
class Fhocp:
    """Horizon, weights, terminal ingredients, constraints and setpoint."""

    model: RnnModel
    N: int
    Q: np.ndarray
    R: np.ndarray
    P_f: np.ndarray
    gamma_f: float
    K: np.ndarray
    K_tilde: np.ndarray
    U: Polytope | None = None
    Y: Polytope | None = None
    y_bar: np.ndarray = None
    vm: VelocityModel = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon must be at least 1")
        self.y_bar = np.zeros(self.model.p) if self.y_bar is None else np.atleast_1d(
            np.asarray(self.y_bar, dtype=float))
        if self.vm is None:
            self.vm = build_velocity(self.model)
        if self.Y is not None and not self.Y.contains(self.y_bar, tol=0.0):
            raise ValueError(f"setpoint {self.y_bar} lies outside the output constraint set")

    @classmethod
    def from_terminal(cls, model: RnnModel, term: TerminalIngredients, N, y_bar=None, gamma_options=None):
        y_bar = term.y_bar if y_bar is None else np.atleast_1d(np.asarray(y_bar, dtype=float))
        gamma = term.gamma_at(model, y_bar, gamma_options)
        return cls(model, N, term.Q, term.R, term.P_f, gamma, term.K, term.K_tilde, term.U, term.Y, y_bar)

    def with_setpoint(self, y_bar, gamma_f):
        return replace(self, y_bar=np.atleast_1d(np.asarray(y_bar, dtype=float)), gamma_f=float(gamma_f))


@dataclass
class FhocpInit:
    """Measurements defining ``xi(k) = [x(k) - x(k-1); y(k) - y_bar]``."""

    x: np.ndarray
    x_prev: np.ndarray
    u_prev: np.ndarray
    y: np.ndarray
    s_prev: np.ndarray | None = None

    def xi(self, y_bar):
        return np.concatenate([np.asarray(self.x, float) - np.asarray(self.x_prev, float),
                               np.atleast_1d(self.y) - y_bar])


@dataclass
class FhocpSolution:
    du_sequence: np.ndarray
    xi_sequence: np.ndarray
    cost: float
    kkt_residual: float
    status: str
    max_violation: float = 0.0
    iterations: int = 0
    u_sequence: np.ndarray | None = None
    y_sequence: np.ndarray | None = None
    terminal_value: float = np.nan
    trace: list = field(default_factory=list)

    @property
    def du0(self):
        return self.du_sequence[0]


@dataclass
class Rollout:
    xi: np.ndarray    # (N+1, n_xi)
    u: np.ndarray     # (N, m)
    y: np.ndarray     # (N, p); y[0] is the measurement
    x: np.ndarray     # (N, n) states at k .. k+N-1
    s: np.ndarray     # (N, nu)
    dxi: np.ndarray   # (N+1, n_xi, N m)
    du: np.ndarray    # (N, m, N m)
    dy: np.ndarray    # (N, p, N m)


def rollout(pb: Fhocp, init: FhocpInit, dU, grad=True) -> Rollout:
    """Velocity-form prediction with the exact layer increments.

    States are recovered by accumulating increments from ``x(k)`` so that
    the pre-activations, and hence ``ds_c``, are available along the way.
    """
    model, vm = pb.model, pb.vm
    n, m, p = model.n, model.m, model.p
    N = pb.N
    dU = np.asarray(dU, dtype=float).reshape(N, m)
    nz = N * m
    xi = np.zeros((N + 1, vm.n_xi))
    xi[0] = init.xi(pb.y_bar)
    u = np.zeros((N, m))
    y = np.zeros((N, p))
    xs = np.zeros((N, n))
    ss = np.zeros((N, model.nu))
    dxi = np.zeros((N + 1, vm.n_xi, nz))
    du = np.zeros((N, m, nz))
    dy = np.zeros((N, p, nz))
    s_prev = init.s_prev
    if s_prev is None:
        s_prev = solve_implicit_layer(model, np.asarray(init.x_prev, float), np.atleast_1d(init.u_prev))
    x = np.asarray(init.x, dtype=float).copy()
    u_prev = np.atleast_1d(np.asarray(init.u_prev, dtype=float))
    Jx = np.zeros((n, nz))
    Ju = np.zeros((m, nz))
    Js_prev = np.zeros((model.nu, nz))
    y_acc = np.atleast_1d(np.asarray(init.y, dtype=float)).copy()
    Jy = np.zeros((p, nz))
    s_guess = s_prev
    for t in range(N):
        u_t = u_prev + dU[t]
        Ju = Ju.copy()
        Ju[:, t * m:(t + 1) * m] += np.eye(m)
        s_t = solve_implicit_layer(model, x, u_t, s_guess=s_guess)
        u[t], xs[t], ss[t], y[t] = u_t, x, s_t, y_acc
        du[t], dy[t] = Ju, Jy
        ds = s_t - s_prev
        xi[t + 1] = vm.Acal @ xi[t] + vm.Bcal @ dU[t] + vm.Bscal @ ds
        if grad:
            dsdx, dsdu, _ = implicit_sensitivity(model, x, u_t, s_t)
            Js = dsdx @ Jx + dsdu @ Ju
            Jdu = np.zeros((m, nz))
            Jdu[:, t * m:(t + 1) * m] = np.eye(m)
            dxi[t + 1] = vm.Acal @ dxi[t] + vm.Bcal @ Jdu + vm.Bscal @ (Js - Js_prev)
            Js_prev = Js
            Jx = Jx + dxi[t + 1][:n]
            Jy = Jy + model.C @ dxi[t + 1][:n]
        x = x + xi[t + 1][:n]
        y_acc = y_acc + model.C @ xi[t + 1][:n]
        s_prev, s_guess, u_prev = s_t, s_t, u_t
    return Rollout(xi, u, y, xs, ss, dxi, du, dy)


def _cost(pb: Fhocp, r: Rollout, dU):
    dU = np.asarray(dU, dtype=float).reshape(pb.N, -1)
    X = r.xi[:-1]
    J = (np.einsum("ti,ij,tj->", X, pb.Q, X) + np.einsum("ti,ij,tj->", dU, pb.R, dU)
         + r.xi[-1] @ pb.P_f @ r.xi[-1])
    g = 2 * np.einsum("ti,ij,tjz->z", X, pb.Q, r.dxi[:-1]) + 2 * (dU @ pb.R).reshape(-1)
    g += 2 * (r.xi[-1] @ pb.P_f) @ r.dxi[-1]
    return float(J), g


def _constraints(pb: Fhocp, r: Rollout):
    """Inequalities ``c >= 0`` with Jacobian and row labels."""
    vals, jacs, labels = [], [], []
    if pb.U is not None:
        for t in range(pb.N):
            vals.append(pb.U.b - pb.U.G @ r.u[t])
            jacs.append(-pb.U.G @ r.du[t])
            labels += [f"u[{t}]#{i}" for i in range(len(pb.U.b))]
    if pb.Y is not None:
        # the row at tau = 0 involves only the measurement and is not a decision constraint
        for t in range(1, pb.N):
            vals.append(pb.Y.b - pb.Y.G @ r.y[t])
            jacs.append(-pb.Y.G @ r.dy[t])
            labels += [f"y[{t}]#{i}" for i in range(len(pb.Y.b))]
    if np.isfinite(pb.gamma_f):
        xN = r.xi[-1]
        vals.append(np.array([pb.gamma_f - xN @ pb.P_f @ xN]))
        jacs.append((-2 * (xN @ pb.P_f) @ r.dxi[-1])[None])
        labels.append("terminal")
    nz = r.dxi.shape[-1]
    if not vals:
        return np.zeros(0), np.zeros((0, nz)), []
    return np.concatenate(vals), np.vstack(jacs), labels


def kkt_residual(g, c, Jc, feas_tol=FEAS_TOL):
    """Stationarity and primal residual at a candidate point.

    Multipliers of the nearly active constraints are fitted by
    non-negative least squares on ``grad f = sum lam_i grad c_i``.
    """
    primal = float(max(0.0, -np.min(c))) if c.size else 0.0
    act = np.flatnonzero(c <= max(feas_tol, 1e-8) * 10) if c.size else np.zeros(0, int)
    if act.size:
        lam, res = nnls(Jc[act].T, g)
        stat = float(np.max(np.abs(Jc[act].T @ lam - g)))
    else:
        stat = float(np.max(np.abs(g))) if g.size else 0.0
    return max(stat, primal)


class _Problem:
    """Caches one rollout per decision vector for the SLSQP callbacks."""

    def __init__(self, pb, init):
        self.pb, self.init = pb, init
        self.key, self.r = None, None
        self.trace = []

    def get(self, z):
        key = np.asarray(z, dtype=float).tobytes()
        if key != self.key:
            self.r = rollout(self.pb, self.init, z)
            self.key = key
        return self.r

    def fun(self, z):
        return _cost(self.pb, self.get(z), z)

    def cons(self, z):
        return _constraints(self.pb, self.get(z))[0]

    def cons_jac(self, z):
        return _constraints(self.pb, self.get(z))[1]

    def callback(self, z):
        J, g = self.fun(z)
        c, Jc, _ = _constraints(self.pb, self.get(z))
        self.trace.append((len(self.trace) + 1, J, kkt_residual(g, c, Jc)))


def auxiliary_sequence(pb: Fhocp, init: FhocpInit, steps=None):
    """Increments of the static law applied along the nominal prediction."""
    model = pb.model
    steps = pb.N if steps is None else steps
    x_prev = np.asarray(init.x_prev, dtype=float)
    u_prev = np.atleast_1d(np.asarray(init.u_prev, dtype=float))
    st = ControllerState.from_plant(model, x_prev, u_prev, init.s_prev)
    xi = init.xi(pb.y_bar)
    out = np.zeros((steps, model.m))
    for t in range(steps):
        du, ds, st = static_control(model, pb.K, pb.K_tilde, xi, st)
        out[t] = du
        xi = pb.vm.Acal @ xi + pb.vm.Bcal @ du + pb.vm.Bscal @ ds
    return out


def shifted_warm_start(pb: Fhocp, init: FhocpInit, previous: FhocpSolution):
    """Previous solution shifted by one step and closed with the auxiliary law."""
    m = pb.model.m
    dU = np.vstack([previous.du_sequence[1:], np.zeros((1, m))])
    r = rollout(pb, init, dU, grad=False)
    n = pb.model.n
    tail = FhocpInit(r.x[-1] + r.xi[-1][:n], r.x[-1], r.u[-1], r.y[-1] + pb.model.C @ r.xi[-1][:n], r.s[-1])
    dU[-1] = auxiliary_sequence(pb, tail, 1)[0]
    return dU


def _evaluate(pb, init, dU):
    r = rollout(pb, init, dU)
    J, g = _cost(pb, r, dU)
    c, Jc, labels = _constraints(pb, r)
    return r, J, g, c, Jc, labels


def _gn_hessian(pb, r):
    """Gauss-Newton Hessian of the cost (exact when the prediction is linear)."""
    N, m = pb.N, pb.model.m
    H = 2 * np.einsum("tiz,ij,tjw->zw", r.dxi[:-1], pb.Q, r.dxi[:-1])
    H += 2 * r.dxi[-1].T @ pb.P_f @ r.dxi[-1]
    H += 2 * np.kron(np.eye(N), pb.R)
    return H


def _polish(pb, init, z, opts, iters=6):
    """Newton steps on the KKT system of the nearly active constraints."""
    r, J, g, c, Jc, _ = _evaluate(pb, init, z)
    best = kkt_residual(g, c, Jc, opts.feas_tol)
    for _ in range(iters):
        if best <= 0.1 * opts.kkt_tol:
            break
        act = np.flatnonzero(c <= 10 * max(opts.feas_tol, 1e-8)) if c.size else np.zeros(0, int)
        H = _gn_hessian(pb, r)
        A = Jc[act]
        k = len(act)
        KKT = np.block([[H, -A.T], [A, np.zeros((k, k))]])
        rhs = np.concatenate([-g, -c[act]])
        try:
            sol = np.linalg.lstsq(KKT, rhs, rcond=None)[0]
        except np.linalg.LinAlgError:
            break
        if k and np.any(sol[len(z):] < -1e-10):
            break
        z_new = z + sol[:len(z)]
        r_n, J_n, g_n, c_n, Jc_n, _ = _evaluate(pb, init, z_new)
        kkt_n = kkt_residual(g_n, c_n, Jc_n, opts.feas_tol)
        if kkt_n >= best or (c_n.size and np.min(c_n) < -opts.feas_tol):
            break
        z, r, g, c, Jc, best = z_new, r_n, g_n, c_n, Jc_n, kkt_n
    return z


def _feasibility_phase(pb, init, z0, opts):
    """Minimise the squared constraint violation from ``z0``."""
    cache = _Problem(pb, init)

    def fun(z):
        c, Jc, _ = _constraints(pb, cache.get(z))
        v = np.minimum(c, 0.0)
        return float(v @ v), 2 * v @ Jc

    res = minimize(fun, z0, jac=True, method="L-BFGS-B", options={"maxiter": 200, "ftol": 1e-16, "gtol": 1e-12})
    return res.x


def solve_fhocp(pb: Fhocp, init: FhocpInit, warm=None, options: NmpcOptions | None = None) -> FhocpSolution:
    """Single-shooting SQP (SLSQP, exact gradients) for the finite-horizon problem.

    ``warm`` is an ``(N, m)`` initial guess; without it the auxiliary static
    law is rolled out, and ``du = 0`` is tried if that fails.
    """
    opts = options or NmpcOptions()
    N, m = pb.N, pb.model.m
    starts = []
    if warm is not None:
        starts.append(np.asarray(warm, dtype=float).reshape(N, m))
    else:
        try:
            starts.append(auxiliary_sequence(pb, init))
        except Exception as exc:  # the auxiliary law may fail far from the terminal set
            log.debug("auxiliary warm start unavailable: %s", exc)
        starts.append(np.zeros((N, m)))
    z0 = None
    for s0 in starts:
        _, _, _, c, _, _ = _evaluate(pb, init, s0)
        z0 = s0.reshape(-1)
        if c.size == 0 or np.min(c) >= -opts.feas_tol:
            break
    else:
        z0 = _feasibility_phase(pb, init, z0, opts)

    prob = _Problem(pb, init)
    cons = []
    if _constraints(pb, prob.get(z0))[0].size:
        cons = [{"type": "ineq", "fun": prob.cons, "jac": prob.cons_jac}]
    z, iters = z0, 0
    for attempt in range(2):
        res = minimize(prob.fun, z, jac=True, constraints=cons, method="SLSQP",
                       callback=prob.callback if opts.trace else None,
                       options={"maxiter": opts.maxiter, "ftol": opts.ftol})
        iters += int(res.nit)
        z = res.x
        r, J, g, c, Jc, labels = _evaluate(pb, init, z)
        kkt = kkt_residual(g, c, Jc, opts.feas_tol)
        if kkt <= opts.kkt_tol:
            break
        z = _polish(pb, init, z, opts)
        r, J, g, c, Jc, labels = _evaluate(pb, init, z)
        kkt = kkt_residual(g, c, Jc, opts.feas_tol)
        if kkt <= opts.kkt_tol:
            break
    viol = float(max(0.0, -np.min(c))) if c.size else 0.0
    if viol > opts.feas_tol:
        worst = labels[int(np.argmin(c))]
        raise Infeasible(f"no feasible rollout: constraint {worst} violated by {viol:.3e}")
    status = "solved" if kkt <= opts.kkt_tol else "inaccurate"
    if status != "solved" and opts.strict_kkt:
        raise SolverStall(f"KKT residual {kkt:.3e} after {iters} iterations")
    xN = r.xi[-1]
    return FhocpSolution(z.reshape(N, m), r.xi, J, kkt, status, viol, iters, r.u, r.y,
                         float(xN @ pb.P_f @ xN), prob.trace)


def write_trace(solution: FhocpSolution, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "cost", "kkt"])
        for row in solution.trace:
            w.writerow([row[0], f"{row[1]:.17g}", f"{row[2]:.17g}"])


class NmpcController:
    """Receding-horizon wrapper keeping the previous solution for warm starts."""

    def __init__(self, pb: Fhocp, options: NmpcOptions | None = None):
        self.pb = pb
        self.options = options or NmpcOptions()
        self.previous: FhocpSolution | None = None

    def set_problem(self, pb: Fhocp):
        if not np.array_equal(pb.y_bar, self.pb.y_bar):
            self.previous = None
        self.pb = pb

    def step(self, init: FhocpInit):
        """Solve at the current measurements; returns ``(u, du, solution)``."""
        warm = None
        if self.previous is not None:
            try:
                warm = shifted_warm_start(self.pb, init, self.previous)
            except Exception as exc:
                log.debug("shifted warm start failed: %s", exc)
        sol = solve_fhocp(self.pb, init, warm, self.options)
        self.previous = sol
        du = sol.du0
        u = np.atleast_1d(init.u_prev) + du
        return u, du, sol


def receding_horizon_step(controller: NmpcController, init: FhocpInit):
    """Apply only the first increment: ``u(k) = u(k-1) + du(k|k)``."""
    return controller.step(init)
