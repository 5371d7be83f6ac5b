"""Closed-loop experiments on a surrogate plant with logged trajectories."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .constraints import Polytope
from .errors import Infeasible, NonConvergence, SolverStall, VfrnnError
from .model import IMPLICIT_TOL, RnnModel, solve_implicit_layer
from .nmpc import Fhocp, FhocpInit, NmpcController, NmpcOptions
from .runtime import ControllerState, ObserverState, observer_step, static_control
from .synthesis import ControllerDesign, ObserverDesign, TerminalIngredients, augment

log = logging.getLogger(__name__)

OFFSET_TOL = 1e-3


class RunAborted(VfrnnError):
    """A controller or observer error, tagged with the step index."""

    module = "simulator"

    def __init__(self, step, cause, trajectory=None):
        self.step = step
        self.cause = cause
        self.trajectory = trajectory
        super().__init__(f"step {step}: {cause}")


@dataclass
class PlantSpec:
    """Surrogate truth: the base model with perturbations and schedules.

    ``a_perturbation`` scales each entry of ``A`` by ``1 + delta`` with
    ``delta`` uniform in ``[-a_perturbation, a_perturbation]`` (seeded).
    ``input_gain`` holds ``(t_start, t_end, factor)`` windows that scale
    ``B`` and ``B_tilde``; ``output_disturbance`` holds ``(t_start, t_end, d)``
    windows added to the measured output. Times are in seconds.
    """

    a_perturbation: float = 0.0
    seed: int = 0
    input_gain: list = field(default_factory=list)
    output_disturbance: list = field(default_factory=list)

    def true_model(self, base: RnnModel) -> RnnModel:
        if self.a_perturbation == 0.0:
            return base
        rng = np.random.default_rng(self.seed)
        delta = rng.uniform(-self.a_perturbation, self.a_perturbation, base.A.shape)
        return base.replace(A=base.A * (1.0 + delta))

    def gain(self, t):
        g = 1.0
        for t0, t1, f in self.input_gain:
            if t0 <= t < t1:
                g *= f
        return g

    def disturbance(self, t, p):
        d = np.zeros(p)
        for t0, t1, val in self.output_disturbance:
            if t0 <= t < t1:
                d += np.atleast_1d(np.asarray(val, dtype=float))
        return d


@dataclass
class Scenario:
    """Experiment description; schedule times are in seconds."""

    model: RnnModel
    setpoints: list                      # [(t, y_bar)], time-sorted
    duration: int                        # number of steps
    sampling_period: float = 15.0
    plant: PlantSpec = field(default_factory=PlantSpec)
    U: Polytope | None = None
    Y: Polytope | None = None
    controller: str = "nmpc"             # "static" or "nmpc"
    feedback: str = "state"              # "state" or "observer"
    horizon: int = 10
    u0: np.ndarray | None = None
    name: str = "scenario"

    def __post_init__(self):
        if self.controller not in ("static", "nmpc"):
            raise ValueError(f"controller: expected 'static' or 'nmpc', got {self.controller!r}")
        if self.feedback not in ("state", "observer"):
            raise ValueError(f"feedback: expected 'state' or 'observer', got {self.feedback!r}")
        if not self.setpoints:
            raise ValueError("setpoints: schedule is empty")
        self.setpoints = [(float(t), np.atleast_1d(np.asarray(y, dtype=float))) for t, y in self.setpoints]
        for name, sched in (("setpoints", [s[0] for s in self.setpoints]),
                            ("input_gain", [w[0] for w in self.plant.input_gain]),
                            ("output_disturbance", [w[0] for w in self.plant.output_disturbance])):
            if any(b < a for a, b in zip(sched, sched[1:])):
                raise ValueError(f"{name}: schedule is not time-sorted")
        for name, poly in (("U", self.U), ("Y", self.Y)):
            if poly is not None and not poly.nonempty():
                raise ValueError(f"{name}: empty polytope")
        if self.duration < 0:
            raise ValueError("duration: must be non-negative")

    def setpoint(self, t):
        y = self.setpoints[0][1]
        for t0, val in self.setpoints:
            if t0 <= t:
                y = val
        return y

    def edges(self):
        """Step indices where some schedule changes."""
        ts = [t for t, _ in self.setpoints]
        for t0, t1, _ in self.plant.input_gain + self.plant.output_disturbance:
            ts += [t0, t1]
        ks = {int(np.ceil(t / self.sampling_period - 1e-9)) for t in ts}
        return sorted(k for k in ks if 0 <= k < self.duration)


@dataclass
class Designs:
    controller: ControllerDesign | None = None
    terminal: TerminalIngredients | None = None
    observer: ObserverDesign | None = None


@dataclass
class Record:
    k: int
    t: float
    x: np.ndarray
    x_hat: np.ndarray
    d_hat: np.ndarray
    u: np.ndarray
    du: np.ndarray
    y: np.ndarray
    y_bar: np.ndarray
    xi: np.ndarray
    value: float
    margin_u: float
    margin_y: float
    terminal: bool
    status: str
    kkt: float = np.nan


@dataclass
class Trajectory:
    records: list = field(default_factory=list)
    edges: list = field(default_factory=list)
    name: str = ""

    def __len__(self):
        return len(self.records)

    def array(self, attr):
        return np.array([np.atleast_1d(getattr(r, attr)) for r in self.records])


def _margin(poly, z):
    return np.inf if poly is None else float(np.min(poly.margins(z)))


def _clip(poly, u):
    bb = None if poly is None else poly.box_bounds()
    return u if bb is None else np.clip(u, bb[0], bb[1])


def initial_equilibrium(model: RnnModel, u0):
    from .casestudy import equilibrium
    return equilibrium(model, u0)


def run(scenario: Scenario, designs: Designs, nmpc_options: NmpcOptions | None = None, gamma_options=None,
        x0=None, implicit_tol=IMPLICIT_TOL, on_solve=None) -> Trajectory:
    """Step the surrogate plant in closed loop.

    The plant starts at the equilibrium of ``u0`` (default zero) unless
    ``x0`` is given. In observer mode the controller sees only ``u`` and
    the measured ``y``. ``on_solve(k, solution)`` is called after every
    FHOCP solve.
    """
    sc = scenario
    model = sc.model
    truth = sc.plant.true_model(model)
    n, m, p = model.n, model.m, model.p
    Ts = sc.sampling_period
    u_prev = np.zeros(m) if sc.u0 is None else np.atleast_1d(np.asarray(sc.u0, dtype=float))
    x = initial_equilibrium(truth, u_prev) if x0 is None else np.asarray(x0, dtype=float)
    x_prev = x.copy()
    traj = Trajectory(edges=sc.edges(), name=sc.name)

    observer = sc.feedback == "observer"
    if observer and designs.observer is None:
        raise ValueError("observer feedback requested but no observer design given")
    if observer:
        aug = augment(model)
        x_hat0 = initial_equilibrium(model, u_prev)
        obs = ObserverState.initial(model, x_hat0)
        xh_prev = x_hat0.copy()
    if sc.controller == "nmpc":
        term = designs.terminal
        if term is None:
            raise ValueError("nmpc requested but no terminal ingredients given")
        gammas = {}
        ctrl = None
    else:
        des = designs.controller
        if des is None:
            raise ValueError("static control requested but no controller design given")

    for k in range(sc.duration):
        t = k * Ts
        y_bar = sc.setpoint(t)
        y = truth.C @ x
        y = y + sc.plant.disturbance(t, p)
        if observer:
            xh, dh = obs.eta_hat[:n].copy(), obs.eta_hat[n:].copy()
            xc, xc_prev = xh, xh_prev
        else:
            xh, dh = x.copy(), np.zeros(p)
            xc, xc_prev = x, x_prev
        xi = np.concatenate([xc - xc_prev, y - y_bar])
        kkt = np.nan
        try:
            if sc.controller == "nmpc":
                key = tuple(np.round(y_bar, 12))
                if key not in gammas:
                    gammas[key] = term.gamma_at(model, y_bar, gamma_options)
                pb = Fhocp(model, sc.horizon, term.Q, term.R, term.P_f, gammas[key], term.K, term.K_tilde,
                           sc.U, sc.Y, y_bar)
                if ctrl is None:
                    ctrl = NmpcController(pb, nmpc_options)
                else:
                    ctrl.set_problem(pb)
                _, du, sol = ctrl.step(FhocpInit(xc, xc_prev, u_prev, y))
                if on_solve is not None:
                    on_solve(k, sol)
                value, status, kkt = sol.cost, sol.status, sol.kkt_residual
                terminal = bool(sol.terminal_value <= gammas[key] * (1 + 1e-8)) if np.isfinite(gammas[key]) \
                    else True
            else:
                st = ControllerState.from_plant(model, xc_prev, u_prev)
                du, _, _ = static_control(model, des.K, des.K_tilde, xi, st, tol=implicit_tol)
                value = float(xi @ des.P_c @ xi)
                status = "ok"
                terminal = bool(np.isinf(des.gamma_c) or value <= des.gamma_c)
        except (Infeasible, SolverStall, NonConvergence) as exc:
            raise RunAborted(k, exc, traj) from exc
        u_raw = u_prev + du
        u = _clip(sc.U, u_raw)
        if np.any(u != u_raw):
            log.info("step %d: input clipped by %.3e", k, float(np.max(np.abs(u - u_raw))))
        du = u - u_prev
        traj.records.append(Record(k, t, x.copy(), xh, dh, u.copy(), du, y.copy(), y_bar.copy(), xi, value,
                                   _margin(sc.U, u), _margin(sc.Y, y), terminal, status, kkt))
        if observer:
            try:
                obs, _ = observer_step(model, designs.observer.L, designs.observer.L_tilde, obs, u, y, aug,
                                       tol=implicit_tol)
            except NonConvergence as exc:
                raise RunAborted(k, exc, traj) from exc
            xh_prev = xh
        g = sc.plant.gain(t)
        plant_k = truth if g == 1.0 else truth.replace(B=truth.B * g, B_tilde=truth.B_tilde * g)
        s = solve_implicit_layer(plant_k, x, u, tol=implicit_tol)
        x_prev, x = x, plant_k.A @ x + plant_k.B @ u + plant_k.B_s @ s
        u_prev = u
    return traj


# ---------------------------------------------------------------- CSV and summary

def _columns(traj: Trajectory):
    r0 = traj.records[0] if traj.records else None

    def vec(name, size):
        return [f"{name}[{i}]" for i in range(size)]

    if r0 is None:
        return ["k", "t"]
    return (["k", "t"] + vec("y_bar", r0.y_bar.size) + vec("y", r0.y.size) + vec("u", r0.u.size)
            + vec("du", r0.du.size) + vec("x", r0.x.size) + vec("x_hat", r0.x_hat.size)
            + vec("d_hat", r0.d_hat.size) + vec("xi", r0.xi.size)
            + ["value", "margin_u", "margin_y", "terminal", "status", "kkt"])


def _f(x):
    return "%.17g" % x


def export_csv(traj: Trajectory, path):
    """Fixed column order, 17 significant digits; empty trajectories give a header only."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_columns(traj))
        for r in traj.records:
            row = [str(r.k), _f(r.t)]
            for a in (r.y_bar, r.y, r.u, r.du, r.x, r.x_hat, r.d_hat, r.xi):
                row += [_f(v) for v in np.atleast_1d(a)]
            row += [_f(r.value), _f(r.margin_u), _f(r.margin_y), str(int(r.terminal)), r.status, _f(r.kkt)]
            w.writerow(row)


def read_csv(path) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    idx = {h: i for i, h in enumerate(header)}

    def group(row, name):
        cols = [i for h, i in idx.items() if h.startswith(name + "[")]
        return np.array([float(row[i]) for i in sorted(cols)])

    traj = Trajectory()
    for row in body:
        traj.records.append(Record(int(row[idx["k"]]), float(row[idx["t"]]), group(row, "x"), group(row, "x_hat"),
                                   group(row, "d_hat"), group(row, "u"), group(row, "du"), group(row, "y"),
                                   group(row, "y_bar"), group(row, "xi"), float(row[idx["value"]]),
                                   float(row[idx["margin_u"]]), float(row[idx["margin_y"]]),
                                   bool(int(row[idx["terminal"]])), row[idx["status"]], float(row[idx["kkt"]])))
    return traj


def summarize(traj: Trajectory, tol=OFFSET_TOL, edges=None) -> dict:
    """Constraint violations, per-segment settling steps and final offsets.

    Segments are delimited by ``edges`` (default: the trajectory's own);
    the settling step is the first index from which ``|y - y_bar| <= tol``
    holds until the end of the segment.
    """
    if not traj.records:
        return {"steps": 0, "segments": [], "max_violation_u": 0.0, "max_violation_y": 0.0,
                "final_offset": np.nan}
    err = np.max(np.abs(traj.array("y") - traj.array("y_bar")), axis=1)
    mu = traj.array("margin_u")[:, 0]
    my = traj.array("margin_y")[:, 0]
    n = len(traj.records)
    edges = sorted({e for e in (traj.edges if edges is None else edges) if e < n} | {0})
    bounds = edges + [n]
    segments = []
    for a, b in zip(bounds, bounds[1:]):
        seg = err[a:b]
        ok = seg <= tol
        settle = None
        if ok[-1]:
            bad = np.flatnonzero(~ok)
            settle = int(bad[-1] + 1) if bad.size else 0
        segments.append({"start": a, "end": b, "y_bar": traj.records[a].y_bar.tolist(),
                         "final_offset": float(seg[-1]), "settling_steps": settle})
    return {"steps": len(traj.records),
            "max_violation_u": float(max(0.0, -np.min(mu))),
            "max_violation_y": float(max(0.0, -np.min(my))),
            "final_offset": float(err[-1]),
            "segments": segments}
