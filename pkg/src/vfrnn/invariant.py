"""Ellipsoidal sets and the admissible-level computations.

The level ``gamma`` of an invariant ellipsoid ``{xi : xi' P xi <= gamma}`` is
the largest value for which every point of the ellipsoid, mapped back to
``phi = [x; u; s]`` through the inverse velocity map, satisfies a set of
linear rows ``G phi <= b``. Each row needs a nonconvex maximisation; it is
solved by multi-start projected gradient ascent followed by SLSQP, and the
result is checked afterwards by dense random sampling.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize

from .constraints import Polytope
from .errors import EmptyInterior
from .model import RnnModel, solve_layer
from .sector import SectorSpec
from .velocity import VelocityModel, build_velocity, dphi_dxi, steady_state, unlift

log = logging.getLogger(__name__)

GAMMA_MIN = 1e-12
GAMMA_MAX = 1e12
GUARD_TOL = 1e-6
KINDS = ("controller", "terminal", "observer")


@dataclass(frozen=True)
class Ellipsoid:
    """``{v : v' P v <= gamma}``."""

    P: np.ndarray
    gamma: float

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if np.max(np.abs(P - P.T)) > 1e-12 * max(1.0, np.max(np.abs(P))):
            raise ValueError("P is not symmetric")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        object.__setattr__(self, "P", (P + P.T) / 2)

    @property
    def dim(self):
        return self.P.shape[0]

    def value(self, v):
        v = np.asarray(v, dtype=float)
        return np.einsum("...i,ij,...j->...", v, self.P, v)

    def contains(self, v, rtol=1e-12):
        return self.value(v) <= self.gamma * (1 + rtol)

    def _root(self):
        # P = R'R; xi = sqrt(gamma) R^-1 w maps the unit ball onto the set
        return np.linalg.cholesky(self.P).T

    def boundary_sample(self, count, seed=0):
        if not np.isfinite(self.gamma):
            raise ValueError("unbounded ellipsoid has no boundary")
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((count, self.dim))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        return np.sqrt(self.gamma) * np.linalg.solve(self._root(), w.T).T

    def interior_sample(self, count, seed=0):
        rng = np.random.default_rng(seed)
        r = rng.uniform(size=(count, 1)) ** (1.0 / self.dim)
        return r * self.boundary_sample(count, seed=rng.integers(2 ** 32))


def contains(e: Ellipsoid, v) -> bool:
    return bool(np.all(e.contains(v)))


def boundary_sample(e: Ellipsoid, count, seed=0):
    return e.boundary_sample(count, seed)


# ---------------------------------------------------------------- problems

def sector_rows(model: RnnModel, spec: SectorSpec):
    """Rows bounding ``|v_i| <= v_bar_i`` over the active channels, in ``phi`` coordinates."""
    idx = spec.active_set
    H = np.hstack([model.A_tilde, model.B_tilde, model.B_s_tilde])[idx]
    b = spec.v_bars[idx]
    labels = [f"v{i}<=" for i in idx] + [f"-v{i}<=" for i in idx]
    return np.vstack([H, -H]), np.concatenate([b, b]), labels


@dataclass
class GammaProblem:
    """Rows ``G z <= b`` to be enforced over an ellipsoid.

    For ``controller`` and ``terminal`` kinds ``z = phi(x, u)`` with
    ``xi = C_xi phi + C_ybar y_bar`` ranging over the ellipsoid. For the
    ``observer`` kind ``z = [e; ds_hat]`` with ``e`` in the ellipsoid and
    ``ds_hat`` tied to ``e`` by the sector inequality.
    """

    kind: str
    P: np.ndarray
    G: np.ndarray
    b: np.ndarray
    model: RnnModel
    y_bar: np.ndarray | None = None
    labels: list = field(default_factory=list)
    # observer kind only
    At_eL: np.ndarray | None = None
    S: np.ndarray | None = None
    lambdas: np.ndarray | None = None
    L_tilde_Ce: np.ndarray | None = None
    v_bars: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        self.P = np.asarray(self.P, dtype=float)
        self.G = np.asarray(self.G, dtype=float).reshape(-1, self._zdim())
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if self.G.shape[0] != self.b.size:
            raise ValueError("row and bound counts differ")
        if self.y_bar is not None:
            self.y_bar = np.atleast_1d(np.asarray(self.y_bar, dtype=float))

    def _zdim(self):
        n, m, p, nu = self.model.dims
        return n + p + nu if self.kind == "observer" else n + m + nu

    @property
    def n_rows(self):
        return self.G.shape[0]


def controller_problem(model: RnnModel, P, spec: SectorSpec, y_bar) -> GammaProblem:
    G, b, labels = sector_rows(model, spec)
    return GammaProblem("controller", P, G, b, model, y_bar, labels)


def terminal_problem(model: RnnModel, P, spec: SectorSpec, y_bar, U: Polytope | None,
                     Y: Polytope | None) -> GammaProblem:
    n, m, p, nu = model.dims
    G, b, labels = sector_rows(model, spec)
    rows, bounds = [G], [b]
    if U is not None:
        rows.append(np.hstack([np.zeros((U.G.shape[0], n)), U.G, np.zeros((U.G.shape[0], nu))]))
        bounds.append(U.b)
        labels += [f"u{j}" for j in range(U.G.shape[0])]
    if Y is not None:
        rows.append(np.hstack([Y.G @ model.C, np.zeros((Y.G.shape[0], m + nu))]))
        bounds.append(Y.b)
        labels += [f"y{j}" for j in range(Y.G.shape[0])]
    return GammaProblem("terminal", P, np.vstack(rows), np.concatenate(bounds), model, y_bar, labels)


def observer_problem(model: RnnModel, P, S, spec: SectorSpec, At_e, At_eL, L_tilde, C_e) -> GammaProblem:
    idx = spec.active_set
    nu = model.nu
    top = np.hstack([At_e, model.B_s_tilde])[idx]
    LC = L_tilde @ C_e
    bot = np.hstack([LC, np.zeros((nu, nu))])[idx]
    v = spec.v_bars[idx]
    G = np.vstack([top, -top, bot, -bot])
    b = np.concatenate([v, v, v, v])
    labels = ([f"v{i}<=" for i in idx] + [f"-v{i}<=" for i in idx]
              + [f"Lc{i}<=" for i in idx] + [f"-Lc{i}<=" for i in idx])
    return GammaProblem("observer", P, G, b, model, None, labels, At_eL=At_eL, S=np.asarray(S),
                        lambdas=spec.lambdas, L_tilde_Ce=LC, v_bars=spec.v_bars)


# ---------------------------------------------------------------- inner maximisation

@dataclass
class GammaOptions:
    n_starts: int = 50
    n_starts_observer: int = 12
    iters: int = 40
    step0: float = 0.5
    step_decay: float = 0.9
    refine: bool = True
    refine_iters: int = 60
    rel_tol: float = 1e-5
    gamma_min: float = GAMMA_MIN
    gamma_max: float = GAMMA_MAX
    seed: int = 0


@dataclass
class InnerMaxResult:
    values: np.ndarray     # best value per row
    points: np.ndarray     # best z per row
    w: np.ndarray          # best unit-ball parameter per row
    failed: np.ndarray     # rows whose starts all failed to evaluate
    n_failed_starts: int = 0


class _XiEvaluator:
    """Evaluates ``G_i phi(unlift(xi(w)))`` and its gradient in ``w``, batched."""

    def __init__(self, problem: GammaProblem):
        self.pb = problem
        self.model = problem.model
        self.vm: VelocityModel = build_velocity(problem.model)
        self.R = np.linalg.cholesky(problem.P).T
        self.Rinv = np.linalg.inv(self.R)
        self.y_bar = np.zeros(self.model.p) if problem.y_bar is None else problem.y_bar
        self.x_bar, self.u_bar = steady_state(self.model, self.vm, self.y_bar)

    def xi(self, W, gamma):
        return np.sqrt(gamma) * W @ self.Rinv.T

    def solve(self, W, gamma, guess):
        return unlift(self.model, self.vm, self.xi(W, gamma), self.y_bar, guess=guess, strict=False,
                      return_s=True)

    def evaluate(self, W, rows, gamma, guess, grad=True):
        x, u, s = self.solve(W, gamma, guess)
        ok = np.all(np.isfinite(x), axis=1)
        Z = np.concatenate([x, u, s], axis=1)
        G = self.pb.G[rows]
        f = np.full(len(W), -np.inf)
        f[ok] = np.sum(G[ok] * Z[ok], axis=1)
        if not grad:
            return f, Z, (x, u), ok
        g = np.zeros_like(W)
        if ok.any():
            D = dphi_dxi(self.model, self.vm, x[ok], u[ok], s[ok])
            g[ok] = np.sqrt(gamma) * np.einsum("ki,kij->kj", G[ok], D) @ self.Rinv
        return f, Z, (x, u), ok, g

    def homotopy(self, W, gamma, steps=4):
        """Unlift along ``t * W`` for increasing ``t`` starting at the steady state."""
        guess = (np.broadcast_to(self.x_bar, (len(W), self.model.n)).copy(),
                 np.broadcast_to(self.u_bar, (len(W), self.model.m)).copy())
        ok = np.ones(len(W), dtype=bool)
        for t in np.linspace(0, 1, steps + 1)[1:]:
            x, u, _ = self.solve(t * W, gamma, guess)
            good = np.all(np.isfinite(x), axis=1)
            ok &= good
            guess[0][good], guess[1][good] = x[good], u[good]
        return guess, ok


def _unit_sphere(rng, k, d):
    w = rng.standard_normal((k, d))
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def _project(W):
    nrm = np.linalg.norm(W, axis=1, keepdims=True)
    return W / np.maximum(nrm, 1.0)


def _inner_max_xi(problem, gamma, rows, opts, warm, ev):
    rng = np.random.default_rng(opts.seed)
    d = problem.P.shape[0]
    k = opts.n_starts
    # seeds: linearised maximiser at the centre, warm points, then random directions
    W0, R0 = [], []
    lin_f, _, _, lin_ok, lin_g = ev.evaluate(np.zeros((len(rows), d)), rows, gamma,
                                             (np.tile(ev.x_bar, (len(rows), 1)),
                                              np.tile(ev.u_bar, (len(rows), 1))))
    for j, r in enumerate(rows):
        seeds = []
        gn = np.linalg.norm(lin_g[j])
        if gn > 0:
            seeds.append(lin_g[j] / gn)
        if warm is not None and r in warm:
            seeds.append(warm[r])
        seeds = np.array(seeds).reshape(-1, d)
        extra = _unit_sphere(rng, max(k - len(seeds), 0), d)
        Wr = np.vstack([seeds, extra])[:k]
        W0.append(Wr)
        R0.append(np.full(len(Wr), r))
    W = np.vstack(W0)
    rr = np.concatenate(R0)
    guess, alive = ev.homotopy(W, gamma)
    f, Z, guess_new, ok, g = ev.evaluate(W, rr, gamma, guess)
    alive &= ok
    guess = (np.where(alive[:, None], guess_new[0], guess[0]), np.where(alive[:, None], guess_new[1], guess[1]))
    step = np.full(len(W), opts.step0)
    for _ in range(opts.iters):
        if not alive.any():
            break
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        Wn = _project(W + step[:, None] * g / np.where(gn > 0, gn, 1.0))
        fn, Zn, gs, okn, gnew = ev.evaluate(Wn, rr, gamma, guess)
        better = alive & okn & (fn >= f)
        W[better], f[better], Z[better], g[better] = Wn[better], fn[better], Zn[better], gnew[better]
        guess[0][better], guess[1][better] = gs[0][better], gs[1][better]
        step[~better] *= 0.5
        step[better] *= opts.step_decay
    values = np.full(len(rows), -np.inf)
    points = np.full((len(rows), problem.G.shape[1]), np.nan)
    wbest = np.zeros((len(rows), d))
    failed = np.zeros(len(rows), dtype=bool)
    for j, r in enumerate(rows):
        sel = np.flatnonzero((rr == r) & alive)
        if sel.size == 0:
            failed[j] = True
            continue
        b = sel[np.argmax(f[sel])]
        values[j], points[j], wbest[j] = f[b], Z[b], W[b]
        if opts.refine:
            val, pt, wr = _refine_xi(ev, r, gamma, W[b], (guess[0][b], guess[1][b]), opts)
            if val > values[j]:
                values[j], points[j], wbest[j] = val, pt, wr
    return InnerMaxResult(values, points, wbest, failed, int(np.sum(~alive)))


class _RefineAbort(Exception):
    pass


# the refinement gives up after this many points without a preimage
REFINE_MAX_FAILURES = 3


def _refine_xi(ev, row, gamma, w0, guess0, opts):
    cache = {"guess": (guess0[0][None], guess0[1][None]), "best": (-np.inf, None, None), "fails": 0}

    def fun(w):
        f, Z, gs, ok, g = ev.evaluate(w[None], np.array([row]), gamma, cache["guess"])
        if not ok[0]:
            cache["fails"] += 1
            if cache["fails"] >= REFINE_MAX_FAILURES:
                raise _RefineAbort
            return 1e10, np.zeros_like(w)
        cache["guess"] = (gs[0], gs[1])
        if np.dot(w, w) <= 1 + 1e-12 and f[0] > cache["best"][0]:
            cache["best"] = (f[0], Z[0].copy(), w.copy())
        return -f[0], -g[0]

    cons = {"type": "ineq", "fun": lambda w: 1.0 - w @ w, "jac": lambda w: -2 * w}
    try:
        minimize(fun, w0, jac=True, constraints=[cons], method="SLSQP",
                 options={"maxiter": opts.refine_iters, "ftol": 1e-12})
    except (ValueError, np.linalg.LinAlgError, _RefineAbort) as exc:
        log.debug("refine stopped on row %d: %r", row, exc)
    return cache["best"]


def _observer_sector(pb: GammaProblem, e, ds):
    """``(dv - ds)' S (ds - Lambda dv)`` with ``dv = A~_eL e + B~_s ds``."""
    Bs = pb.model.B_s_tilde
    dv = e @ pb.At_eL.T + ds @ Bs.T
    Sd = np.diag(pb.S)
    return np.sum((dv - ds) * Sd * (ds - pb.lambdas * dv), axis=-1)


def _observer_sector_grad(pb, e, ds):
    Bs = pb.model.B_s_tilde
    dv = pb.At_eL @ e + Bs @ ds
    Sd = np.diag(pb.S)
    a = dv - ds
    c = ds - pb.lambdas * dv
    # d/d(dv) and d/d(ds) of sum(a * Sd * c), then chain through dv
    g_dv = Sd * c - pb.lambdas * Sd * a
    g_ds = -Sd * c + Sd * a
    return pb.At_eL.T @ g_dv, g_ds + Bs.T @ g_dv


def _inner_max_observer(problem, gamma, rows, opts, warm):
    rng = np.random.default_rng(opts.seed)
    pb = problem
    ne = pb.P.shape[0]
    nu = pb.model.nu
    R = np.linalg.cholesky(pb.P).T
    Rinv = np.linalg.inv(R)
    sg = np.sqrt(gamma)
    theta = 0.5 * (1.0 + pb.lambdas)
    T = np.linalg.solve(np.eye(nu) - theta[:, None] * pb.model.B_s_tilde, np.diag(theta) @ pb.At_eL)

    def unpack(z):
        return sg * Rinv @ z[:ne], z[ne:]

    def sector_jac(z):
        g_e, g_ds = _observer_sector_grad(pb, *unpack(z))
        return np.concatenate([sg * Rinv.T @ g_e, g_ds])

    cons = [{"type": "ineq", "fun": lambda z: 1.0 - z[:ne] @ z[:ne],
             "jac": lambda z: np.concatenate([-2 * z[:ne], np.zeros(nu)])},
            {"type": "ineq", "fun": lambda z: _observer_sector(pb, *unpack(z)), "jac": sector_jac}]
    values = np.full(len(rows), -np.inf)
    points = np.full((len(rows), ne + nu), np.nan)
    wbest = np.zeros((len(rows), ne))
    failed = np.zeros(len(rows), dtype=bool)
    for j, r in enumerate(rows):
        g = pb.G[r]
        gz = np.concatenate([sg * Rinv.T @ g[:ne], g[ne:]])
        starts = _unit_sphere(rng, opts.n_starts_observer, ne)
        if warm is not None and r in warm:
            starts[0] = warm[r]
        for w in starts:
            e = sg * Rinv @ w
            z0 = np.concatenate([w, T @ e])
            res = minimize(lambda z: (-(gz @ z), -gz), z0, jac=True, constraints=cons, method="SLSQP",
                           options={"maxiter": opts.refine_iters, "ftol": 1e-12})
            z = res.x
            e, ds = unpack(z)
            feas = z[:ne] @ z[:ne] <= 1 + 1e-9 and _observer_sector(pb, e, ds) >= -1e-9
            if feas and gz @ z > values[j]:
                values[j], points[j], wbest[j] = gz @ z, np.concatenate([e, ds]), z[:ne]
        failed[j] = not np.isfinite(values[j])
    return InnerMaxResult(values, points, wbest, failed)


def inner_max(problem: GammaProblem, gamma, rows=None, options: GammaOptions | None = None, warm=None,
              _ev=None) -> InnerMaxResult:
    """Estimate ``max_z G_i z`` over the level-``gamma`` ellipsoid for each requested row.

    The returned values are attained at the returned points, so each is a
    certified lower bound of the true maximum.
    """
    opts = options or GammaOptions()
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    rows = np.arange(problem.n_rows) if rows is None else np.atleast_1d(np.asarray(rows, dtype=int))
    if problem.kind == "observer":
        return _inner_max_observer(problem, gamma, rows, opts, warm)
    ev = _ev or _XiEvaluator(problem)
    return _inner_max_xi(problem, gamma, rows, opts, warm, ev)


@dataclass
class GammaReport:
    gamma: float
    iterations: int = 0
    active_row: int | None = None
    failed_starts: int = 0
    history: list = field(default_factory=list)


def max_gamma(problem: GammaProblem, options: GammaOptions | None = None, report: GammaReport | None = None) -> float:
    """Largest level whose ellipsoid keeps every row within its bound.

    Bisection in ``log gamma`` to relative tolerance ``options.rel_tol``;
    ``inf`` when there are no rows. Raises ``EmptyInterior`` if the rows are
    violated already at ``gamma_min``.
    """
    opts = options or GammaOptions()
    rep = report if report is not None else GammaReport(np.nan)
    if problem.n_rows == 0:
        rep.gamma = np.inf
        return np.inf
    ev = None if problem.kind == "observer" else _XiEvaluator(problem)
    warm = {}

    cache = {}

    def feasible(gamma):
        key = float(np.round(np.log(gamma), 12))
        if key in cache:
            return cache[key]
        cache[key] = _feasible(gamma)
        return cache[key]

    def _feasible(gamma):
        res = inner_max(problem, gamma, options=opts, warm=warm, _ev=ev)
        for r in range(problem.n_rows):
            if not res.failed[r]:
                warm[r] = res.w[r]
        excess = res.values - problem.b
        rep.failed_starts += res.n_failed_starts
        rep.history.append((gamma, float(np.max(excess))))
        rep.iterations += 1
        if np.any(res.failed):
            # unevaluable rows are treated as violated
            return False, int(np.flatnonzero(res.failed)[0])
        worst = int(np.argmax(excess))
        return bool(excess[worst] <= 0), worst

    ok, row = feasible(opts.gamma_min)
    if not ok:
        raise EmptyInterior(f"row {problem.labels[row] if problem.labels else row} violated at gamma={opts.gamma_min:g}")
    lo, hi = opts.gamma_min, None
    g = 1.0
    ok, row = feasible(g)
    if ok:
        lo = g
        while g < opts.gamma_max:
            g = min(g * 16, opts.gamma_max)
            ok, row = feasible(g)
            if not ok:
                hi = g
                break
            lo = g
        if hi is None:
            rep.gamma = lo
            return lo
    else:
        hi = g
        while g > opts.gamma_min * 16:
            g /= 16
            ok, row = feasible(g)
            if ok:
                lo = g
                break
            hi = g
    # Brent's method on the worst excess in log(gamma); the bracket is kept
    # from evaluated points, so the returned level was itself checked
    state = {"lo": lo, "hi": hi, "active": row}

    def excess(logg):
        g = float(np.exp(logg))
        ok, r = feasible(g)
        e = next(v for gg, v in reversed(rep.history) if np.isclose(gg, g, rtol=1e-11))
        if ok:
            state["lo"] = max(state["lo"], g)
            return min(e, 0.0)
        state["hi"] = min(state["hi"], g)
        state["active"] = r
        # unevaluable rows count as violated
        return e if np.isfinite(e) and e > 0 else 1.0

    if hi / lo > 1 + opts.rel_tol:
        try:
            brentq(excess, np.log(lo), np.log(hi), xtol=0.25 * opts.rel_tol, rtol=1e-15, maxiter=100)
        except (ValueError, RuntimeError):
            pass
    lo, hi, active = state["lo"], state["hi"], state["active"]
    while hi / lo > 1 + opts.rel_tol:
        mid = np.sqrt(lo * hi)
        ok, row = feasible(mid)
        if ok:
            lo = mid
        else:
            hi, active = mid, row
    rep.gamma = lo
    rep.active_row = active
    return lo


# ---------------------------------------------------------------- soundness guard

@dataclass
class SoundnessReport:
    n_samples: int
    n_unlift_failures: int
    max_excess: float
    worst_row: int | None
    ok: bool

    def as_dict(self):
        return dict(self.__dict__)


def soundness_check(problem: GammaProblem, gamma, n_samples=100_000, seed=0, tol=GUARD_TOL,
                    chunk=20_000) -> SoundnessReport:
    """Sample the level-``gamma`` ellipsoid and evaluate every row directly."""
    if problem.n_rows == 0 or not np.isfinite(gamma):
        return SoundnessReport(0, 0, -np.inf, None, True)
    ell = Ellipsoid(problem.P, gamma)
    worst, worst_row, fails = -np.inf, None, 0
    rng = np.random.default_rng(seed)
    if problem.kind == "observer":
        return _soundness_observer(problem, ell, n_samples, rng, tol)
    vm = build_velocity(problem.model)
    y_bar = np.zeros(problem.model.p) if problem.y_bar is None else problem.y_bar
    xb, ub = steady_state(problem.model, vm, y_bar)
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        xi = ell.interior_sample(k, seed=rng.integers(2 ** 32))
        # half-way point first gives Newton a nearby start for far samples
        xh, uh = unlift(problem.model, vm, 0.5 * xi, y_bar, guess=(xb, ub), strict=False)
        bad = ~np.all(np.isfinite(xh), axis=1)
        xh[bad], uh[bad] = xb, ub
        x, u, s = unlift(problem.model, vm, xi, y_bar, guess=(xh, uh), strict=False, return_s=True)
        ok = np.all(np.isfinite(x), axis=1)
        fails += int(np.sum(~ok))
        Z = np.concatenate([x[ok], u[ok], s[ok]], axis=1)
        ex = Z @ problem.G.T - problem.b
        if ex.size:
            j = np.unravel_index(np.argmax(ex), ex.shape)
            if ex[j] > worst:
                worst, worst_row = float(ex[j]), int(j[1])
        done += k
    return SoundnessReport(n_samples, fails, worst, worst_row, fails == 0 and worst <= tol)


def _soundness_observer(pb: GammaProblem, ell, n_samples, rng, tol):
    """Realised increments: random estimate points paired with errors from the ellipsoid."""
    model = pb.model
    n, m, p, nu = model.dims
    e = ell.interior_sample(n_samples, seed=rng.integers(2 ** 32))
    x_hat = rng.uniform(-1, 1, (n_samples, n))
    u = rng.uniform(-1, 1, (n_samples, m))
    w_hat = x_hat @ model.A_tilde.T + u @ model.B_tilde.T + e @ pb.L_tilde_Ce.T
    s_hat = solve_layer(model, w_hat)
    x = x_hat + e[:, :n]
    s = solve_layer(model, x @ model.A_tilde.T + u @ model.B_tilde.T)
    Z = np.concatenate([e, s - s_hat], axis=1)
    # only pairs whose pre-activations stay inside the validity box carry the sector bound
    v_hat = w_hat + s_hat @ model.B_s_tilde.T
    v = x @ model.A_tilde.T + u @ model.B_tilde.T + s @ model.B_s_tilde.T
    idx = np.flatnonzero(pb.lambdas > 0)
    vb = pb.v_bars[idx]
    inside = np.all(np.abs(v_hat[:, idx]) <= vb, axis=1) & np.all(np.abs(v[:, idx]) <= vb, axis=1)
    ex = Z[inside] @ pb.G.T - pb.b
    worst = float(ex.max()) if ex.size else -np.inf
    row = int(np.unravel_index(np.argmax(ex), ex.shape)[1]) if ex.size else None
    return SoundnessReport(n_samples, 0, worst, row, worst <= tol)
