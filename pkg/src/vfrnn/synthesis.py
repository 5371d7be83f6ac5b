"""LMI design of the static velocity-form controller, NMPC terminal ingredients and observer.

Controller pipeline: a data-driven slope bound initialises ``Lambda``; a
convexified LMI in ``(Q, Z, Z~, U)`` yields the gains; with the gains fixed
the stability LMI is solved for ``(P, S)``, inflating ``Lambda`` by
``eps`` until it becomes feasible; the admissible level ``gamma`` follows
from the invariant-set module.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from . import sdp
from .constraints import Polytope
from .errors import EmptyInterior, SynthesisFailed
from .invariant import (GammaOptions, GammaReport, controller_problem, max_gamma, observer_problem,
                        terminal_problem)
from .model import RnnModel, diagonal_stability_certificate, simulate
from .sdp import LmiProgram, bmat
from .sector import SectorSpec, lambda_from_radius
from .velocity import VelocityModel, build_velocity

log = logging.getLogger(__name__)

SYNTH_MARGIN = 1e-6
VERIFY_MARGIN = 1e-8


@dataclass
class DesignOptions:
    eps: float = 0.05
    lambda_cap: float = 0.99
    lambda_init: str = "data"  # "data" or "zero"
    margin: float = SYNTH_MARGIN
    verify_margin: float = VERIFY_MARGIN
    u_cap: float = 1e4
    solver: str = "CLARABEL"
    step3_method: str = "direct"  # or "bisection"
    compute_gamma: bool = True
    y_bar: np.ndarray | None = None
    gamma: GammaOptions = field(default_factory=GammaOptions)
    mo_variant: str = "symmetric"  # or "printed"
    # redesign the gains for the current slopes when the certificate fails
    regain: bool = True


# ---------------------------------------------------------------- data bound

@dataclass(frozen=True)
class DataBound:
    v_bar_d: np.ndarray
    Lambda_d: SectorSpec


def empirical_bound(model: RnnModel, u_sequence, x0=None) -> DataBound:
    """Largest pre-activation magnitude per channel along a simulated run, and its slope bound."""
    u = np.atleast_2d(np.asarray(u_sequence, dtype=float))
    if u.shape[0] == 0:
        raise ValueError("empty input sequence")
    if u.shape[1] != model.m:
        u = u.reshape(-1, model.m)
    x0 = np.zeros(model.n) if x0 is None else np.asarray(x0, dtype=float)
    xs, ss, _ = simulate(model, x0, u)
    v = model.preactivation(xs[:-1], u, ss)
    v_bar = np.max(np.abs(v), axis=0)
    lam = np.array([lambda_from_radius(a, r) for a, r in zip(model.activations, v_bar)])
    return DataBound(v_bar, SectorSpec.from_lambdas(lam, model.activations))


# ---------------------------------------------------------------- closed loop algebra

@dataclass(frozen=True)
class ClosedLoop:
    A_K: np.ndarray
    B_sK: np.ndarray
    At_K: np.ndarray
    Bt_sK: np.ndarray


def closed_loop(model: RnnModel, vm: VelocityModel, K, K_tilde) -> ClosedLoop:
    K = np.atleast_2d(K)
    Kt = np.atleast_2d(K_tilde)
    return ClosedLoop(vm.Acal + vm.Bcal @ K, vm.Bscal + vm.Bcal @ Kt,
                      vm.Atilde_cal + model.B_tilde @ K, model.B_s_tilde + model.B_tilde @ Kt)


def sector_multiplier(At, Bt_s, S, lambdas, variant="symmetric"):
    """``G' S Lambda F + F' S Lambda G`` with ``F = [At, Bt_s - I]`` and ``G = [At, Bt_s]``.

    This is the quadratic form of the incremental sector inequality written
    in ``(state, ds)`` coordinates. ``variant="printed"`` drops the ``-I``.
    """
    nu = Bt_s.shape[0]
    F = np.hstack([At, Bt_s - (np.eye(nu) if variant == "symmetric" else 0.0)])
    Gm = np.hstack([At, Bt_s])
    SL = S @ np.diag(np.asarray(lambdas, dtype=float))
    return Gm.T @ SL @ F + F.T @ SL @ Gm


def stability_matrix(cl: ClosedLoop, P, S, lambdas, variant="symmetric"):
    """Returns ``(Omega, U_S)``; the certificate asks for both to be positive definite."""
    nu = cl.Bt_sK.shape[0]
    I_B = np.eye(nu) - cl.Bt_sK
    U_S = I_B.T @ S + S @ I_B
    W = np.hstack([cl.A_K, cl.B_sK])
    Omega = bmat([[P, -(cl.At_K.T @ S)], [-(S @ cl.At_K), U_S]]) - W.T @ P @ W \
        + sector_multiplier(cl.At_K, cl.Bt_sK, S, lambdas, variant)
    return Omega, U_S


def terminal_matrix(cl: ClosedLoop, K, K_tilde, P, S, lambdas, Q, R):
    """The stability matrix minus the stage-cost terms ``blkdiag(Q, 0) + [K K~]' R [K K~]``."""
    Omega, _ = stability_matrix(cl, P, S, lambdas)
    nu = cl.Bt_sK.shape[0]
    KK = np.hstack([np.atleast_2d(K), np.atleast_2d(K_tilde)])
    nx = Q.shape[0]
    Qb = np.zeros((nx + nu, nx + nu))
    Qb[:nx, :nx] = Q
    return Omega - Qb - KK.T @ R @ KK


def _min_eig(M):
    M = np.asarray(M, dtype=float)
    return float(np.linalg.eigvalsh((M + M.T) / 2)[0])


# ---------------------------------------------------------------- step 3: gains

@dataclass
class GainResult:
    K: np.ndarray
    K_tilde: np.ndarray
    beta: float
    Q: np.ndarray
    U: np.ndarray


def transformed_matrices(model: RnnModel, vm: VelocityModel, lambdas):
    """Loop transformation ``ds = Lambda dv + ds'`` for gains with ``K~ = 0``.

    Under ``K~ = 0`` the residual ``ds'`` lies in the sector ``[0, 1]`` with
    respect to ``w = (I - Lambda) dv``, and the dynamics keep the same block
    structure. Returns ``(Acal, Bcal, Bscal, Atc, Bt, Bst)`` of the
    transformed system; ``lambdas = 0`` returns the original matrices.
    """
    nu = model.nu
    lam = np.diag(np.asarray(lambdas, dtype=float))
    N = np.linalg.inv(np.eye(nu) - model.B_s_tilde @ lam)
    IL = np.eye(nu) - lam
    gain = vm.Bscal @ lam @ N
    return (vm.Acal + gain @ vm.Atilde_cal, vm.Bcal + gain @ model.B_tilde,
            vm.Bscal + gain @ model.B_s_tilde, IL @ N @ vm.Atilde_cal, IL @ N @ model.B_tilde,
            IL @ N @ model.B_s_tilde)


def gain_program(model: RnnModel, vm: VelocityModel, opts: DesignOptions, beta=None, lambdas=None) -> LmiProgram:
    """Convexified stability LMI in ``(Q, Z, Z~, U)``.

    With ``beta=None`` the margin ``beta`` is a decision variable to be
    maximised; otherwise it is fixed (used by the bisection variant).
    The program is homogeneous, so ``trace(Q) = n_xi`` and ``U <= u_cap I``
    fix the scale. Passing ``lambdas`` poses the same LMI for the
    loop-transformed system of :func:`transformed_matrices`, with ``Z~ = 0``.
    """
    nx, m, nu = vm.n_xi, model.m, model.nu
    if lambdas is None:
        Acal, Bcal, Bscal, Atc = vm.Acal, vm.Bcal, vm.Bscal, vm.Atilde_cal
        Bt, Bst = model.B_tilde, model.B_s_tilde
    else:
        Acal, Bcal, Bscal, Atc, Bt, Bst = transformed_matrices(model, vm, lambdas)
    N = 2 * nx + nu
    prog = LmiProgram("gains", margin=opts.margin)
    prog.symmetric("Q", nx)
    prog.rectangular("Z", (m, nx))
    if lambdas is None:
        prog.rectangular("Zt", (m, nu))
    prog.diagonal("U", nu)
    if beta is None:
        prog.scalar("beta")
    zt = (lambda v: v["Zt"]) if lambdas is None else (lambda v: np.zeros((m, nu)))

    def U_Z(v):
        X = (np.eye(nu) - Bst) @ v["U"] - Bt @ zt(v)
        return X + X.T

    def big(v):
        Q, Z, Zt, U = v["Q"], v["Z"], zt(v), v["U"]
        b = v["beta"] if beta is None else beta
        M = bmat([[Q, -(Q @ Atc.T) - Z.T @ Bt.T, Q @ Acal.T + Z.T @ Bcal.T],
                  [-(Atc @ Q) - Bt @ Z, U_Z(v), U @ Bscal.T + Zt.T @ Bcal.T],
                  [Acal @ Q + Bcal @ Z, Bscal @ U + Bcal @ Zt, Q]])
        return M - b * np.eye(N)

    prog.constrain("gain-lmi", big)
    prog.constrain("U_Z>0", U_Z, strict=True)
    prog.constrain("U<=cap", lambda v: opts.u_cap * np.eye(nu) - v["U"])
    prog.equal("trace(Q)", lambda v: _trace(v["Q"]) - nx)
    if beta is None:
        prog.maximize(lambda v: v["beta"])
    return prog


def _trace(X):
    return np.trace(X) if isinstance(X, np.ndarray) else cp.trace(X)


def design_gains(model: RnnModel, vm: VelocityModel | None = None, opts: DesignOptions | None = None,
                 lambdas=None) -> GainResult:
    """Maximise ``beta`` in :func:`gain_program` and recover ``K = Z Q^-1``, ``K~ = Z~ U^-1``."""
    opts = opts or DesignOptions()
    vm = vm or build_velocity(model)
    if opts.step3_method == "direct":
        sol = sdp.solve(gain_program(model, vm, opts, lambdas=lambdas), solver=opts.solver)
        if not sol.ok:
            raise SynthesisFailed(f"gain LMI {sol.status} (violation {sol.violation:.2e})")
        beta = sol["beta"]
    else:
        beta, sol = sdp.maximize_scalar(lambda t: gain_program(model, vm, opts, beta=t, lambdas=lambdas),
                                        (-10.0, 1.0), solver=opts.solver)
    Q, U = sol["Q"], sol["U"]
    K = np.linalg.solve(Q.T, sol["Z"].T).T
    Kt = np.zeros((model.m, model.nu)) if lambdas is not None else sol["Zt"] @ np.linalg.inv(U)
    return GainResult(K, Kt, float(beta), Q, U)


# ---------------------------------------------------------------- step 4: certificate

def certificate_program(model, vm, K, K_tilde, lambdas, opts: DesignOptions, Q=None, R=None) -> LmiProgram:
    """Stability LMI in ``(P, S)`` for fixed gains; terminal variant when ``Q, R`` are given."""
    nx, nu = vm.n_xi, model.nu
    cl = closed_loop(model, vm, K, K_tilde)
    terminal = Q is not None
    prog = LmiProgram("terminal" if terminal else "certificate", margin=opts.margin)
    prog.symmetric("P", nx)
    prog.diagonal("S", nu)
    prog.scalar("alpha")
    if terminal:
        prog.constrain("terminal-lmi", lambda v: terminal_matrix(cl, K, K_tilde, v["P"], v["S"], lambdas, Q, R),
                       strict=True)
    else:
        prog.constrain("stability-lmi", lambda v: stability_matrix(cl, v["P"], v["S"], lambdas)[0], strict=True)
        prog.constrain("U_S>0", lambda v: stability_matrix(cl, v["P"], v["S"], lambdas)[1], strict=True)
        # homogeneous in (P, S): fix the scale
        prog.constrain("P>=I", lambda v: v["P"] - np.eye(nx))
    prog.constrain("f(P)>=alpha", lambda v: -v["P"] - v["alpha"] * np.eye(nx))
    prog.maximize(lambda v: v["alpha"])
    return prog


def _inflate_gains(model, vm, lam0, opts, g0, build, what):
    """Slope inflation for the state-feedback certificates.

    At each slope vector the certificate is first tried with the current
    gains. If that fails and ``opts.regain`` is set, the gains are redesigned
    on the loop-transformed system at those slopes and the certificate is
    retried with them. Returns ``(lam, sol, tried, gains)``.
    """
    g = g0
    lam = np.minimum(np.asarray(lam0, dtype=float), opts.lambda_cap)
    tried = []
    while True:
        tried.append(lam.copy())
        sol = sdp.solve(build(lam, g), solver=opts.solver)
        if sol.ok:
            return lam, sol, tried, g
        if opts.regain and np.any(lam > 0):
            try:
                g_new = design_gains(model, vm, opts, lambdas=lam)
            except SynthesisFailed:
                g_new = None
            if g_new is not None and g_new.beta > 0:
                sol = sdp.solve(build(lam, g_new), solver=opts.solver)
                if sol.ok:
                    log.info("%s: gains redesigned at lambda=%s", what, np.round(lam, 4))
                    return lam, sol, tried, g_new
        log.info("%s LMI %s at lambda=%s", what, sol.status, np.round(lam, 4))
        if np.all(lam >= opts.lambda_cap):
            raise SynthesisFailed(f"{what} LMI infeasible up to the slope cap", last_lambda=lam)
        lam = np.minimum(lam + opts.eps, opts.lambda_cap)


def _initial_lambda(model, data_bound, opts):
    if opts.lambda_init == "zero" or data_bound is None:
        return np.zeros(model.nu)
    return data_bound.Lambda_d.lambdas


# ---------------------------------------------------------------- designs

@dataclass
class ControllerDesign:
    K: np.ndarray
    K_tilde: np.ndarray
    P_c: np.ndarray
    S_c: np.ndarray
    Lambda_c: SectorSpec
    gamma_c: float
    y_bar: np.ndarray
    beta: float = np.nan
    alpha: float = np.nan
    lambda_history: list = field(default_factory=list)
    gammas: dict = field(default_factory=dict)

    def gamma_at(self, model, y_bar, options: GammaOptions | None = None):
        """Admissible level for another setpoint (cached)."""
        key = tuple(np.round(np.atleast_1d(y_bar), 12))
        if key not in self.gammas:
            self.gammas[key] = max_gamma(controller_problem(model, self.P_c, self.Lambda_c, y_bar), options)
        return self.gammas[key]


@dataclass
class TerminalIngredients:
    K: np.ndarray
    K_tilde: np.ndarray
    P_f: np.ndarray
    S_f: np.ndarray
    Lambda_f: SectorSpec
    gamma_f: float
    Q: np.ndarray
    R: np.ndarray
    U: Polytope | None
    Y: Polytope | None
    y_bar: np.ndarray
    alpha: float = np.nan
    lambda_history: list = field(default_factory=list)
    gammas: dict = field(default_factory=dict)

    def gamma_at(self, model, y_bar, options: GammaOptions | None = None):
        key = tuple(np.round(np.atleast_1d(y_bar), 12))
        if key not in self.gammas:
            pb = terminal_problem(model, self.P_f, self.Lambda_f, y_bar, self.U, self.Y)
            self.gammas[key] = max_gamma(pb, options)
        return self.gammas[key]


@dataclass
class ObserverDesign:
    L: np.ndarray
    L_tilde: np.ndarray
    P_o: np.ndarray
    S_o: np.ndarray
    Lambda_o: SectorSpec
    gamma_o: float
    alpha: float = np.nan
    lambda_history: list = field(default_factory=list)


def _default_ybar(model, opts):
    return np.zeros(model.p) if opts.y_bar is None else np.atleast_1d(np.asarray(opts.y_bar, dtype=float))


def _gamma(problem, opts, what):
    try:
        return max_gamma(problem, opts.gamma, GammaReport(np.nan))
    except EmptyInterior as exc:
        raise SynthesisFailed(f"{what}: {exc}") from exc


def design_controller(model: RnnModel, data_bound: DataBound | None = None, options: DesignOptions | None = None,
                      gains: GainResult | None = None) -> ControllerDesign:
    """Gains from the convexified LMI, certificate by slope inflation, then the admissible level."""
    opts = options or DesignOptions()
    vm = build_velocity(model)
    g = gains or design_gains(model, vm, opts)
    lam, sol, tried, g = _inflate_gains(model, vm, _initial_lambda(model, data_bound, opts), opts, g,
                                        lambda l, h: certificate_program(model, vm, h.K, h.K_tilde, l, opts),
                                        "certificate")
    spec = SectorSpec.from_lambdas(lam, model.activations)
    y_bar = _default_ybar(model, opts)
    gamma = np.nan
    if opts.compute_gamma:
        gamma = _gamma(controller_problem(model, sol["P"], spec, y_bar), opts, "controller level")
    design = ControllerDesign(g.K, g.K_tilde, sol["P"], sol["S"], spec, gamma, y_bar, g.beta, sol["alpha"], tried)
    rep = verify_controller(model, design)
    if rep["margin"] < opts.verify_margin:
        raise SynthesisFailed(f"controller certificate re-verification margin {rep['margin']:.2e}", last_lambda=lam)
    return design


def design_terminal(model: RnnModel, data_bound: DataBound | None = None, Q=None, R=None, U: Polytope | None = None,
                    Y: Polytope | None = None, options: DesignOptions | None = None,
                    gains: GainResult | None = None) -> TerminalIngredients:
    """Terminal cost and set for the NMPC, with the static law as auxiliary controller."""
    opts = options or DesignOptions()
    vm = build_velocity(model)
    Q = np.eye(vm.n_xi) if Q is None else np.asarray(Q, dtype=float)
    R = np.eye(model.m) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    g = gains or design_gains(model, vm, opts)
    lam, sol, tried, g = _inflate_gains(model, vm, _initial_lambda(model, data_bound, opts), opts, g,
                                        lambda l, h: certificate_program(model, vm, h.K, h.K_tilde, l, opts, Q, R),
                                        "terminal")
    spec = SectorSpec.from_lambdas(lam, model.activations)
    y_bar = _default_ybar(model, opts)
    gamma = np.nan
    if opts.compute_gamma:
        gamma = _gamma(terminal_problem(model, sol["P"], spec, y_bar, U, Y), opts, "terminal level")
    design = TerminalIngredients(g.K, g.K_tilde, sol["P"], sol["S"], spec, gamma, Q, R, U, Y, y_bar,
                                 sol["alpha"], tried)
    rep = verify_terminal(model, design)
    if rep["margin"] < 0:
        raise SynthesisFailed(f"terminal certificate re-verification margin {rep['margin']:.2e}", last_lambda=lam)
    return design


# ---------------------------------------------------------------- observer

@dataclass(frozen=True)
class AugmentedModel:
    A_e: np.ndarray
    B_e: np.ndarray
    B_se: np.ndarray
    At_e: np.ndarray
    C_e: np.ndarray


def augment(model: RnnModel) -> AugmentedModel:
    """Output-disturbance augmentation ``eta = [x; d]`` with ``d+ = d`` and ``y = C x + d``."""
    n, m, p, nu = model.dims
    A_e = np.block([[model.A, np.zeros((n, p))], [np.zeros((p, n)), np.eye(p)]])
    B_e = np.vstack([model.B, np.zeros((p, m))])
    B_se = np.vstack([model.B_s, np.zeros((p, nu))])
    At_e = np.hstack([model.A_tilde, np.zeros((nu, p))])
    C_e = np.hstack([model.C, np.eye(p)])
    return AugmentedModel(A_e, B_e, B_se, At_e, C_e)


def observer_matrix(model: RnnModel, aug: AugmentedModel, L, L_tilde, P, S, lambdas, variant="symmetric"):
    """Error-dynamics certificate matrix; positive definite means the error contracts."""
    Bst = model.B_s_tilde
    nu = Bst.shape[0]
    A_eL = aug.A_e - L @ aug.C_e
    At_eL = aug.At_e - L_tilde @ aug.C_e
    I_B = np.eye(nu) - Bst
    W = np.hstack([A_eL, aug.B_se])
    return (bmat([[P, -(At_eL.T @ S)], [-(S @ At_eL), I_B.T @ S + S @ I_B]]) - W.T @ P @ W
            + sector_multiplier(At_eL, Bst, S, lambdas, variant))


def observer_gain_program(model: RnnModel, aug: AugmentedModel, lambdas, opts: DesignOptions,
                          transformed=False) -> LmiProgram:
    """Joint LMI in ``(P, S, W = P L, W~ = S L~)``.

    Exact for ``Lambda = 0``. Otherwise the PSD term ``2 At_eL' S Lambda At_eL``
    of the sector multiplier is dropped, which only tightens the condition.
    With ``transformed=True`` the exact global LMI is posed for the
    loop-transformed error system instead (see :func:`observer_gains_from`).
    """
    n, m, p, nu = model.dims
    ne = n + p
    if transformed:
        A_e, B_se, At_e, Bst = _observer_transformed(model, aug, lambdas)
        lam = np.zeros((nu, nu))
    else:
        A_e, B_se, At_e, Bst = aug.A_e, aug.B_se, aug.At_e, model.B_s_tilde
        lam = np.diag(np.asarray(lambdas, dtype=float))
    I_B = np.eye(nu) - Bst
    prog = LmiProgram("observer-gains", margin=opts.margin)
    prog.symmetric("P", ne)
    prog.diagonal("S", nu)
    prog.rectangular("W", (ne, p))
    prog.rectangular("Wt", (nu, p))
    prog.scalar("alpha")

    def big(v):
        P, S, W, Wt = v["P"], v["S"], v["W"], v["Wt"]
        SA = S @ At_e - Wt @ aug.C_e          # S At_eL
        PA = P @ A_e - W @ aug.C_e            # P A_eL
        off = -SA.T + (lam @ SA).T @ (2 * Bst - np.eye(nu))
        d22 = I_B.T @ S + S @ I_B + Bst.T @ S @ lam @ (Bst - np.eye(nu)) + (Bst - np.eye(nu)).T @ S @ lam @ Bst
        H = bmat([[PA, P @ B_se]])
        top = bmat([[P, off], [off.T, d22]])
        return bmat([[top, H.T], [H, P]])

    prog.constrain("observer-lmi", big, strict=True)
    prog.constrain("P>=I", lambda v: v["P"] - np.eye(ne))
    prog.constrain("f(P)>=alpha", lambda v: -v["P"] - v["alpha"] * np.eye(ne))
    prog.maximize(lambda v: v["alpha"])
    return prog


def _observer_transformed(model, aug, lambdas):
    """Error system after ``ds = Lambda dv + ds'``: returns ``(A_e, B_se, At_e, B~_s)``."""
    nu = model.nu
    lam = np.diag(np.asarray(lambdas, dtype=float))
    N = np.linalg.inv(np.eye(nu) - model.B_s_tilde @ lam)
    IL = np.eye(nu) - lam
    return (aug.A_e + aug.B_se @ lam @ N @ aug.At_e, aug.B_se @ (np.eye(nu) + lam @ N @ model.B_s_tilde),
            IL @ N @ aug.At_e, IL @ N @ model.B_s_tilde)


def observer_gains_from(model, aug, sol, lambdas=None):
    """Recover ``(L, L~)`` from a solution of :func:`observer_gain_program`.

    For the transformed program the recovered pair is ``(L_tot, L^)`` with
    ``L^ = (I - Lambda) N L~`` and ``L_tot = L + B_se Lambda N L~``,
    ``N = (I - B~_s Lambda)^-1``; both are mapped back here.
    """
    L = np.linalg.solve(sol["P"], sol["W"])
    Lt = np.linalg.solve(sol["S"], sol["Wt"])
    if lambdas is None:
        return L, Lt
    nu = model.nu
    lam = np.diag(np.asarray(lambdas, dtype=float))
    N = np.linalg.inv(np.eye(nu) - model.B_s_tilde @ lam)
    NLt = np.linalg.solve(np.eye(nu) - lam, Lt)
    return L - aug.B_se @ lam @ NLt, np.linalg.solve(N, NLt)


def observer_certificate_program(model, aug, L, L_tilde, lambdas, opts: DesignOptions) -> LmiProgram:
    ne = aug.A_e.shape[0]
    prog = LmiProgram("observer-certificate", margin=opts.margin)
    prog.symmetric("P", ne)
    prog.diagonal("S", model.nu)
    prog.scalar("alpha")
    prog.constrain("observer-lmi", lambda v: observer_matrix(model, aug, L, L_tilde, v["P"], v["S"], lambdas,
                                                             opts.mo_variant), strict=True)
    prog.constrain("P>=I", lambda v: v["P"] - np.eye(ne))
    prog.constrain("f(P)>=alpha", lambda v: -v["P"] - v["alpha"] * np.eye(ne))
    prog.maximize(lambda v: v["alpha"])
    return prog


def _observer_attempt(model, aug, lam, opts):
    """Gains and certificate at fixed slopes, or ``None``.

    The linearised joint LMI is tried first; if it fails and ``opts.regain``
    is set, the exact LMI of the loop-transformed error system is used.
    The certificate is then re-solved with the exact multiplier.
    """
    variants = [False] + ([True] if opts.regain and np.any(lam > 0) else [])
    for transformed in variants:
        sol = sdp.solve(observer_gain_program(model, aug, lam, opts, transformed), solver=opts.solver)
        if not sol.ok:
            continue
        L, Lt = observer_gains_from(model, aug, sol, lam if transformed else None)
        cert = sdp.solve(observer_certificate_program(model, aug, L, Lt, lam, opts), solver=opts.solver)
        if cert.ok:
            return L, Lt, cert["P"], cert["S"], cert["alpha"]
        if not transformed:
            return L, Lt, sol["P"], sol["S"], sol["alpha"]
    return None


def design_observer(model: RnnModel, data_bound: DataBound | None = None,
                    options: DesignOptions | None = None) -> ObserverDesign:
    """Observer gains from the linearised joint LMI, then a certificate with the exact multiplier."""
    opts = options or DesignOptions(lambda_init="zero")
    aug = augment(model)
    lam = np.minimum(np.asarray(_initial_lambda(model, data_bound, opts), dtype=float), opts.lambda_cap)
    tried = []
    while True:
        tried.append(lam.copy())
        found = _observer_attempt(model, aug, lam, opts)
        if found is not None:
            L, Lt, P, S, alpha = found
            break
        log.info("observer LMI infeasible at lambda=%s", np.round(lam, 4))
        if np.all(lam >= opts.lambda_cap):
            raise SynthesisFailed("observer LMI infeasible up to the slope cap", last_lambda=lam)
        lam = np.minimum(lam + opts.eps, opts.lambda_cap)
    spec = SectorSpec.from_lambdas(lam, model.activations)
    gamma = np.inf
    if opts.compute_gamma and spec.active_set.size:
        At_eL = aug.At_e - Lt @ aug.C_e
        gamma = _gamma(observer_problem(model, P, S, spec, aug.At_e, At_eL, Lt, aug.C_e), opts, "observer level")
    design = ObserverDesign(L, Lt, P, S, spec, gamma, alpha, tried)
    rep = verify_observer(model, design)
    if rep["margin"] < opts.verify_margin:
        raise SynthesisFailed(f"observer certificate re-verification margin {rep['margin']:.2e}", last_lambda=lam)
    return design


# ---------------------------------------------------------------- verification

def _lemma1_ok(E):
    return diagonal_stability_certificate(E) is not None


def verify_controller(model: RnnModel, d: ControllerDesign) -> dict:
    """Eigenvalue re-check of the controller certificate, independent of the solver."""
    vm = build_velocity(model)
    cl = closed_loop(model, vm, d.K, d.K_tilde)
    Omega, U_S = stability_matrix(cl, d.P_c, d.S_c, d.Lambda_c.lambdas)
    out = {"omega": _min_eig(Omega), "U_S": _min_eig(U_S), "P": _min_eig(d.P_c),
           "S": float(np.min(np.diag(d.S_c))), "well_posed": _lemma1_ok(cl.Bt_sK)}
    out["margin"] = min(out["omega"], out["U_S"], out["P"], out["S"])
    out["ok"] = out["margin"] >= VERIFY_MARGIN and out["well_posed"]
    return out


def verify_terminal(model: RnnModel, d: TerminalIngredients) -> dict:
    vm = build_velocity(model)
    cl = closed_loop(model, vm, d.K, d.K_tilde)
    Om = terminal_matrix(cl, d.K, d.K_tilde, d.P_f, d.S_f, d.Lambda_f.lambdas, d.Q, d.R)
    out = {"omega_f": _min_eig(Om), "P": _min_eig(d.P_f), "S": float(np.min(np.diag(d.S_f))),
           "well_posed": _lemma1_ok(cl.Bt_sK)}
    out["margin"] = min(out["omega_f"], out["P"], out["S"])
    out["ok"] = out["margin"] >= 0 and out["well_posed"]
    return out


def verify_observer(model: RnnModel, d: ObserverDesign, variant="symmetric") -> dict:
    aug = augment(model)
    Om = observer_matrix(model, aug, d.L, d.L_tilde, d.P_o, d.S_o, d.Lambda_o.lambdas, variant)
    out = {"omega_o": _min_eig(Om), "P": _min_eig(d.P_o), "S": float(np.min(np.diag(d.S_o)))}
    out["margin"] = min(out.values())
    out["ok"] = out["margin"] >= VERIFY_MARGIN
    return out
