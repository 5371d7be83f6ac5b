"""Implicit RNN plant model, its layer solver and well-posedness checks.

The model is

    x+ = A x + B u + B_s s
    s  = sigma(A_tilde x + B_tilde u + B_s_tilde s)
    y  = C x

All numerical routines accept leading batch dimensions: ``x`` may be ``(n,)``
or ``(..., n)`` and the result follows the same leading shape.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from . import sdp
from .activations import ActivationDescriptor, check_activation, get_activation
from .errors import NonConvergence, SingularPhi

log = logging.getLogger(__name__)

MATRICES = ("A", "B", "B_s", "A_tilde", "B_tilde", "B_s_tilde", "C")

IMPLICIT_TOL = 1e-10
MAX_NEWTON = 100
MAX_PICARD = 10_000


def _frozen(a):
    a = np.array(a, dtype=float, copy=True)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RnnModel:
    A: np.ndarray
    B: np.ndarray
    B_s: np.ndarray
    A_tilde: np.ndarray
    B_tilde: np.ndarray
    B_s_tilde: np.ndarray
    C: np.ndarray
    activations: tuple = field(default=None)

    def __post_init__(self):
        for name in MATRICES:
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        n, m = self.B.shape
        p = self.C.shape[0]
        nu = self.A_tilde.shape[0]
        acts = self.activations
        if acts is None:
            acts = ("tanh",) * nu
        acts = tuple(get_activation(a) if isinstance(a, str) else a for a in acts)
        object.__setattr__(self, "activations", acts)
        expected = {
            "A": (n, n), "B": (n, m), "B_s": (n, nu), "A_tilde": (nu, n),
            "B_tilde": (nu, m), "B_s_tilde": (nu, nu), "C": (p, n),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name}: shape {getattr(self, name).shape} != expected {shape}")
        if len(acts) != nu:
            raise ValueError(f"activations: {len(acts)} entries for nu={nu}")
        if min(n, m, p, nu) < 1:
            raise ValueError("dims: all of (n, m, p, nu) must be positive")

    @property
    def dims(self):
        return self.n, self.m, self.p, self.nu

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def p(self):
        return self.C.shape[0]

    @property
    def nu(self):
        return self.A_tilde.shape[0]

    @property
    def _uniform(self):
        return all(a.kind == self.activations[0].kind for a in self.activations)

    def sigma(self, v):
        v = np.asarray(v, dtype=float)
        if self._uniform:
            return self.activations[0].value(v)
        return np.stack([a.value(v[..., i]) for i, a in enumerate(self.activations)], axis=-1)

    def dsigma(self, v):
        v = np.asarray(v, dtype=float)
        if self._uniform:
            return self.activations[0].derivative(v)
        return np.stack([a.derivative(v[..., i]) for i, a in enumerate(self.activations)], axis=-1)

    def preactivation(self, x, u, s):
        return x @ self.A_tilde.T + u @ self.B_tilde.T + s @ self.B_s_tilde.T

    def replace(self, **changes):
        kw = {name: getattr(self, name) for name in MATRICES}
        kw["activations"] = tuple(a.kind for a in self.activations)
        kw.update(changes)
        return RnnModel(**kw)

    @classmethod
    def from_matrices(cls, A, B, B_s, A_tilde, B_tilde, B_s_tilde, C, activations="tanh"):
        nu = np.atleast_2d(A_tilde).shape[0]
        if isinstance(activations, str):
            activations = (activations,) * nu
        return cls(A, B, B_s, A_tilde, B_tilde, B_s_tilde, C, tuple(activations))


@dataclass
class PlantState:
    x: np.ndarray
    s: np.ndarray
    u_prev: np.ndarray

    @classmethod
    def initial(cls, model: RnnModel, x, u_prev):
        x = np.asarray(x, dtype=float)
        u_prev = np.asarray(u_prev, dtype=float)
        return cls(x, solve_implicit_layer(model, x, u_prev), u_prev)


def solve_layer(model: RnnModel, w, B_s_tilde=None, s_guess=None, tol=IMPLICIT_TOL,
                max_newton=MAX_NEWTON, max_picard=MAX_PICARD):
    """Solve ``s = sigma(w + E s)`` for ``s`` where ``E`` defaults to ``B_s_tilde``.

    Newton on ``r(s) = s - sigma(w + E s)`` with backtracking; samples whose
    line search stalls fall back to damped Picard iteration.
    """
    E = model.B_s_tilde if B_s_tilde is None else np.asarray(B_s_tilde, dtype=float)
    w = np.asarray(w, dtype=float)
    nu = E.shape[0]
    if not np.any(E):
        return model.sigma(w)
    shape = w.shape
    W = w.reshape(-1, nu)
    if s_guess is None:
        S = model.sigma(W)
    else:
        S = np.broadcast_to(np.asarray(s_guess, dtype=float), shape).reshape(-1, nu).copy()
    eye = np.eye(nu)

    def resid(w_, s_):
        return s_ - model.sigma(w_ + s_ @ E.T)

    R = resid(W, S)
    err = np.max(np.abs(R), axis=1)
    stalled = np.zeros(len(W), dtype=bool)
    for _ in range(max_newton):
        idx = np.flatnonzero((err > tol) & ~stalled)
        if idx.size == 0:
            break
        w0, s0, e0 = W[idx], S[idx], err[idx]
        d = model.dsigma(w0 + s0 @ E.T)
        J = eye - d[:, :, None] * E[None, :, :]
        try:
            step = np.linalg.solve(J, R[idx][:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            stalled[idx] = True
            break
        t = np.ones(idx.size)
        s_new = s0 - step
        e_new = np.max(np.abs(resid(w0, s_new)), axis=1)
        for _ls in range(30):
            bad = (e_new >= (1 - 1e-4 * t) * e0) & (e_new > tol)
            if not bad.any():
                break
            t[bad] *= 0.5
            s_new[bad] = s0[bad] - t[bad, None] * step[bad]
            e_new[bad] = np.max(np.abs(resid(w0[bad], s_new[bad])), axis=1)
        ok = (e_new < e0) | (e_new <= tol)
        S[idx[ok]] = s_new[ok]
        R[idx[ok]] = resid(w0[ok], s_new[ok])
        err[idx[ok]] = e_new[ok]
        stalled[idx[~ok]] = True
    idx = np.flatnonzero(err > tol)
    if idx.size:
        w0, s = W[idx], S[idx]
        alpha = 0.5
        for _ in range(max_picard):
            s_next = (1 - alpha) * s + alpha * model.sigma(w0 + s @ E.T)
            done = np.max(np.abs(s_next - s)) <= 0.1 * tol * alpha
            s = s_next
            if done:
                break
        r = np.max(np.abs(resid(w0, s)), axis=1)
        if np.any(r > tol):
            raise NonConvergence(f"implicit layer residual {r.max():.3e} after Newton+Picard")
        S[idx] = s
    return S.reshape(shape)


def solve_implicit_layer(model: RnnModel, x, u, s_guess=None, tol=IMPLICIT_TOL):
    """``f_s(x, u)``: the unique ``s`` with ``s = sigma(A~x + B~u + B~_s s)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = x @ model.A_tilde.T + u @ model.B_tilde.T
    return solve_layer(model, w, s_guess=s_guess, tol=tol)


def implicit_sensitivity(model: RnnModel, x, u, s):
    """Derivatives of ``f_s`` at a solution: returns ``(ds/dx, ds/du, theta)``."""
    v = model.preactivation(x, u, s)
    theta = model.dsigma(v)
    nu = model.nu
    Phi = np.eye(nu) - theta[..., :, None] * model.B_s_tilde
    dsdx = np.linalg.solve(Phi, theta[..., :, None] * model.A_tilde)
    dsdu = np.linalg.solve(Phi, theta[..., :, None] * model.B_tilde)
    return dsdx, dsdu, theta


def step(model: RnnModel, state: PlantState, u):
    """One model step: returns the successor state and ``y = C x`` of the current state."""
    u = np.asarray(u, dtype=float)
    s = solve_implicit_layer(model, state.x, u, s_guess=state.s)
    y = state.x @ model.C.T
    x_next = state.x @ model.A.T + u @ model.B.T + s @ model.B_s.T
    return PlantState(x_next, s, u), y


def simulate(model: RnnModel, x0, u_seq, s_guess=None):
    """Open-loop run; returns arrays ``x (T+1, n)``, ``s (T, nu)``, ``y (T, p)``."""
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    T = u_seq.shape[0]
    xs = np.zeros((T + 1, model.n))
    ss = np.zeros((T, model.nu))
    xs[0] = x0
    s = s_guess
    for k in range(T):
        s = solve_implicit_layer(model, xs[k], u_seq[k], s_guess=s)
        ss[k] = s
        xs[k + 1] = model.A @ xs[k] + model.B @ u_seq[k] + model.B_s @ s
    return xs, ss, xs[:-1] @ model.C.T


# ---------------------------------------------------------------- checks

def theta_grid(nu, levels=(0.01, 0.2, 0.4, 0.6, 0.8, 1.0), cap=6 ** 5, seed=0):
    """Diagonal slope samples in (0, 1]^nu; random subsample when the grid exceeds ``cap``."""
    total = len(levels) ** nu
    if total <= cap:
        return np.array(list(itertools.product(levels, repeat=nu)), dtype=float)
    rng = np.random.default_rng(seed)
    return rng.choice(np.asarray(levels, dtype=float), size=(cap, nu))


def lemma1_program(E, margin=1e-6):
    """Diagonal ``P`` with ``E'P + PE - 2P < 0``, normalised by ``P >= I``."""
    nu = E.shape[0]
    prog = sdp.LmiProgram("diagonal-stability", margin=margin)
    prog.diagonal("P", nu)
    prog.constrain("lyap", lambda v: 2 * v["P"] - E.T @ v["P"] - v["P"] @ E, strict=True)
    prog.constrain("norm", lambda v: v["P"] - np.eye(nu))
    return prog


@dataclass
class WellPosednessReport:
    lemma1_feasible: bool
    lemma1_P: np.ndarray | None
    sampled_ok: bool
    min_abs_det: float
    n_samples: int
    activations_ok: bool

    @property
    def passed(self):
        return self.sampled_ok and self.activations_ok

    def as_dict(self):
        return {
            "lemma1_feasible": self.lemma1_feasible,
            "sampled_ok": self.sampled_ok,
            "min_abs_det": self.min_abs_det,
            "n_samples": self.n_samples,
            "activations_ok": self.activations_ok,
            "passed": self.passed,
        }


def diagonal_stability_certificate(E):
    """Return a diagonal certificate ``P`` for ``E`` or ``None`` if the SDP is infeasible."""
    sol = sdp.solve(lemma1_program(np.asarray(E, dtype=float)))
    return sol["P"] if sol.ok else None


def well_posedness_check(model: RnnModel, thetas=None) -> WellPosednessReport:
    """Diagonal-stability certificate for ``B_s_tilde`` plus a sampled determinant check."""
    E = model.B_s_tilde
    P = diagonal_stability_certificate(E)
    if thetas is None:
        thetas = theta_grid(model.nu)
    dets = np.linalg.det(np.eye(model.nu) - thetas[:, :, None] * E[None])
    min_det = float(np.min(np.abs(dets)))
    acts_ok = all(check_activation(a)["ok"] for a in {a.kind: a for a in model.activations}.values())
    return WellPosednessReport(P is not None, P, min_det > 1e-12, min_det, len(thetas), acts_ok)


def m_matrix(model: RnnModel, theta):
    """The steady-state Jacobian ``M(Theta)`` for slope vector(s) ``theta``."""
    theta = np.asarray(theta, dtype=float)
    n, nu = model.n, model.nu
    Phi = np.eye(nu) - theta[..., :, None] * model.B_s_tilde
    if np.any(np.abs(np.linalg.det(Phi)) < 1e-12):
        raise SingularPhi("I - Theta*B_s_tilde is singular for some sample")
    G = np.linalg.solve(Phi, theta[..., :, None] * np.hstack([model.A_tilde, model.B_tilde]))
    AB = np.hstack([model.A, model.B]) + model.B_s @ G
    top = AB - np.hstack([np.eye(n), np.zeros((n, model.m))])
    bottom = model.C @ AB
    return np.concatenate([top, np.broadcast_to(bottom, top.shape[:-2] + bottom.shape[-2:])], axis=-2)


def rank_M_check(model: RnnModel, theta_samples=None, rel_tol=1e-8) -> bool:
    """True iff ``M(Theta)`` has full row rank ``n + p`` on every sample.

    When ``M`` is square the slope set is connected, so a determinant that
    changes sign between two samples vanishes somewhere in between and the
    check fails even if every sample is individually well conditioned.
    """
    if theta_samples is None:
        theta_samples = theta_grid(model.nu)
    thetas = np.asarray([np.diag(t) if np.ndim(t) == 2 else t for t in theta_samples], dtype=float)
    if np.any(thetas <= 0) or np.any(thetas > 1):
        raise ValueError("theta samples must lie in (0, 1]")
    M = m_matrix(model, thetas)
    sv = np.linalg.svd(M, compute_uv=False)
    if sv.shape[-1] < model.n + model.p:
        return False
    if not np.all(sv[..., -1] > rel_tol * sv[..., 0]):
        return False
    if M.shape[-1] == M.shape[-2]:
        signs = np.sign(np.linalg.det(M))
        return bool(np.all(signs == signs[0]))
    return True
