"""Velocity-form model and the (x, u) <-> xi state mapping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonConvergence
from .model import IMPLICIT_TOL, RnnModel, implicit_sensitivity, m_matrix, solve_implicit_layer

UNLIFT_TOL = 1e-10
MAX_HALVINGS = 8


@dataclass(frozen=True)
class VelocityModel:
    """Lifted matrices of the increment/error dynamics.

    ``xi = [dx; eps]`` with ``eps = y - y_bar`` evolves as
    ``xi+ = Acal xi + Bcal du + Bscal ds``. The pair ``(C_xi, C_ybar)``
    maps ``phi = [x; u; s]`` at the previous instant to ``xi``.
    """

    Acal: np.ndarray
    Bcal: np.ndarray
    Bscal: np.ndarray
    Atilde_cal: np.ndarray
    C_xi: np.ndarray
    C_ybar: np.ndarray
    n: int
    m: int
    p: int
    nu: int

    @property
    def n_xi(self):
        return self.n + self.p

    def split(self, xi):
        xi = np.asarray(xi, dtype=float)
        return xi[..., : self.n], xi[..., self.n:]


def build_velocity(model: RnnModel) -> VelocityModel:
    n, m, p, nu = model.dims
    A, B, B_s, C = model.A, model.B, model.B_s, model.C
    Acal = np.block([[A, np.zeros((n, p))], [C @ A, np.eye(p)]])
    Bcal = np.vstack([B, C @ B])
    Bscal = np.vstack([B_s, C @ B_s])
    Atilde_cal = np.hstack([model.A_tilde, np.zeros((nu, p))])
    C_xi = np.block([[A - np.eye(n), B, B_s], [C @ A, C @ B, C @ B_s]])
    # eps = y - y_bar, so the setpoint enters with a minus sign
    C_ybar = np.vstack([np.zeros((n, p)), -np.eye(p)])
    mats = [Acal, Bcal, Bscal, Atilde_cal, C_xi, C_ybar]
    for a in mats:
        a.setflags(write=False)
    return VelocityModel(*mats, n, m, p, nu)


def phi(model: RnnModel, x, u, s=None):
    """Stack ``[x; u; f_s(x, u)]`` (row-wise for batches)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if s is None:
        s = solve_implicit_layer(model, x, u)
    return np.concatenate([x, u, s], axis=-1)


def lift(model: RnnModel, vm: VelocityModel, x_prev, u_prev, y_bar, s_prev=None):
    """``xi(k)`` from the previous state/input pair and the setpoint."""
    ph = phi(model, x_prev, u_prev, s_prev)
    return ph @ vm.C_xi.T + np.asarray(y_bar, dtype=float) @ vm.C_ybar.T


def lift_jacobian(model: RnnModel, vm: VelocityModel, x, u, s=None):
    """``d xi / d(x, u)`` at ``(x, u)``; this is ``M(Theta)`` with ``Theta = sigma'(v)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if s is None:
        s = solve_implicit_layer(model, x, u)
    dsdx, dsdu, _ = implicit_sensitivity(model, x, u, s)
    n, m = model.n, model.m
    batch = x.shape[:-1]
    top = np.broadcast_to(np.block([[np.eye(n), np.zeros((n, m))], [np.zeros((m, n)), np.eye(m)]]),
                          batch + (n + m, n + m))
    dphi = np.concatenate([top, np.concatenate([dsdx, dsdu], axis=-1)], axis=-2)
    return vm.C_xi @ dphi


def dphi_dxi(model: RnnModel, vm: VelocityModel, x, u, s=None):
    """Sensitivity of ``phi`` along the inverse map: ``[I; ds/d(x,u)] M^-1``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if s is None:
        s = solve_implicit_layer(model, x, u)
    dsdx, dsdu, _ = implicit_sensitivity(model, x, u, s)
    J = lift_jacobian(model, vm, x, u, s)
    Minv = np.linalg.inv(J)
    ds = np.concatenate([dsdx, dsdu], axis=-1)
    return np.concatenate([Minv, ds @ Minv], axis=-2)


def cold_start(model: RnnModel, vm: VelocityModel, xi, y_bar):
    """Least-squares guess through the linearisation at the origin (``Theta = I``)."""
    M0 = m_matrix(model, np.ones(model.nu))
    rhs = np.asarray(xi, dtype=float) - np.asarray(y_bar, dtype=float) @ vm.C_ybar.T
    z = np.linalg.lstsq(M0, np.atleast_2d(rhs).T, rcond=None)[0].T
    z = z.reshape(np.shape(rhs)[:-1] + (model.n + model.m,))
    return z[..., : model.n], z[..., model.n:]


def unlift(model: RnnModel, vm: VelocityModel, xi, y_bar, guess=None, tol=UNLIFT_TOL, max_iter=60,
           strict=True, return_s=False):
    """Invert :func:`lift` by damped Newton.

    Works row-wise on batches. ``guess`` is an ``(x, u)`` pair; without it
    the solve starts from :func:`cold_start`. Raises ``NonConvergence`` if
    any row fails to reach ``tol`` in the infinity norm of the residual;
    with ``strict=False`` those rows come back as NaN instead.
    """
    xi = np.asarray(xi, dtype=float)
    batch = xi.shape[:-1]
    n, m = model.n, model.m
    Xi = xi.reshape(-1, vm.n_xi)
    yb = np.broadcast_to(np.asarray(y_bar, dtype=float), batch + (vm.p,)).reshape(-1, vm.p)
    if guess is None:
        x0, u0 = cold_start(model, vm, Xi, yb)
    else:
        x0 = np.broadcast_to(np.asarray(guess[0], dtype=float), batch + (n,)).reshape(-1, n)
        u0 = np.broadcast_to(np.asarray(guess[1], dtype=float), batch + (m,)).reshape(-1, m)
    Z = np.concatenate([x0, u0], axis=1).astype(float)
    Z, S, err = _newton(model, vm, Xi, yb, Z, tol, max_iter)
    failed = ~(err <= tol)
    if np.any(failed):
        if strict:
            raise NonConvergence(f"unlift residual {np.nanmax(err):.3e} after {max_iter} Newton steps")
        Z[failed] = np.nan
        S[failed] = np.nan
    out = (Z[:, :n].reshape(batch + (n,)), Z[:, n:].reshape(batch + (m,)))
    if return_s:
        out += (S.reshape(batch + (model.nu,)),)
    return out


def _newton(model, vm, Xi, yb, Z, tol, max_iter):
    n = model.n
    # the layer must be resolved well below tol or the residual floors at its error
    ltol = min(IMPLICIT_TOL, 1e-3 * tol)
    S = solve_implicit_layer(model, Z[:, :n], Z[:, n:], tol=ltol)

    def resid(z, s, yb_, xi_):
        return lift(model, vm, z[:, :n], z[:, n:], yb_, s) - xi_

    R = resid(Z, S, yb, Xi)
    err = np.max(np.abs(R), axis=1)
    # rows whose line search stalls have no nearby preimage; stop them early
    stalled = np.zeros(len(Z), dtype=bool)
    for _ in range(max_iter):
        act = np.flatnonzero((err > tol) & ~stalled)
        if act.size == 0:
            break
        z0, s0, r0, e0 = Z[act], S[act], R[act], err[act]
        J = lift_jacobian(model, vm, z0[:, :n], z0[:, n:], s0)
        dz = _batched_solve(J, r0)
        t = np.ones(act.size)
        z1 = z0 - dz
        s1 = solve_implicit_layer(model, z1[:, :n], z1[:, n:], s_guess=s0, tol=ltol)
        r1 = resid(z1, s1, yb[act], Xi[act])
        e1 = np.max(np.abs(r1), axis=1)
        for _ls in range(MAX_HALVINGS):
            bad = (e1 >= (1 - 1e-4 * t) * e0) & (e1 > tol)
            if not bad.any():
                break
            t[bad] *= 0.5
            z1[bad] = z0[bad] - t[bad, None] * dz[bad]
            s1[bad] = solve_implicit_layer(model, z1[bad, :n], z1[bad, n:], s_guess=s0[bad], tol=ltol)
            r1[bad] = resid(z1[bad], s1[bad], yb[act[bad]], Xi[act[bad]])
            e1[bad] = np.max(np.abs(r1[bad]), axis=1)
        ok = (e1 < e0) | (e1 <= tol)
        stalled[act[~ok]] = True
        act, z1, s1, r1, e1 = act[ok], z1[ok], s1[ok], r1[ok], e1[ok]
        Z[act], S[act], R[act], err[act] = z1, s1, r1, e1
    return Z, S, err


def _batched_solve(J, r):
    try:
        return np.linalg.solve(J, r[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        return np.stack([np.linalg.lstsq(Ji, ri, rcond=None)[0] for Ji, ri in zip(J, r)])


def velocity_step(vm: VelocityModel, xi, du, ds):
    return (np.asarray(xi, dtype=float) @ vm.Acal.T + np.asarray(du, dtype=float) @ vm.Bcal.T
            + np.asarray(ds, dtype=float) @ vm.Bscal.T)


def steady_state(model: RnnModel, vm: VelocityModel, y_bar, guess=None, tol=UNLIFT_TOL, max_pieces=64):
    """The equilibrium ``(x, u)`` with output ``y_bar``: the preimage of ``xi = 0``.

    Falls back to continuation in the setpoint from the origin (an
    equilibrium since ``sigma(0) = 0``), halving the step on failure.
    """
    y_bar = np.atleast_1d(np.asarray(y_bar, dtype=float))
    xi0 = np.zeros(vm.n_xi)
    try:
        return unlift(model, vm, xi0, y_bar, guess=guess, tol=tol)
    except NonConvergence:
        pass
    x, u = np.zeros(model.n), np.zeros(model.m)
    t, h = 0.0, 0.25
    while t < 1.0:
        t_next = min(1.0, t + h)
        try:
            x, u = unlift(model, vm, xi0, t_next * y_bar, guess=(x, u), tol=tol)
            t = t_next
            h = min(2 * h, 0.25)
        except NonConvergence:
            h /= 2
            if h < 1.0 / max_pieces / 16:
                raise NonConvergence(f"no equilibrium found for y_bar={y_bar} (continuation stalled at t={t:.3f})")
    return x, u


@dataclass
class XiState:
    """Velocity state partitioned as ``(dx, eps)``."""

    xi: np.ndarray
    n: int

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        if not np.all(np.isfinite(self.xi)):
            raise ValueError("xi has non-finite entries")

    @property
    def dx(self):
        return self.xi[: self.n]

    @property
    def eps(self):
        return self.xi[self.n:]
