"""Streaming execution of the static control law and the state observer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonConvergence
from .model import IMPLICIT_TOL, RnnModel, solve_implicit_layer, solve_layer
from .synthesis import AugmentedModel, augment


@dataclass
class ControllerState:
    """``u(k-1)``, the pre-activation ``v(k-1)`` and ``s(k-1) = sigma(v(k-1))``."""

    u_prev: np.ndarray
    v_prev: np.ndarray
    s_prev: np.ndarray

    @classmethod
    def from_plant(cls, model: RnnModel, x_prev, u_prev, s_prev=None):
        """Initialise from the previous ``(x, u)`` pair rather than from zero."""
        x_prev = np.asarray(x_prev, dtype=float)
        u_prev = np.atleast_1d(np.asarray(u_prev, dtype=float))
        if s_prev is None:
            s_prev = solve_implicit_layer(model, x_prev, u_prev)
        v_prev = model.preactivation(x_prev, u_prev, s_prev)
        return cls(u_prev.copy(), v_prev, np.asarray(s_prev, dtype=float).copy())


def static_control(model: RnnModel, K, K_tilde, xi, state: ControllerState, tol=IMPLICIT_TOL):
    """One step of ``du = K xi + K~ ds_c``.

    ``ds_c`` solves ``ds_c = sigma(At_K xi + Bt_sK ds_c + v-) - sigma(v-)``.
    Writing ``s = s- + ds_c`` turns this into the layer equation
    ``s = sigma(w + Bt_sK s)`` with ``w = v- + At_K xi - Bt_sK s-``.
    Returns ``(du, ds_c, new_state)``.
    """
    xi = np.asarray(xi, dtype=float)
    K = np.atleast_2d(K)
    K_tilde = np.atleast_2d(K_tilde)
    n, p = model.n, model.p
    At = np.hstack([model.A_tilde, np.zeros((model.nu, p))])
    At_K = At + model.B_tilde @ K
    Bt_sK = model.B_s_tilde + model.B_tilde @ K_tilde
    s_minus = model.sigma(state.v_prev)
    if not np.any(xi):
        ds = np.zeros(model.nu)
    else:
        w = state.v_prev + At_K @ xi - Bt_sK @ s_minus
        s_new = solve_layer(model, w, B_s_tilde=Bt_sK, s_guess=s_minus, tol=tol)
        res = np.max(np.abs(s_new - model.sigma(w + Bt_sK @ s_new)))
        if res > tol:
            raise NonConvergence(f"static law: implicit residual {res:.3e}")
        ds = s_new - s_minus
    du = K @ xi + K_tilde @ ds
    v_new = state.v_prev + At_K @ xi + Bt_sK @ ds
    new = ControllerState(state.u_prev + du, v_new, s_minus + ds)
    return du, ds, new


@dataclass
class ObserverState:
    """Estimate ``eta_hat = [x_hat; d_hat]`` and the last layer solution ``s_hat``."""

    eta_hat: np.ndarray
    s_hat: np.ndarray

    def x_hat(self, n):
        return self.eta_hat[:n]

    def d_hat(self, n):
        return self.eta_hat[n:]

    @classmethod
    def initial(cls, model: RnnModel, x_hat=None, d_hat=None):
        x_hat = np.zeros(model.n) if x_hat is None else np.asarray(x_hat, dtype=float)
        d_hat = np.zeros(model.p) if d_hat is None else np.asarray(d_hat, dtype=float)
        return cls(np.concatenate([x_hat, d_hat]), np.zeros(model.nu))


def observer_step(model: RnnModel, L, L_tilde, obs: ObserverState, u, y, aug: AugmentedModel | None = None,
                  tol=IMPLICIT_TOL):
    """Advance the observer by one sample.

    With ``e_y = y - C_e eta_hat`` the layer ``s_hat = sigma(At_e eta_hat + B~ u + B~_s s_hat + L~ e_y)``
    is solved by Newton, then ``eta_hat+ = A_e eta_hat + B_e u + B_se s_hat + L e_y``.
    The returned state holds ``eta_hat(k+1)`` and ``s_hat(k)``; the innovation is returned too.
    """
    aug = aug or augment(model)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    eta = obs.eta_hat
    e_y = y - aug.C_e @ eta
    w = aug.At_e @ eta + model.B_tilde @ u + np.asarray(L_tilde) @ e_y
    s_hat = solve_layer(model, w, s_guess=obs.s_hat, tol=tol)
    res = np.max(np.abs(s_hat - model.sigma(w + model.B_s_tilde @ s_hat)))
    if res > tol:
        raise NonConvergence(f"observer: implicit residual {res:.3e}")
    eta_next = aug.A_e @ eta + aug.B_e @ u + aug.B_se @ s_hat + np.asarray(L) @ e_y
    return ObserverState(eta_next, s_hat), e_y
