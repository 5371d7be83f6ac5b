"""Synthetic models: random well-posed RNNs and the shipped case-study-shaped plant."""
from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .errors import NonConvergence
from .model import RnnModel, implicit_sensitivity, solve_implicit_layer

CASE_SEED = 1
CASE_DRIVE = 2.2
SAMPLING_PERIOD = 15.0  # seconds


def random_model(rng, n=3, nu=2, m=1, p=1, rho=0.8, unstable=False, coupling=0.5, bs_scale=0.4):
    """Random tanh RNN with ``||B~_s||_2 < 1`` (hence diagonally stable, so well-posed).

    ``rho`` is the spectral radius of ``A``; ``unstable=True`` draws it in
    ``(1.02, 1.15)`` instead.
    """
    rng = np.random.default_rng(rng)
    A = rng.standard_normal((n, n))
    r = rng.uniform(1.02, 1.15) if unstable else rho
    A *= r / np.max(np.abs(np.linalg.eigvals(A)))
    B = rng.standard_normal((n, m))
    B_s = coupling * rng.standard_normal((n, nu))
    A_t = rng.standard_normal((nu, n)) / np.sqrt(n)
    B_t = rng.standard_normal((nu, m))
    E = rng.standard_normal((nu, nu))
    B_st = bs_scale * E / np.linalg.norm(E, 2)
    C = rng.standard_normal((p, n)) / np.sqrt(n)
    return RnnModel.from_matrices(A, B, B_s, A_t, B_t, B_st, C)


def equilibrium(model: RnnModel, u, x_guess=None, tol=1e-12, max_iter=50):
    """State ``x`` with ``x = A x + B u + B_s f_s(x, u)`` by Newton from ``x_guess``."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    x = np.zeros(model.n) if x_guess is None else np.asarray(x_guess, dtype=float).copy()
    I = np.eye(model.n)
    for _ in range(max_iter):
        s = solve_implicit_layer(model, x, u)
        F = (model.A - I) @ x + model.B @ u + model.B_s @ s
        if np.max(np.abs(F)) <= tol:
            return x
        dsdx, _, _ = implicit_sensitivity(model, x, u, s)
        x = x - np.linalg.solve(model.A - I + model.B_s @ dsdx, F)
    raise NonConvergence(f"equilibrium at u={u}: residual {np.max(np.abs(F)):.3e}")


def steady_state_map(model: RnnModel, u_grid):
    """Equilibrium outputs along ``u_grid`` (continuation from the first point)."""
    ys, x = [], None
    for u in u_grid:
        x = equilibrium(model, u, x)
        ys.append(model.C @ x)
    return np.array(ys)


def local_radius(model: RnnModel, u, x=None):
    """Spectral radius of the state Jacobian at the equilibrium of ``u``."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    x = equilibrium(model, u, x)
    dsdx, _, _ = implicit_sensitivity(model, x, u, solve_implicit_layer(model, x, u))
    return float(np.max(np.abs(np.linalg.eigvals(model.A + model.B_s @ dsdx))))


def case_candidate(seed, n=7, nu=3, rho=0.8, drive=1.6, max_radius=0.97):
    """Candidate plant for the shipped case study.

    The input columns are scaled so that the equilibrium pre-activations
    at ``u = 1`` reach ``drive`` in the largest channel, and ``C`` is scaled
    so that the equilibrium output runs from 0 at ``u = 0`` to 1 at ``u = 1``.
    Returns ``None`` when the equilibrium map is not strictly increasing or
    some equilibrium on the grid has a local spectral radius above ``max_radius``.
    """
    base = random_model(seed, n=n, nu=nu, rho=rho, coupling=0.4, bs_scale=0.3)
    try:
        x1 = equilibrium(base, 1.0)
    except NonConvergence:
        return None
    v1 = base.preactivation(x1, np.ones(1), solve_implicit_layer(base, x1, np.ones(1)))
    k = drive / np.max(np.abs(v1))
    model = base.replace(B=base.B * k, B_tilde=base.B_tilde * k)
    grid = np.linspace(0.0, 1.0, 101)
    try:
        y = steady_state_map(model, grid)[:, 0]
    except NonConvergence:
        return None
    if y[-1] < 0:
        model, y = model.replace(C=-model.C), -y
    if not np.all(np.diff(y) > 0):
        return None
    if max(local_radius(model, u) for u in grid[::10]) > max_radius:
        return None
    return model.replace(C=model.C / y[-1])


def case_model() -> RnnModel:
    """The shipped case-study-shaped plant (n=7, nu=3, tanh, m=p=1)."""
    from .io import model_from_dict
    doc = json.loads(resources.files("vfrnn.data").joinpath("case_model.json").read_text())
    return model_from_dict(doc)


def multilevel_signal(seed, length=3000, hold=(10, 40), levels=11):
    """Piecewise-constant excitation on ``levels`` evenly spaced values in [0, 1]."""
    rng = np.random.default_rng(seed)
    out = np.empty(length)
    k = 0
    while k < length:
        h = int(rng.integers(hold[0], hold[1] + 1))
        out[k:k + h] = rng.integers(0, levels) / (levels - 1)
        k += h
    return out[:, None]


def demo_inputs():
    """The shipped excitation signal, shape ``(T, 1)``."""
    text = resources.files("vfrnn.data").joinpath("demo_inputs.csv").read_text()
    return np.loadtxt(text.splitlines()[1:], ndmin=2)


# ---------------------------------------------------------------- scenarios

MINUTE = 60.0
DISTURBANCE = 0.15
# the manipulated flow moves from 0.55 to 0.88 in the reference experiment
INPUT_GAIN = 0.88 / 0.55
PHYSICAL_U = (12.5, 17.0)
PHYSICAL_Y = (5.94, 9.13)


def to_physical(u=None, y=None):
    """Map normalised input/output values back to the physical ranges for display."""
    out = []
    if u is not None:
        out.append(PHYSICAL_U[0] + np.asarray(u) * (PHYSICAL_U[1] - PHYSICAL_U[0]))
    if y is not None:
        out.append(PHYSICAL_Y[0] + np.asarray(y) * (PHYSICAL_Y[1] - PHYSICAL_Y[0]))
    return out[0] if len(out) == 1 else tuple(out)


def nominal_scenario(model=None, controller="nmpc", feedback="state", horizon=10):
    """Three setpoint levels on the nominal plant, 200 steps."""
    from .constraints import box
    from .simulator import Scenario
    Ts = SAMPLING_PERIOD
    return Scenario(model or case_model(), [(0.0, [0.3]), (70 * Ts, [0.6]), (140 * Ts, [0.45])], 200, Ts,
                    U=box([0.0], [1.0]), Y=box([0.0], [1.0]), controller=controller, feedback=feedback,
                    horizon=horizon, name="nominal")


def phlike_scenario(model=None, time_scale=1.0, controller="nmpc", feedback="observer", horizon=10):
    """Output disturbance and input-gain change on the windows of the reference experiment.

    ``time_scale`` compresses every schedule time (and the duration).
    """
    from .constraints import box
    from .simulator import PlantSpec, Scenario
    Ts = SAMPLING_PERIOD
    c = time_scale * MINUTE
    plant = PlantSpec(output_disturbance=[(24.5 * c, 66.5 * c, [DISTURBANCE])],
                      input_gain=[(128.5 * c, 164.0 * c, INPUT_GAIN)])
    setpoints = [(0.0, [0.5]), (95.0 * c, [0.35]), (175.0 * c, [0.55])]
    duration = int(round(200.0 * c / Ts))
    return Scenario(model or case_model(), setpoints, duration, Ts, plant, box([0.0], [1.0]), box([0.0], [1.0]),
                    controller, feedback, horizon, name="phlike")
