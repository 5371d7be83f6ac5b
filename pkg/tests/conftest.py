"""Shared fixtures: small random plants, the shipped case model and cached designs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from vfrnn.casestudy import case_model, demo_inputs, random_model
from vfrnn.constraints import box
from vfrnn.synthesis import (DesignOptions, design_controller, design_observer, design_terminal,
                             empirical_bound)

# ten small plants, the odd seeds open-loop unstable
# seeds whose plant passes the rank test (2, 3 and 4 have a singular M(Theta)) and admits
# both designs (the terminal LMI of seed 13 is infeasible up to the slope cap)
CERT_SEEDS = (0, 1, 5, 6, 7, 8, 9, 11, 12, 14)


def small_model(seed, unstable=None):
    return random_model(seed, n=3, nu=2, unstable=(seed % 2 == 1) if unstable is None else unstable)


def excitation(seed, length=200, amp=0.5, m=1):
    return np.random.default_rng(seed).uniform(-amp, amp, (length, m))


@dataclass
class Certified:
    seed: int
    model: object
    controller: object
    terminal: object


@pytest.fixture(scope="session")
def certified_set():
    out = []
    for seed in CERT_SEEDS:
        m = small_model(seed)
        db = empirical_bound(m, excitation(seed))
        ctrl = design_controller(m, db)
        term = design_terminal(m, db, U=box([-1.0], [1.0]), Y=box([-1.0], [1.0]))
        out.append(Certified(seed, m, ctrl, term))
    return out


@pytest.fixture(scope="session")
def case():
    return case_model()


@pytest.fixture(scope="session")
def case_bound(case):
    return empirical_bound(case, demo_inputs())


@pytest.fixture(scope="session")
def case_terminal(case, case_bound):
    return design_terminal(case, case_bound, U=box([0.0], [1.0]), Y=box([0.0], [1.0]),
                           options=DesignOptions(y_bar=np.array([0.5])))


@pytest.fixture(scope="session")
def case_controller(case, case_bound):
    return design_controller(case, case_bound, DesignOptions(y_bar=np.array([0.5])))


@pytest.fixture(scope="session")
def case_observer(case):
    return design_observer(case)


def linear_model(A, B, C):
    """A plant whose layer is disconnected: ``A_tilde = 0``, ``B_tilde = 0``, ``B_s = 0``."""
    A, B, C = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, C))
    n, m = B.shape
    from vfrnn.model import RnnModel
    return RnnModel.from_matrices(A, B, np.zeros((n, 1)), np.zeros((1, n)), np.zeros((1, m)), np.zeros((1, 1)), C)


def plant_closed_loop(model, K, K_tilde, xi, y_bar, guess=None):
    """One closed-loop step of the static law on the plant itself, for a batch of ``xi``.

    Each ``xi`` is mapped back to the plant pair ``(x(k-1), u(k-1))``; the
    static law gives ``du`` from the realised layer increment, the plant
    advances, and the successor is lifted again. Returns
    ``(xi_next, du, ok)`` with ``ok`` marking rows whose preimage was found.
    """
    from vfrnn.model import solve_implicit_layer, solve_layer
    from vfrnn.velocity import build_velocity, lift, steady_state, unlift
    vm = build_velocity(model)
    xi = np.atleast_2d(xi)
    if guess is None:
        guess = steady_state(model, vm, y_bar)
    xp, up, sp = unlift(model, vm, xi, y_bar, guess=guess, strict=False, return_s=True)
    ok = np.all(np.isfinite(xp), axis=1)
    xp, up, sp, X = xp[ok], up[ok], sp[ok], xi[ok]
    x = xp @ model.A.T + up @ model.B.T + sp @ model.B_s.T
    At = np.hstack([model.A_tilde, np.zeros((model.nu, model.p))])
    At_K = At + model.B_tilde @ K
    E = model.B_s_tilde + model.B_tilde @ K_tilde
    v_prev = model.preactivation(xp, up, sp)
    s_new = solve_layer(model, v_prev + X @ At_K.T - sp @ E.T, B_s_tilde=E, s_guess=sp)
    du = X @ K.T + (s_new - sp) @ K_tilde.T
    u = up + du
    s = solve_implicit_layer(model, x, u, s_guess=s_new)
    return lift(model, vm, x, u, y_bar, s), du, ok


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and outcome == "passed":
                continue
            num = int(nodeid.split("test_criterion_")[1].split("_")[0])
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((num, f"criterion {num:2d}: {'PASS' if outcome == 'passed' else 'FAIL'}  {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
