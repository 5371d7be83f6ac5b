import csv

import numpy as np
import pytest
from scipy.linalg import solve_discrete_are

from vfrnn.constraints import box
from vfrnn.model import PlantState, step
from vfrnn.nmpc import (Fhocp, FhocpInit, NmpcController, NmpcOptions, kkt_residual, rollout, shifted_warm_start,
                        solve_fhocp, write_trace)
from vfrnn.velocity import build_velocity, steady_state

from conftest import linear_model


def init_from(model, x_prev, u_prev):
    """Measurements after holding ``u_prev`` for one step from ``x_prev``."""
    nxt, _ = step(model, PlantState.initial(model, x_prev, u_prev), u_prev)
    return FhocpInit(nxt.x, np.asarray(x_prev, float), np.atleast_1d(u_prev), model.C @ nxt.x)


def lqr(model, Q, R):
    vm = build_velocity(model)
    P = solve_discrete_are(vm.Acal, vm.Bcal, Q, R)
    K = -np.linalg.solve(R + vm.Bcal.T @ P @ vm.Bcal, vm.Bcal.T @ P @ vm.Acal)
    return P, K


@pytest.fixture(scope="module")
def small_fhocp(certified_set):
    c = certified_set[2]
    return c.model, Fhocp.from_terminal(c.model, c.terminal, N=8, y_bar=np.array([0.0]))


def test_equilibrium_needs_no_move(small_fhocp):
    m, pb = small_fhocp
    xs, us = steady_state(m, pb.vm, pb.y_bar)
    sol = solve_fhocp(pb, FhocpInit(xs, xs, us, m.C @ xs))
    assert np.max(np.abs(sol.du_sequence)) <= 1e-12 and sol.cost <= 1e-20
    assert sol.status == "solved"


@pytest.mark.parametrize("seed", range(5))
def test_unconstrained_linear_first_move_is_lqr(seed):
    rng = np.random.default_rng(seed)
    A = rng.uniform(-1.0, 1.0, (2, 2))
    m = linear_model(A, rng.normal(size=(2, 1)), rng.normal(size=(1, 2)))
    Q, R = np.eye(3), np.array([[0.5]])
    P, K = lqr(m, Q, R)
    # zero auxiliary gain, so the warm start does not already hold the answer
    pb = Fhocp(m, 6, Q, R, P, np.inf, np.zeros((1, 3)), np.zeros((1, 1)))
    init = init_from(m, rng.normal(size=2), rng.normal(size=1))
    sol = solve_fhocp(pb, init)
    assert np.max(np.abs(sol.du0 - K @ init.xi(pb.y_bar))) <= 1e-5


def test_rollout_matches_the_plant(small_fhocp):
    m, pb = small_fhocp
    rng = np.random.default_rng(1)
    init = init_from(m, rng.normal(scale=0.1, size=3), np.array([0.1]))
    dU = rng.normal(scale=0.05, size=(pb.N, 1))
    r = rollout(pb, init, dU, grad=False)
    st = PlantState.initial(m, init.x, init.u_prev)
    u = init.u_prev.copy()
    for t in range(pb.N):
        u = u + dU[t]
        assert np.allclose(st.x, r.x[t], atol=1e-10)
        st, _ = step(m, st, u)
    assert np.allclose(st.x - r.x[-1], r.xi[-1][:3], atol=1e-10)


def test_gradient_matches_finite_differences(small_fhocp):
    m, pb = small_fhocp
    init = init_from(m, np.array([0.1, -0.1, 0.05]), np.array([0.2]))
    z = np.random.default_rng(2).normal(scale=0.05, size=pb.N)
    r = rollout(pb, init, z)
    h = 1e-6
    for j in (0, pb.N // 2, pb.N - 1):
        e = np.zeros(pb.N)
        e[j] = h
        fd = (rollout(pb, init, z + e, grad=False).xi - rollout(pb, init, z - e, grad=False).xi) / (2 * h)
        assert np.max(np.abs(r.dxi[:, :, j] - fd)) <= 1e-7


def test_solution_is_feasible_and_stationary(small_fhocp):
    m, pb = small_fhocp
    init = init_from(m, np.array([0.2, -0.1, 0.1]), np.array([0.3]))
    sol = solve_fhocp(pb, init)
    assert sol.status == "solved" and sol.kkt_residual <= 1e-6
    assert np.all(pb.U.G @ sol.u_sequence.T <= pb.U.b[:, None] + 1e-6)
    assert sol.terminal_value <= pb.gamma_f * (1 + 1e-9) + 1e-6


def test_warm_start_is_feasible_and_no_better(small_fhocp):
    m, pb = small_fhocp
    init = init_from(m, np.array([0.2, -0.1, 0.1]), np.array([0.3]))
    sol = solve_fhocp(pb, init)
    nxt, _ = step(m, PlantState.initial(m, init.x, init.u_prev), init.u_prev + sol.du0)
    init2 = FhocpInit(nxt.x, init.x, init.u_prev + sol.du0, m.C @ nxt.x)
    warm = shifted_warm_start(pb, init2, sol)
    r = rollout(pb, init2, warm, grad=False)
    xN = r.xi[-1]
    assert xN @ pb.P_f @ xN <= pb.gamma_f + 1e-6
    assert np.all(pb.U.G @ r.u.T <= pb.U.b[:, None] + 1e-6)
    opt = solve_fhocp(pb, init2, warm)
    warm_cost = (np.einsum("ti,ij,tj->", r.xi[:-1], pb.Q, r.xi[:-1]) + np.einsum("ti,ij,tj->", warm, pb.R, warm)
                 + xN @ pb.P_f @ xN)
    assert opt.cost <= warm_cost + 1e-9


def test_closed_loop_cost_decreases(small_fhocp):
    m, pb = small_fhocp
    ctrl = NmpcController(pb)
    x_prev, u_prev = np.array([0.2, -0.1, 0.1]), np.array([0.3])
    init = init_from(m, x_prev, u_prev)
    costs = []
    for _ in range(12):
        u, du, sol = ctrl.step(init)
        costs.append(sol.cost)
        nxt, _ = step(m, PlantState.initial(m, init.x, init.u_prev), u)
        init = FhocpInit(nxt.x, init.x, u, m.C @ nxt.x)
    assert all(b <= a + 1e-9 for a, b in zip(costs, costs[1:]))


def test_trace_is_written(small_fhocp, tmp_path):
    m, pb = small_fhocp
    init = init_from(m, np.array([0.2, -0.1, 0.1]), np.array([0.3]))
    sol = solve_fhocp(pb, init, options=NmpcOptions(trace=True))
    write_trace(sol, tmp_path / "trace.csv")
    rows = list(csv.reader(open(tmp_path / "trace.csv")))
    assert rows[0] == ["iteration", "cost", "kkt"] and len(rows) == len(sol.trace) + 1 > 1
    costs = [float(r[1]) for r in rows[1:]]
    assert costs[-1] <= costs[0] + 1e-12


def test_problem_validation(small_fhocp):
    m, pb = small_fhocp
    with pytest.raises(ValueError, match="horizon"):
        Fhocp(m, 0, pb.Q, pb.R, pb.P_f, pb.gamma_f, pb.K, pb.K_tilde)
    with pytest.raises(ValueError, match="setpoint"):
        Fhocp(m, 3, pb.Q, pb.R, pb.P_f, pb.gamma_f, pb.K, pb.K_tilde, Y=box([-1.0], [1.0]), y_bar=np.array([2.0]))


def test_kkt_residual_of_an_interior_minimum():
    assert kkt_residual(np.zeros(3), np.ones(2), np.zeros((2, 3))) == 0.0
    assert kkt_residual(np.array([1.0, 0.0]), np.array([0.0]), np.array([[1.0, 0.0]])) <= 1e-12
    assert kkt_residual(np.zeros(2), np.array([-0.5]), np.array([[1.0, 0.0]])) == 0.5
