import numpy as np

from vfrnn.model import IMPLICIT_TOL, PlantState, step
from vfrnn.runtime import ControllerState, ObserverState, observer_step, static_control
from vfrnn.synthesis import DesignOptions, augment, design_controller, design_observer
from vfrnn.velocity import build_velocity, lift, steady_state

from conftest import linear_model, small_model


def picard_ds(model, K, Kt, xi, v_prev, iters=20_000):
    At = np.hstack([model.A_tilde, np.zeros((model.nu, model.p))])
    At_K = At + model.B_tilde @ K
    E = model.B_s_tilde + model.B_tilde @ Kt
    ds = np.zeros(model.nu)
    for _ in range(iters):
        new = np.tanh(v_prev + At_K @ xi + E @ ds) - np.tanh(v_prev)
        if np.max(np.abs(new - ds)) < 1e-15:
            break
        ds = 0.5 * ds + 0.5 * new
    return new


def test_zero_xi_gives_zero_move(certified_set):
    c = certified_set[0]
    st = ControllerState.from_plant(c.model, np.array([0.1, 0.2, -0.1]), np.array([0.3]))
    du, ds, new = static_control(c.model, c.controller.K, c.controller.K_tilde, np.zeros(4), st)
    assert np.array_equal(du, np.zeros(1)) and np.array_equal(ds, np.zeros(2))
    assert np.array_equal(new.u_prev, st.u_prev) and np.array_equal(new.v_prev, st.v_prev)


def test_linear_plant_law_is_plain_state_feedback():
    m = linear_model([[1.1, 0.2], [0.0, 0.7]], [[0.0], [1.0]], [[1.0, 0.0]])
    d = design_controller(m, options=DesignOptions(lambda_init="zero"))
    st = ControllerState.from_plant(m, np.zeros(2), np.zeros(1))
    xi = np.array([0.3, -0.2, 0.1])
    du, _, _ = static_control(m, d.K, d.K_tilde, xi, st)
    assert np.allclose(du, d.K @ xi, atol=1e-15)


def test_layer_increment_matches_picard(certified_set):
    rng = np.random.default_rng(0)
    for c in certified_set[:4]:
        K, Kt = c.controller.K, c.controller.K_tilde
        E = c.model.B_s_tilde + c.model.B_tilde @ Kt
        if np.linalg.norm(E, 2) >= 1:
            continue
        for _ in range(10):
            st = ControllerState.from_plant(c.model, rng.normal(scale=0.3, size=3), rng.normal(scale=0.3, size=1))
            xi = rng.normal(scale=0.3, size=4)
            _, ds, _ = static_control(c.model, K, Kt, xi, st)
            assert np.max(np.abs(ds - picard_ds(c.model, K, Kt, xi, st.v_prev))) <= 1e-8


def test_state_update_matches_the_plant(certified_set):
    """After the move, the controller's stored layer equals the plant's layer at the new state."""
    c = certified_set[1]
    m = c.model
    vm = build_velocity(m)
    y_bar = np.array([0.1])
    xs, us = steady_state(m, vm, y_bar)
    x_prev, u_prev = xs + np.array([0.05, -0.02, 0.03]), us
    st = ControllerState.from_plant(m, x_prev, u_prev)
    plant = PlantState.initial(m, x_prev, u_prev)
    nxt, _ = step(m, plant, u_prev)
    xi = np.concatenate([nxt.x - x_prev, m.C @ nxt.x - y_bar])
    du, _, new = static_control(m, c.controller.K, c.controller.K_tilde, xi, st)
    after, _ = step(m, nxt, u_prev + du)
    assert np.allclose(new.s_prev, after.s, atol=1e-9)
    assert np.allclose(new.u_prev, u_prev + du)


def test_lyapunov_decreases_along_a_closed_loop_run(certified_set):
    c = certified_set[3]
    m, d = c.model, c.controller
    vm = build_velocity(m)
    y_bar = np.array([0.05])
    xs, us = steady_state(m, vm, y_bar)
    x_prev, u_prev = xs + 0.05, us
    st = ControllerState.from_plant(m, x_prev, u_prev)
    x = m.A @ x_prev + m.B @ u_prev + m.B_s @ st.s_prev
    # below this the state is at the implicit-solver floor
    floor = np.linalg.eigvalsh(d.P_c)[-1] * (10 * IMPLICIT_TOL) ** 2
    V = []
    for _ in range(300):
        xi = np.concatenate([x - x_prev, m.C @ x - y_bar])
        V.append(xi @ d.P_c @ xi)
        if V[-1] < floor:
            V.pop()
            break
        du, _, st = static_control(m, d.K, d.K_tilde, xi, st)
        x_prev, x = x, m.A @ x + m.B @ st.u_prev + m.B_s @ st.s_prev
    assert all(b < a for a, b in zip(V, V[1:]))
    assert V[-1] < 1e-3 * V[0]


# ---------------------------------------------------------------- observer

def _observer_run(m, d, steps, e0, dist=None, seed=0):
    rng = np.random.default_rng(seed)
    aug = augment(m)
    dist = np.zeros(m.p) if dist is None else dist
    x = rng.normal(scale=0.2, size=m.n)
    obs = ObserverState(np.concatenate([x, dist]) - e0, np.zeros(m.nu))
    errs, innov = [], []
    for _ in range(steps):
        u = rng.uniform(-0.5, 0.5, m.m)
        y = m.C @ x + dist
        errs.append(np.concatenate([x, dist]) - obs.eta_hat)
        obs, e_y = observer_step(m, d.L, d.L_tilde, obs, u, y, aug)
        innov.append(e_y)
        x, _ = step(m, PlantState.initial(m, x, u), u)[0].x, None
    return np.array(errs), np.array(innov), obs


def test_perfect_initialisation_keeps_zero_error():
    m = small_model(0)
    d = design_observer(m)
    errs, innov, _ = _observer_run(m, d, 50, np.zeros(m.n + m.p))
    # exact in exact arithmetic; both layer solves stop at the implicit tolerance
    assert np.max(np.abs(innov)) <= 10 * IMPLICIT_TOL and np.max(np.abs(errs)) <= 10 * IMPLICIT_TOL


def test_constant_disturbance_is_recovered():
    m = small_model(2)
    d = design_observer(m)
    dist = np.array([0.15])
    errs, _, obs = _observer_run(m, d, 300, np.concatenate([np.zeros(m.n), dist]), dist)
    assert np.max(np.abs(obs.d_hat(m.n) - dist)) <= 1e-6


def test_estimation_error_norm_decreases():
    m = small_model(4)
    d = design_observer(m)
    errs, _, _ = _observer_run(m, d, 40, np.array([0.3, -0.2, 0.1, 0.2]))
    V = np.einsum("ij,jk,ik->i", errs, d.P_o, errs)
    # below the implicit-solver floor the error is rounding noise
    V = V[V > np.linalg.eigvalsh(d.P_o)[-1] * (10 * IMPLICIT_TOL) ** 2]
    assert V.size > 5
    assert np.all(np.diff(V) < 0)


def test_state_feedback_initialisation_from_plant():
    m = small_model(5)
    x, u = np.array([0.1, 0.0, -0.2]), np.array([0.4])
    st = ControllerState.from_plant(m, x, u)
    assert np.allclose(st.s_prev, np.tanh(st.v_prev), atol=1e-12)
    assert np.allclose(lift(m, build_velocity(m), x, u, [0.0], st.s_prev)[:3],
                       m.A @ x + m.B @ u + m.B_s @ st.s_prev - x)
