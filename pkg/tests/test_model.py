import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vfrnn.activations import TANH, check_activation, get_activation
from vfrnn.errors import SingularPhi, UnsupportedActivation
from vfrnn.model import (PlantState, RnnModel, m_matrix, rank_M_check, simulate, solve_implicit_layer, step,
                         well_posedness_check)

from conftest import small_model


def scalar(A=0.5, B=1.0, B_s=0.0, At=0.0, Bt=0.0, Bst=0.0, C=1.0):
    return RnnModel.from_matrices(*[np.array([[v]], dtype=float) for v in (A, B, B_s, At, Bt, Bst, C)])


def bisect(f, lo, hi, tol=1e-14):
    flo = f(lo)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if (f(mid) > 0) == (flo > 0):
            lo, flo = mid, f(mid)
        else:
            hi = mid
    return 0.5 * (lo + hi)


def picard(model, x, u, iters=5000):
    s = np.zeros(model.nu)
    for _ in range(iters):
        s = np.tanh(model.A_tilde @ x + model.B_tilde @ u + model.B_s_tilde @ s)
    return s


# ---------------------------------------------------------------- implicit layer

def test_zero_input_gives_zero_layer():
    m = small_model(3)
    assert np.array_equal(solve_implicit_layer(m, np.zeros(3), np.zeros(1)), np.zeros(2))


def test_explicit_layer_when_feedthrough_vanishes():
    m = small_model(0).replace(B_s_tilde=np.zeros((2, 2)))
    x, u = np.array([0.3, -1.0, 2.0]), np.array([0.7])
    assert np.array_equal(solve_implicit_layer(m, x, u), np.tanh(m.A_tilde @ x + m.B_tilde @ u))


def test_scalar_fixed_point_matches_bisection():
    m = scalar(Bt=1.0, Bst=0.5)
    s = solve_implicit_layer(m, np.zeros(1), np.ones(1))
    oracle = bisect(lambda z: z - np.tanh(0.5 * z + 1.0), 0.0, 1.0)
    assert abs(s[0] - oracle) <= 1e-10
    assert round(oracle, 4) == 0.8952


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_layer_residual_and_uniqueness(seed):
    rng = np.random.default_rng(seed)
    m = small_model(seed, unstable=False)
    x = rng.normal(scale=3.0, size=3)
    u = rng.normal(scale=3.0, size=1)
    s1 = solve_implicit_layer(m, x, u)
    s2 = solve_implicit_layer(m, x, u, s_guess=rng.uniform(-1, 1, 2))
    assert np.max(np.abs(s1 - np.tanh(m.preactivation(x, u, s1)))) <= 1e-10
    assert np.max(np.abs(s1 - s2)) <= 1e-8


def test_layer_agrees_with_picard_oracle():
    m = small_model(5)
    rng = np.random.default_rng(1)
    for _ in range(20):
        x, u = rng.normal(size=3), rng.normal(size=1)
        assert np.max(np.abs(solve_implicit_layer(m, x, u) - picard(m, x, u))) <= 1e-9


# ---------------------------------------------------------------- step and simulate

def test_identity_dynamics_hold_state():
    m = RnnModel.from_matrices(np.eye(2), np.zeros((2, 1)), np.zeros((2, 1)), np.ones((1, 2)), np.ones((1, 1)),
                               np.zeros((1, 1)), np.ones((1, 2)))
    x0 = np.array([0.4, -2.0])
    nxt, y = step(m, PlantState.initial(m, x0, np.zeros(1)), np.array([3.0]))
    assert np.array_equal(nxt.x, x0)
    assert np.allclose(y, [x0.sum()])


def test_zero_state_zero_input_is_equilibrium():
    m = small_model(2)
    nxt, y = step(m, PlantState.initial(m, np.zeros(3), np.zeros(1)), np.zeros(1))
    assert np.array_equal(nxt.x, np.zeros(3)) and np.array_equal(y, np.zeros(1))


def test_simulate_matches_naive_loop():
    m = small_model(4, unstable=False)
    rng = np.random.default_rng(0)
    u = rng.uniform(-1, 1, (10, 1))
    x0 = rng.normal(size=3)
    xs, ss, ys = simulate(m, x0, u)
    x = x0.copy()
    for k in range(10):
        assert np.max(np.abs(ys[k] - m.C @ x)) <= 1e-9
        s = picard(m, x, u[k])
        x = m.A @ x + m.B @ u[k] + m.B_s @ s
        assert np.max(np.abs(xs[k + 1] - x)) <= 1e-9


def test_step_is_deterministic():
    m = small_model(6)
    st0 = PlantState.initial(m, np.array([0.1, 0.2, 0.3]), np.zeros(1))
    a, ya = step(m, st0, np.array([0.5]))
    b, yb = step(m, st0, np.array([0.5]))
    assert a.x.tobytes() == b.x.tobytes() and a.s.tobytes() == b.s.tobytes() and ya.tobytes() == yb.tobytes()


# ---------------------------------------------------------------- activations

def test_tanh_passes_activation_checks():
    assert check_activation(TANH)["ok"]


def test_tanh_is_one_lipschitz_on_pairs():
    a, b = np.random.default_rng(3).uniform(-10, 10, (2, 10_000))
    assert np.all(np.abs(np.tanh(a) - np.tanh(b)) <= np.abs(a - b))


def test_unknown_activation_rejected():
    with pytest.raises(UnsupportedActivation):
        get_activation("relu")


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError, match="B_s"):
        RnnModel.from_matrices(np.eye(2), np.ones((2, 1)), np.ones((3, 1)), np.ones((1, 2)), np.ones((1, 1)),
                               np.zeros((1, 1)), np.ones((1, 2)))


# ---------------------------------------------------------------- well-posedness

def _with_feedthrough(E):
    E = np.asarray(E, dtype=float)
    nu = E.shape[0]
    return RnnModel.from_matrices(0.5 * np.eye(2), np.ones((2, 1)), np.ones((2, nu)), np.ones((nu, 2)),
                                  np.ones((nu, 1)), E, np.ones((1, 2)))


def test_zero_feedthrough_is_certified():
    rep = well_posedness_check(_with_feedthrough(np.zeros((2, 2))))
    assert rep.lemma1_feasible and rep.passed
    # P = I is itself a certificate: E'P + PE - 2P = -2I
    assert np.all(np.linalg.eigvalsh(-2 * np.eye(2)) < 0)


def test_identity_feedthrough_has_no_certificate():
    rep = well_posedness_check(_with_feedthrough(np.eye(2)))
    assert not rep.lemma1_feasible
    assert not rep.sampled_ok


def test_nilpotent_feedthrough_certificate_satisfies_determinant_condition():
    E = np.array([[0.0, 0.0], [1.0, 0.0]])
    rep = well_posedness_check(_with_feedthrough(E))
    assert rep.lemma1_feasible and rep.passed
    p1, p2 = np.diag(rep.lemma1_P)
    assert 0 < p2 < 4 * p1
    # any diagonal P with p2 < 4 p1 certifies; one just outside does not
    for P, ok in ((np.diag([1.0, 3.9]), True), (np.diag([1.0, 4.1]), False)):
        M = E.T @ P + P @ E - 2 * P
        assert (np.max(np.linalg.eigvalsh(M)) < 0) == ok


# ---------------------------------------------------------------- rank of M

def test_rank_m_scalar_example():
    m = scalar(A=0.5, B=1.0, B_s=0.0, C=1.0)
    M = m_matrix(m, np.ones(1))
    assert np.allclose(M, [[-0.5, 1.0], [0.5, 1.0]])
    assert np.isclose(np.linalg.det(M), -1.0)
    assert rank_M_check(m, [np.ones(1)])


def test_rank_m_fails_without_output():
    assert not rank_M_check(scalar(C=0.0), [np.ones(1)])


def test_rank_m_fails_without_input_path():
    assert not rank_M_check(scalar(B=0.0, B_s=0.0, Bt=1.0), [np.ones(1)])


def test_rank_m_singular_phi_raises():
    m = scalar(Bst=1.0)
    with pytest.raises(SingularPhi):
        rank_M_check(m, [np.ones(1)])


def test_rank_m_rejects_out_of_range_slopes():
    with pytest.raises(ValueError):
        rank_M_check(scalar(), [np.zeros(1)])


def test_rank_check_catches_a_determinant_sign_change():
    # det M = -C (B + B_s theta Bt) vanishes at theta = 0.5, between the two samples
    m = scalar(B=1.0, B_s=-2.0, Bt=1.0)
    thetas = [np.array([0.1]), np.array([0.9])]
    assert all(rank_M_check(m, [t]) for t in thetas)
    assert not rank_M_check(m, thetas)
