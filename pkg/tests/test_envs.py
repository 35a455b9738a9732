import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import solve_ivp

from recoverkit.envs import fall as F
from recoverkit.envs.balancer import (BalancerParams, balance_reward, balancer_step, closed_loop_matrix,
                                      lqr_action, lqr_gain, outside_support)
from recoverkit.envs.cartpole import CartpoleParams, SwingupTask, cartpole_step


# ------------------------------------------------------------------- fall

def test_impulse_examples():
    assert F.impulse(1.0, 0.3, 0.0, 0.0, 0.2, 0.0, 0.0) == 0.0
    assert F.impulse(1.0, 0.3, 0.1, 0.0, 0.1, 0.0, -2.0) == 2.0
    j = F.impulse(2.0, 0.5, 0.0, 0.0, 0.3, 0.0, -1.5)
    assert j == pytest.approx(1.5 / (0.5 + 0.18), abs=1e-12)
    assert j == pytest.approx(2.20588, abs=1e-5)


def test_impulse_rejects_upward_contact():
    with pytest.raises(ValueError):
        F.impulse(1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.1)


def test_fall_reward_examples():
    assert F.fall_reward(0.0) == 1.0
    assert F.fall_reward(1.0) == 0.5
    j = 1.5 / 0.68
    assert F.fall_reward(j) == pytest.approx(1.0 / (1.0 + j), abs=1e-12)
    # the rounded figure 0.31195 is about 2e-5 off the exact 0.311927
    assert F.fall_reward(j) == pytest.approx(0.31195, abs=5e-5)


@given(st.floats(0.1, 10), st.floats(0.01, 5), st.floats(0, 1), st.floats(0, 1), st.floats(-5, 0))
def test_impulse_properties(M, I, d1, extra, ydot):
    j1 = F.impulse(M, I, 0.0, 0.0, d1, 0.0, ydot)
    j2 = F.impulse(M, I, 0.0, 0.0, d1 + extra, 0.0, ydot)
    assert j1 >= 0.0 and j2 <= j1 + 1e-12
    assert F.impulse(M, I, 0.0, 0.0, d1, 0.0, 2 * ydot) == pytest.approx(2 * j1, rel=1e-12, abs=1e-300)


@given(st.floats(0, 1e6), st.floats(1e-6, 1e3))
def test_fall_reward_decreasing_in_unit_interval(j, dj):
    r1, r2 = F.fall_reward(j), F.fall_reward(j + dj)
    assert 0.0 < r2 < r1 <= 1.0


def test_balanced_rest_state_halts():
    p = F.FallModelParams()
    s = F.AbstractFallState(0, 0.17, 0.0, 0.0, 0.0)
    out = F.fall_simulate_to_next_contact(p, s, 1, F.FallAction(0.0, 0.05, 0.0))
    assert out.halted and out.impulse == 0.0 and out.state == s


def test_theta_monotone_until_contact():
    p = F.FallModelParams()
    y = (0.17, 0.1, 0.0, 0.5)
    thetas = [y[1]]
    while y[0] * math.cos(y[1]) > 0.05:
        y = F._rk4(p, y, 0.0, p.dt)
        thetas.append(y[1])
    assert np.all(np.diff(thetas) > 0)


def test_energy_conserved_without_servo_motion():
    p = F.FallModelParams()
    y = (0.17, 0.05, 0.0, 0.3)
    e = F.mechanical_energy(p, *y)
    for _ in range(500):
        y = F._rk4(p, y, 0.0, p.dt)
        e_new = F.mechanical_energy(p, *y)
        assert abs(e_new - e) <= 1e-6 * abs(e)
        e = e_new


def test_fall_steps_are_deterministic():
    p = F.FallModelParams()
    s = F.AbstractFallState(0, 0.17, 0.12, 0.0, 0.6)
    a = F.FallAction(0.2, 0.05, -0.1)
    assert F.fall_simulate_to_next_contact(p, s, 1, a) == F.fall_simulate_to_next_contact(p, s, 1, a)


# --------------------------------------------------------------- cartpole

def lagrangian_rhs(params, u):
    """Cart-pole from the Lagrangian mass matrix (rod of half length l, inertia m l^2 / 3)."""
    l, m, M = 0.5 * params.pole_length, params.pole_mass, params.cart_mass
    g = params.gravity

    def rhs(t, y):
        x, xd, phi, phid = y
        c, s = math.cos(phi), math.sin(phi)
        A = np.array([[M + m, m * l * c], [m * l * c, 4.0 / 3.0 * m * l * l]])
        b = np.array([u - params.trans_friction * np.sign(xd) + m * l * s * phid ** 2,
                      m * g * l * s - params.rot_damping * phid - params.rot_friction * np.sign(phid)])
        xdd, phidd = np.linalg.solve(A, b)
        return [xd, xdd, phid, phidd]
    return rhs


def test_upright_equilibrium_is_fixed_point():
    p = CartpoleParams()
    s = np.zeros(4)
    assert np.array_equal(cartpole_step(p, s, 0.0), s)


def test_hanging_rest_invariant_to_pole_mass():
    s = np.array([0.0, 0.0, np.pi, 0.0])
    for mass in (0.1, 0.2):
        p = CartpoleParams(pole_mass=mass)
        out = s
        for _ in range(100):
            out = cartpole_step(p, out, 0.0)
        assert np.allclose(out, s, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_step_matches_fine_reference_integration(seed):
    rng = np.random.default_rng(seed)
    p = CartpoleParams(pole_mass=0.3, rot_damping=0.02, rot_friction=0.01, trans_friction=0.05)
    s = rng.uniform([-1, -1, -np.pi, -3], [1, 1, np.pi, 3])
    s[1] = np.sign(s[1]) * max(abs(s[1]), 0.2)      # keep Coulomb signs fixed over the step
    s[3] = np.sign(s[3]) * max(abs(s[3]), 0.5)
    u = rng.uniform(-10, 10)
    ref = solve_ivp(lagrangian_rhs(p, u), (0.0, p.step_dt), s, method="RK45", rtol=1e-11, atol=1e-12,
                    max_step=p.step_dt / 100).y[:, -1]
    assert np.max(np.abs(cartpole_step(p, s, u) - ref)) < 1e-3


def test_frictionless_matches_textbook_cartpole():
    p = CartpoleParams(pole_mass=0.1, cart_mass=1.0, pole_length=1.0)
    s = np.array([0.1, -0.2, 0.4, 0.3])
    ref = s.copy()
    for k in range(200):
        u = 5.0 * math.sin(0.1 * k)
        s = cartpole_step(p, s, u)
        # textbook form, half-length l = 0.5
        x, xd, th, thd = ref
        total, pml = 1.1, 0.1 * 0.5
        tmp = (u + pml * thd * thd * math.sin(th)) / total
        thdd = (9.8 * math.sin(th) - math.cos(th) * tmp) / (0.5 * (4.0 / 3.0 - 0.1 * math.cos(th) ** 2 / total))
        xdd = tmp - pml * thdd * math.cos(th) / total
        xd, thd = xd + 0.005 * xdd, thd + 0.005 * thdd
        ref = np.array([x + 0.005 * xd, xd, th + 0.005 * thd, thd])
    assert np.allclose(s, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cartpole_fault_on_non_finite():
    from recoverkit.envs.cartpole import CartpoleFault
    with pytest.raises(CartpoleFault):
        cartpole_step(CartpoleParams(), np.array([0.0, 0.0, 0.0, np.inf]), 0.0)


def test_swingup_reward_and_termination():
    task = SwingupTask()
    state = task.reset(2, np.random.default_rng(0), states=[[0, 0, 0, 0], [2.39, 5.0, np.pi, 0]])
    nxt, r, term, trunc = task.step(state, np.array([[0.0], [1.0]]))
    assert r[0] == pytest.approx(1.0, abs=1e-6)
    assert term[1] and r[1] == 0.0


# --------------------------------------------------------------- balancer

def test_balancer_rest_unchanged():
    p = BalancerParams()
    C, V = np.array([0.03, -0.02]), np.zeros(2)
    C2, V2 = balancer_step(p, C, V, np.zeros(2))
    assert np.array_equal(C2, C) and np.array_equal(V2, V)


def test_constant_force_without_drag():
    p = BalancerParams(drag=0.0, mass=2.0)
    C, V = np.zeros(2), np.zeros(2)
    F_ = np.array([3.0, -1.0])
    for _ in range(500):
        C, V = balancer_step(p, C, V, F_)
    assert np.allclose(V, F_ * 500 * p.dt / p.mass, rtol=1e-12)


def test_damped_trajectory_matches_closed_form():
    p = BalancerParams(mass=1.5, drag=0.7)
    C, V = np.array([0.01, 0.02]), np.array([0.1, -0.3])
    C0, V0 = C.copy(), V.copy()
    u = np.array([0.4, 1.0])
    n = int(round(1.0 / p.dt))
    for _ in range(n):
        C, V = balancer_step(p, C, V, u)
    k = p.drag / p.mass
    t = n * p.dt
    v_inf = u / p.drag
    V_ref = v_inf + (V0 - v_inf) * math.exp(-k * t)
    C_ref = C0 + v_inf * t + (V0 - v_inf) * (1 - math.exp(-k * t)) / k
    assert np.max(np.abs(C - C_ref)) < 1e-6 and np.max(np.abs(V - V_ref)) < 1e-6


def test_lqr_action_examples():
    K = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
    assert np.array_equal(lqr_action(K, np.array([1.0, 0.0]), np.zeros(2)), np.array([-1.0, -0.0]))
    K = lqr_gain(BalancerParams())
    assert np.array_equal(lqr_action(K, np.zeros(2), np.zeros(2)), np.zeros(2))


def test_lqr_closed_loop_converges():
    p = BalancerParams()
    K = lqr_gain(p)
    assert np.all(np.linalg.eigvals(closed_loop_matrix(p, K)).real < 0)
    C, V = np.array([0.1, -0.05]), np.array([0.2, 0.1])
    for k in range(int(round(5.0 / p.dt))):
        C, V = balancer_step(p, C, V, lqr_action(K, C, V, p.target))
    assert np.linalg.norm(C) < 1e-2 and not outside_support(p, C)


def test_balance_reward_examples():
    assert balance_reward(np.zeros(2), np.zeros(2)) == 0.0
    assert balance_reward(np.array([1.0, 0.0]), np.zeros(2)) == -1.0
    assert balance_reward(np.array([0.5, 0.0]), np.array([2.0, 0.0])) == pytest.approx(-0.65, abs=1e-12)
