"""Compensator dynamics, Euler stepping, storage functions and rate bounds."""

import numpy as np
import pytest

from dcopt import (
    AgentState,
    CompensatorParams,
    LambdaGuardError,
    LocalProblem,
    compute_nu,
    constraint_force,
    derivatives,
    euler_step,
    make_affine,
    make_quadratic,
)
from dcopt.dynamics import (
    compensator_storage,
    multiplier_rate_bound,
    multiplier_storage,
    primal_rate_bound,
    storage_step_defects,
)


def lead_comp():
    return CompensatorParams(np.array([0.0, 5.0]), np.array([1.0, 10.0]))


def hand_local():
    # f = x^2/2, g = x - 1 <= 0, h = x - 2 = 0
    return LocalProblem(
        make_quadratic([[1.0]]),
        inequalities=[make_affine([1.0], -1.0)],
        equalities=[make_affine([1.0], -2.0)],
    )


def hand_state():
    return AgentState(
        rho=np.array([[1.0], [2.0]]),
        xi=np.array([0.5]),
        lam=np.array([0.2]),
        mu=np.array([0.3]),
    )


def test_compensator_validation():
    with pytest.raises(ValueError, match="exactly 0"):
        CompensatorParams(np.array([1.0, 5.0]), np.array([1.0, 1.0]))
    with pytest.raises(ValueError, match="increasing"):
        CompensatorParams(np.array([0.0, 5.0, 5.0]), np.ones(3))
    with pytest.raises(ValueError, match="positive"):
        CompensatorParams(np.array([0.0]), np.array([-1.0]))
    with pytest.raises(ValueError, match="same length"):
        CompensatorParams(np.array([0.0, 1.0]), np.array([1.0]))
    comp = CompensatorParams.pure_integrator()
    assert comp.m == 1
    assert comp.b[0] == 0.0 and comp.c[0] == 1.0
    with pytest.raises(ValueError):
        comp.b[0] = 2.0


def test_zero_state_shapes():
    comp = lead_comp()
    st = AgentState.zeros(comp, dim=3, n_ineq=2, n_eq=1, lam0=0.01)
    assert st.rho.shape == (2, 3)
    assert st.xi.shape == (3,)
    assert np.all(st.lam == 0.01)
    assert st.mu.shape == (1,)
    assert np.array_equal(st.x, np.zeros(3))
    with pytest.raises(ValueError):
        AgentState.zeros(comp, 3, 1, 0, lam0=0.0)


def test_constraint_force_hand_value():
    loc, st = hand_local(), hand_state()
    # lam^2 * 1 + mu * 1 = 0.04 + 0.3
    assert constraint_force(loc, st) == pytest.approx([0.34])


def test_derivatives_hand_values_isolated():
    loc, st = hand_local(), hand_state()
    comp = lead_comp()
    d = derivatives(loc, comp, st, received=[])
    assert st.x == pytest.approx([3.0])
    assert d.nu == pytest.approx([-3.34])            # -x - zeta
    assert d.rho_dot[0] == pytest.approx([-3.34])    # c1 nu
    assert d.rho_dot[1] == pytest.approx([-43.4])    # c2 nu - b2 rho2
    assert d.xi_dot == pytest.approx([0.0])
    assert d.lam_dot == pytest.approx([0.8])         # 2 lam g(3)
    assert d.mu_dot == pytest.approx([1.0])          # h(3)


def test_derivatives_with_neighbor():
    loc, st = hand_local(), hand_state()
    comp = lead_comp()
    received = [(np.array([2.0]), np.array([1.0]), 4.0)]
    d = derivatives(loc, comp, st, received)
    # coupling adds w (r_x - x) - w (r_xi - xi) = -4 - 2
    assert d.nu == pytest.approx([-9.34])
    assert d.xi_dot == pytest.approx([-4.0])
    assert compute_nu(loc, st, received) == pytest.approx(d.nu)


def test_euler_step_values_and_guard():
    loc, st = hand_local(), hand_state()
    st.lam = np.array([0.01])
    d = derivatives(loc, lead_comp(), st, [])
    # g(3) = 2 so lam_dot = 0.04; try the shrink direction instead
    d.lam_dot = np.array([-0.02])
    nxt = euler_step(st, d, 1e-3)
    assert nxt.lam[0] == pytest.approx(0.00998)
    assert nxt.mu[0] == pytest.approx(st.mu[0] + 1e-3 * d.mu_dot[0])
    assert nxt.rho == pytest.approx(st.rho + 1e-3 * d.rho_dot)
    # crossing zero must raise, not clamp
    d.lam_dot = np.array([-10.0])
    with pytest.raises(LambdaGuardError):
        euler_step(st, d, 1e-3)
    with pytest.raises(ValueError):
        euler_step(st, d, 0.0)


def test_euler_step_does_not_mutate_input():
    st = hand_state()
    d = derivatives(hand_local(), lead_comp(), st, [])
    before = st.rho.copy()
    euler_step(st, d, 1e-3)
    assert np.array_equal(st.rho, before)


def test_compensator_storage_hand_value():
    comp = lead_comp()
    rho = np.array([[2.0], [3.0]])
    # (2-1)^2/2 + 3^2/20
    assert compensator_storage(comp, rho, np.array([1.0])) == pytest.approx(0.95)
    assert compensator_storage(comp, np.array([[1.0], [0.0]]), np.array([1.0])) == 0.0


def test_multiplier_storage_hand_value():
    val = multiplier_storage(
        np.array([2.0]), np.array([0.5]), np.array([1.0]), np.array([0.0])
    )
    # (4-1)/4 - (1/2) ln 2 + 0.125
    assert val == pytest.approx(0.875 - 0.5 * np.log(2.0))
    # lam* = 0 drops the log term
    val0 = multiplier_storage(np.array([2.0]), np.zeros(1), np.zeros(1), np.zeros(1))
    assert val0 == pytest.approx(1.0)
    with pytest.raises(ValueError):
        multiplier_storage(np.array([0.0]), np.zeros(1), np.zeros(1), np.zeros(1))


def test_multiplier_storage_nonnegative_min_at_reference():
    # convex in lam^2 with minimum 0 at lam = lam*, mu = mu*
    rng = np.random.default_rng(3)
    lam_star = np.array([1.3, 0.0, 0.4])
    mu_star = rng.normal(size=2)
    assert multiplier_storage(
        np.array([1.3, 0.7, 0.4]), mu_star, lam_star, mu_star
    ) == pytest.approx(0.5 * 0.7**2 / 2.0)
    for _ in range(50):
        lam = rng.uniform(0.05, 3.0, size=3)
        mu = rng.normal(size=2)
        assert multiplier_storage(lam, mu, lam_star, mu_star) >= -1e-12


def analytic_rates(comp, loc, st, d, z_star, lam_star, mu_star):
    """Exact d/dt of the two storage pieces along the flow."""
    rate_c = float((st.rho[0] - z_star) @ d.rho_dot[0]) / comp.c[0]
    for k in range(1, comp.m):
        rate_c += float(st.rho[k] @ d.rho_dot[k]) / comp.c[k]
    grad_lam = st.lam / 2.0 - np.where(
        lam_star > 0.0, lam_star**2 / (2.0 * st.lam), 0.0
    )
    rate_g = float(grad_lam @ d.lam_dot) + float((st.mu - mu_star) @ d.mu_dot)
    return rate_c, rate_g


def random_setup(rng, n=3):
    a = rng.normal(size=(n, n))
    loc = LocalProblem(
        make_quadratic(a @ a.T + 0.1 * np.eye(n), rng.normal(size=n)),
        inequalities=[make_affine(rng.normal(size=n), 1.0)],
        equalities=[make_affine(rng.normal(size=n), 0.0)],
    )
    comp = lead_comp()
    st = AgentState(
        rho=rng.normal(size=(2, n)),
        xi=rng.normal(size=n),
        lam=rng.uniform(0.1, 2.0, size=1),
        mu=rng.normal(size=1),
    )
    return loc, comp, st


def test_primal_rate_bound_dominates_exact_rate():
    # bound - rate = (x - z*)(grad f(z*) - grad f(x)) + sum b_k |rho_k|^2/c_k
    # >= 0 by convexity; check numerically across random states
    rng = np.random.default_rng(41)
    for _ in range(40):
        loc, comp, st = random_setup(rng)
        z_star = rng.normal(size=3)
        received = [(rng.normal(size=3), rng.normal(size=3), 2.0)]
        d = derivatives(loc, comp, st, received)
        rate_c, _ = analytic_rates(comp, loc, st, d, z_star, np.zeros(1), np.zeros(1))
        bound = primal_rate_bound(loc, st, d.nu, z_star)
        assert rate_c <= bound + 1e-10


def test_multiplier_rate_bound_dominates_exact_rate():
    # needs a complementary-slack feasible reference: g(z*) <= 0,
    # h(z*) = 0, lam* g(z*) = 0
    rng = np.random.default_rng(59)
    for _ in range(40):
        n = 3
        z_star = rng.normal(size=n)
        g_c = rng.normal(size=n)
        h_c = rng.normal(size=n)
        loc = LocalProblem(
            make_quadratic(np.eye(n)),
            inequalities=[make_affine(g_c, -float(g_c @ z_star) - 0.5)],
            equalities=[make_affine(h_c, -float(h_c @ z_star))],
        )
        comp = lead_comp()
        st = AgentState(
            rho=rng.normal(size=(2, n)),
            xi=np.zeros(n),
            lam=rng.uniform(0.1, 2.0, size=1),
            mu=rng.normal(size=1),
        )
        lam_star = np.zeros(1)  # inactive constraint at z*
        mu_star = rng.normal(size=1)
        d = derivatives(loc, comp, st, [])
        _, rate_g = analytic_rates(comp, loc, st, d, z_star, lam_star, mu_star)
        bound = multiplier_rate_bound(loc, st, z_star, lam_star, mu_star)
        assert rate_g <= bound + 1e-10


def test_storage_step_defects_exact_for_quadratic_pieces():
    # one Euler step changes each quadratic storage by exactly
    # h * (rate + defect)
    rng = np.random.default_rng(67)
    h = 1e-3
    for _ in range(20):
        loc, comp, st = random_setup(rng)
        z_star = rng.normal(size=3)
        lam_star = np.zeros(1)
        mu_star = rng.normal(size=1)
        d = derivatives(loc, comp, st, [])
        nxt = euler_step(st, d, h)
        rate_c, rate_g = analytic_rates(comp, loc, st, d, z_star, lam_star, mu_star)
        d_c, d_m, d_xi = storage_step_defects(comp, st, d, lam_star, h)
        ds_c = compensator_storage(comp, nxt.rho, z_star) - compensator_storage(
            comp, st.rho, z_star
        )
        assert ds_c == pytest.approx(h * (rate_c + d_c), abs=1e-14)
        ds_g = multiplier_storage(nxt.lam, nxt.mu, lam_star, mu_star) - (
            multiplier_storage(st.lam, st.mu, lam_star, mu_star)
        )
        assert ds_g == pytest.approx(h * (rate_g + d_m), abs=1e-14)
        assert d_xi == pytest.approx(0.5 * h * float(d.xi_dot @ d.xi_dot))


def test_storage_step_defects_exact_for_log_term():
    # lam* > 0 brings in the log term; the closed-form remainder keeps
    # the defect exact even when one step moves lam by a large fraction
    rng = np.random.default_rng(71)
    loc, comp, st = random_setup(rng)
    lam_star = np.array([0.9])
    mu_star = np.zeros(1)
    for h in (1e-3, 0.2):
        d = derivatives(loc, comp, st, [])
        if st.lam[0] + h * d.lam_dot[0] <= 0.0:
            continue
        nxt = euler_step(st, d, h)
        _, rate_g = analytic_rates(comp, loc, st, d, np.zeros(3), lam_star, mu_star)
        _, d_m, _ = storage_step_defects(comp, st, d, lam_star, h)
        ds = multiplier_storage(nxt.lam, nxt.mu, lam_star, mu_star) - (
            multiplier_storage(st.lam, st.mu, lam_star, mu_star)
        )
        assert ds == pytest.approx(h * (rate_g + d_m), abs=1e-12)


def test_storage_step_defects_guard_fallback_stays_finite():
    # a step that would push lam <= 0 never commits (euler_step raises),
    # but the defect evaluated before the step must still be finite; the
    # log remainder falls back to its quadratic estimate there
    loc = LocalProblem(
        make_quadratic(np.eye(3)),
        inequalities=[make_affine(np.zeros(3), -1.0)],
    )
    comp = lead_comp()
    st = AgentState(
        rho=np.zeros((2, 3)), xi=np.zeros(3),
        lam=np.array([0.01]), mu=np.zeros(0),
    )
    d = derivatives(loc, comp, st, [])
    lam_dot = float(d.lam_dot[0])  # 2 lam g = -0.02
    assert lam_dot < 0.0
    h = 2.0 * 0.01 / abs(lam_dot)
    lam_star = np.array([0.9])
    _, d_m, _ = storage_step_defects(comp, st, d, lam_star, h)
    assert np.isfinite(d_m)
    w = h * lam_dot / 0.01
    expected = 0.25 * h * lam_dot**2 + (0.9**2 / (2.0 * h)) * 0.5 * w**2
    assert d_m == pytest.approx(expected)
    with pytest.raises(LambdaGuardError):
        euler_step(st, d, h)


def test_pure_integrator_reduces_to_gradient_flow():
    # m = 1: rho_dot = nu and x follows the plain primal-dual field
    rng = np.random.default_rng(5)
    loc, _, st2 = random_setup(rng)
    comp = CompensatorParams.pure_integrator()
    st = AgentState(rho=st2.rho[:1].copy(), xi=st2.xi, lam=st2.lam, mu=st2.mu)
    d = derivatives(loc, comp, st, [])
    assert np.allclose(d.rho_dot[0], d.nu, atol=1e-15)
