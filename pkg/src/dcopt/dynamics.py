"""Per-agent continuous dynamics and their explicit Euler discretization.

Each agent runs a primal flow shaped by a phase-lead compensator

    rho_dot_k = -b_k rho_k + c_k nu,   x = sum_k rho_k,

driven by the negative Lagrangian gradient nu, plus integrator dynamics for
the consensus multiplier xi and the constraint multipliers.  The inequality
multiplier enters the Lagrangian squared, so its flow lam_dot = 2 lam g(x)
keeps lam positive without projection; a step that would cross zero is a
guard violation, never clamped.

With m = 1, b = (0,), c = (1,) the compensator is a pure integrator and the
flow reduces to plain primal-dual gradient dynamics (the ablation mode that
oscillates on merely convex objectives).
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CompensatorParams",
    "AgentState",
    "AgentDerivative",
    "LambdaGuardError",
    "compute_nu",
    "constraint_force",
    "derivatives",
    "euler_step",
    "compensator_storage",
    "multiplier_storage",
    "primal_rate_bound",
    "multiplier_rate_bound",
]


class LambdaGuardError(RuntimeError):
    """An Euler step would drive an inequality multiplier to zero or below."""


@dataclass(frozen=True)
class CompensatorParams:
    """Phase-lead compensator sum_k c_k / (s + b_k).

    b must start at exactly 0 and increase strictly; c must be positive.
    m = 1 is the pure-integrator ablation, m >= 2 the compensated mode.
    """

    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        b = np.array(self.b, dtype=float).reshape(-1)
        c = np.array(self.c, dtype=float).reshape(-1)
        if b.size == 0 or b.size != c.size:
            raise ValueError("b and c must be nonempty and the same length")
        if b[0] != 0.0:
            raise ValueError("b[0] must be exactly 0 (integral action)")
        if np.any(np.diff(b) <= 0.0):
            raise ValueError("b must be strictly increasing")
        if np.any(c <= 0.0):
            raise ValueError("c must be positive")
        b.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)

    @property
    def m(self):
        return self.b.size

    @staticmethod
    def pure_integrator():
        """Single stage b=0, c=1: plain primal-dual flow."""
        return CompensatorParams(np.array([0.0]), np.array([1.0]))


@dataclass
class AgentState:
    """One agent's state: compensator stages, consensus and constraint
    multipliers.  The primal estimate is x = rho.sum(axis=0)."""

    rho: np.ndarray  # (m, n)
    xi: np.ndarray  # (n,)
    lam: np.ndarray  # (n_ineq,)
    mu: np.ndarray  # (n_eq,)

    @property
    def x(self):
        return self.rho.sum(axis=0)

    @staticmethod
    def zeros(comp, dim, n_ineq, n_eq, lam0=0.01):
        if lam0 <= 0.0:
            raise ValueError("initial inequality multipliers must be positive")
        return AgentState(
            rho=np.zeros((comp.m, dim)),
            xi=np.zeros(dim),
            lam=np.full(n_ineq, float(lam0)),
            mu=np.zeros(n_eq),
        )


@dataclass
class AgentDerivative:
    rho_dot: np.ndarray
    xi_dot: np.ndarray
    lam_dot: np.ndarray
    mu_dot: np.ndarray
    nu: np.ndarray  # kept for diagnostics


def constraint_force(local, state, x=None):
    """zeta = sum_k lam_k^2 grad g_k(x) + sum_k mu_k grad h_k(x)."""
    if x is None:
        x = state.x
    zeta = np.zeros(local.dim)
    if local.n_ineq:
        zeta += local.ineq_gradients(x).T @ (state.lam**2)
    if local.n_eq:
        zeta += local.eq_gradients(x).T @ state.mu
    return zeta


def compute_nu(local, state, received, x=None):
    """Compensator input: negative Lagrangian gradient at the agent.

    received lists one (r_x, r_xi, weight) triple per neighbor, where r_x
    and r_xi are the neighbor's primal/multiplier information as seen
    through the channel (current state when there is no delay).
    """
    if x is None:
        x = state.x
    nu = -local.objective.gradient(x) - constraint_force(local, state, x)
    for r_x, r_xi, w in received:
        nu += w * (r_x - x)
        nu -= w * (r_xi - state.xi)
    return nu


def derivatives(local, comp, state, received):
    """Time derivatives of one agent's state from time-t information."""
    x = state.x
    nu = compute_nu(local, state, received, x)
    rho_dot = comp.c[:, None] * nu - comp.b[:, None] * state.rho
    xi_dot = np.zeros(local.dim)
    for r_x, _, w in received:
        xi_dot += w * (r_x - x)
    lam_dot = 2.0 * state.lam * local.ineq_values(x) if local.n_ineq else np.zeros(0)
    mu_dot = local.eq_values(x) if local.n_eq else np.zeros(0)
    return AgentDerivative(rho_dot, xi_dot, lam_dot, mu_dot, nu)


def euler_step(state, deriv, h):
    """Explicit Euler update; guards multiplier positivity.

    Raises LambdaGuardError when any lam component would become <= 0.
    The guard is an integration-accuracy failure, so it aborts rather than
    clamps: clamping would silently change the flow.
    """
    if h <= 0.0:
        raise ValueError("step size must be positive")
    lam = state.lam + h * deriv.lam_dot
    if lam.size and lam.min() <= 0.0:
        bad = np.nonzero(lam <= 0.0)[0]
        raise LambdaGuardError(
            f"inequality multiplier(s) {bad.tolist()} would cross zero"
        )
    return AgentState(
        rho=state.rho + h * deriv.rho_dot,
        xi=state.xi + h * deriv.xi_dot,
        lam=lam,
        mu=state.mu + h * deriv.mu_dot,
    )


def compensator_storage(comp, rho, z_star):
    """Storage of the compensator block relative to a primal reference:

    (1/(2 c_1)) |rho_1 - z*|^2 + sum_{k>=2} (1/(2 c_k)) |rho_k|^2
    """
    s = float(np.sum((rho[0] - z_star) ** 2)) / (2.0 * comp.c[0])
    for k in range(1, comp.m):
        s += float(np.sum(rho[k] ** 2)) / (2.0 * comp.c[k])
    return s


def multiplier_storage(lam, mu, lam_star, mu_star):
    """Storage of the multiplier block relative to a KKT reference:

    sum_k [ (lam_k^2 - lam*_k^2)/4 - (lam*_k^2 / 2)(ln lam_k - ln lam*_k) ]
      + |mu - mu*|^2 / 2

    The log term is dropped where lam*_k = 0 (lam ln lam -> 0 limit).
    """
    lam = np.asarray(lam, dtype=float)
    lam_star = np.asarray(lam_star, dtype=float)
    if lam.size and lam.min() <= 0.0:
        raise ValueError("multiplier storage needs lam > 0")
    s = float(np.sum(lam**2 - lam_star**2)) / 4.0
    active = lam_star > 0.0
    if np.any(active):
        ls = lam_star[active]
        s -= 0.5 * float(np.sum(ls**2 * (np.log(lam[active]) - np.log(ls))))
    s += 0.5 * float(np.sum((np.asarray(mu) - np.asarray(mu_star)) ** 2))
    return s


def primal_rate_bound(local, state, nu, z_star):
    """Upper bound certified for d/dt of compensator_storage:

    (x - z*)^T (phi - phi*),  phi = nu + grad f(x),  phi* = grad f(z*).
    """
    x = state.x
    phi = nu + local.objective.gradient(x)
    phi_star = local.objective.gradient(z_star)
    return float((x - z_star) @ (phi - phi_star))


def multiplier_rate_bound(local, state, z_star, lam_star, mu_star):
    """Upper bound certified for d/dt of multiplier_storage:

    (zeta - zeta*)^T (x - z*) with zeta the constraint force.
    """
    x = state.x
    zeta = constraint_force(local, state, x)
    zeta_star = np.zeros(local.dim)
    if local.n_ineq:
        zeta_star += local.ineq_gradients(z_star).T @ (np.asarray(lam_star) ** 2)
    if local.n_eq:
        zeta_star += local.eq_gradients(z_star).T @ np.asarray(mu_star)
    return float((zeta - zeta_star) @ (x - z_star))


def storage_step_defects(comp, state, deriv, lam_star, h):
    """Exact explicit-Euler defect rates of the three storage pieces.

    One Euler step y+ = y + h F moves each storage by more than h times
    its rate at the step start.  Returns (compensator, multiplier,
    coupling) defect rates d with S(y+) - S(y) = h (rate + d) exactly:
    the quadratic pieces contribute (h/2) F' Hess(S) F, and the
    multiplier log term the closed-form remainder
    (lam*^2 / (2h)) (w - log(1 + w)) with w = h lam_dot / lam.  Per-step
    rate checks subtract d so they test the bound, not the integrator.
    A component about to trip the positivity guard (1 + w <= 0) falls
    back to the quadratic estimate to stay finite; its step never
    commits, so the value is never compared against a bound.
    """
    d_c = 0.5 * h * sum(
        float(deriv.rho_dot[k] @ deriv.rho_dot[k]) / comp.c[k]
        for k in range(comp.m)
    )
    d_m = 0.25 * h * float(np.sum(deriv.lam_dot**2))
    d_m += 0.5 * h * float(np.sum(deriv.mu_dot**2))
    lam_star = np.asarray(lam_star, dtype=float)
    active = lam_star > 0.0
    if np.any(active):
        ls2 = lam_star[active] ** 2
        w = h * deriv.lam_dot[active] / state.lam[active]
        safe = w > -1.0
        rem = np.where(
            safe, w - np.log1p(np.where(safe, w, 0.0)), 0.5 * w**2
        )
        d_m += float(np.sum(ls2 * rem)) / (2.0 * h)
    d_xi = 0.5 * h * float(deriv.xi_dot @ deriv.xi_dot)
    return d_c, d_m, d_xi
