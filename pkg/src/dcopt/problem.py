"""Convex problem data for networked agents.

Each agent owns a private smooth convex objective, convex inequality
constraints g(x) <= 0 and affine equality constraints h(x) = 0, all over a
shared decision vector of dimension n.  A DistributedProblem ties the agents
to a Network; consensus over the network replaces a shared variable.

Only first-order information (value, gradient) is required of any function.
"""

from dataclasses import dataclass

import numpy as np

from .graph import laplacian_apply

__all__ = [
    "ScalarFunction",
    "AffineFunction",
    "QuadraticFunction",
    "make_affine",
    "make_quadratic",
    "make_linear_nonneg_bound",
    "LocalProblem",
    "DistributedProblem",
    "KKTResidual",
    "generalized_lagrangian",
    "kkt_residual",
]


class ScalarFunction:
    """Scalar-valued function of an n-vector exposing value and gradient.

    Attributes
    ----------
    dim : int
        Expected input dimension.
    is_affine : bool
        True when the function is exactly affine.
    declared_convex : bool
        True when the constructor guarantees convexity.
    """

    dim = 0
    is_affine = False
    declared_convex = False

    def value(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def constant_gradient(self):
        """Gradient vector when it is state-independent, else None."""
        return None

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected shape ({self.dim},), got {x.shape}")
        return x


class AffineFunction(ScalarFunction):
    """c^T x + d."""

    is_affine = True
    declared_convex = True

    def __init__(self, c, d=0.0):
        c = np.array(c, dtype=float).reshape(-1)
        if c.size == 0:
            raise ValueError("affine coefficient vector must be nonempty")
        c.setflags(write=False)
        self.c = c
        self.d = float(d)
        self.dim = c.size

    def value(self, x):
        return float(self.c @ self._check(x) + self.d)

    def gradient(self, x):
        self._check(x)
        return self.c.copy()

    def constant_gradient(self):
        return self.c


class QuadraticFunction(ScalarFunction):
    """(1/2) x^T Q x + c^T x + d with Q symmetric positive semidefinite."""

    is_affine = False
    declared_convex = True

    def __init__(self, q, c=None, d=0.0):
        q = np.array(q, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ValueError("Q must be a square matrix")
        if not np.allclose(q, q.T, rtol=0.0, atol=1e-12):
            raise ValueError("Q must be symmetric")
        scale = max(1.0, float(np.abs(q).max()))
        if np.linalg.eigvalsh(q).min() < -1e-10 * scale:
            raise ValueError("Q must be positive semidefinite")
        c = np.zeros(q.shape[0]) if c is None else np.array(c, dtype=float).reshape(-1)
        if c.size != q.shape[0]:
            raise ValueError("c length must match Q")
        q.setflags(write=False)
        c.setflags(write=False)
        self.q = q
        self.c = c
        self.d = float(d)
        self.dim = c.size

    def value(self, x):
        x = self._check(x)
        return float(0.5 * x @ self.q @ x + self.c @ x + self.d)

    def gradient(self, x):
        x = self._check(x)
        return self.q @ x + self.c


def make_affine(c, d=0.0):
    """Affine function c^T x + d."""
    return AffineFunction(c, d)


def make_quadratic(q, c=None, d=0.0):
    """Convex quadratic (1/2) x^T Q x + c^T x + d; Q symmetric PSD."""
    return QuadraticFunction(q, c, d)


def make_linear_nonneg_bound(k, dim):
    """Inequality -x_k <= 0, i.e. component k constrained nonnegative."""
    if not 0 <= k < dim:
        raise ValueError(f"component {k} out of range for dim {dim}")
    c = np.zeros(dim)
    c[k] = -1.0
    return AffineFunction(c, 0.0)


class LocalProblem:
    """One agent's objective and constraints over the shared n-vector.

    Parameters
    ----------
    objective : ScalarFunction
        Smooth convex objective; must be declared convex.
    inequalities : sequence of ScalarFunction
        Convex constraints g_k(x) <= 0.
    equalities : sequence of ScalarFunction
        Affine constraints h_k(x) = 0.
    """

    def __init__(self, objective, inequalities=(), equalities=()):
        if not objective.declared_convex:
            raise ValueError("objective must be declared convex")
        self.objective = objective
        self.inequalities = tuple(inequalities)
        self.equalities = tuple(equalities)
        self.dim = objective.dim
        for g in self.inequalities:
            if not g.declared_convex:
                raise ValueError("inequality constraints must be declared convex")
            if g.dim != self.dim:
                raise ValueError("inequality dimension mismatch")
        for h in self.equalities:
            if not h.is_affine:
                raise ValueError("equality constraints must be affine")
            if h.dim != self.dim:
                raise ValueError("equality dimension mismatch")
        self.n_ineq = len(self.inequalities)
        self.n_eq = len(self.equalities)
        # stacked constant-gradient fast path; None when any gradient varies
        self._g_mat = self._stack_constant(self.inequalities)
        self._h_mat = self._stack_constant(self.equalities)
        self._g_off = None
        self._h_off = None
        if self._g_mat is not None:
            self._g_off = np.array([g.value(np.zeros(self.dim)) for g in self.inequalities])
        if self._h_mat is not None:
            self._h_off = np.array([h.value(np.zeros(self.dim)) for h in self.equalities])

    @staticmethod
    def _stack_constant(funcs):
        rows = []
        for f in funcs:
            c = f.constant_gradient()
            if c is None or not f.is_affine:
                return None
            rows.append(c)
        return np.array(rows) if rows else np.zeros((0, 0))

    def ineq_values(self, x):
        """Vector of g_k(x)."""
        if self._g_mat is not None:
            if self.n_ineq == 0:
                return np.zeros(0)
            return self._g_mat @ x + self._g_off
        return np.array([g.value(x) for g in self.inequalities])

    def eq_values(self, x):
        """Vector of h_k(x)."""
        if self._h_mat is not None:
            if self.n_eq == 0:
                return np.zeros(0)
            return self._h_mat @ x + self._h_off
        return np.array([h.value(x) for h in self.equalities])

    def ineq_gradients(self, x):
        """(n_ineq, n) matrix of constraint gradients at x."""
        if self._g_mat is not None and self.n_ineq > 0:
            return self._g_mat
        if self.n_ineq == 0:
            return np.zeros((0, self.dim))
        return np.array([g.gradient(x) for g in self.inequalities])

    def eq_gradients(self, x):
        """(n_eq, n) matrix of equality gradients at x."""
        if self._h_mat is not None and self.n_eq > 0:
            return self._h_mat
        if self.n_eq == 0:
            return np.zeros((0, self.dim))
        return np.array([h.gradient(x) for h in self.equalities])


class DistributedProblem:
    """Local problems attached to the agents of a network."""

    def __init__(self, network, local_problems):
        locs = tuple(local_problems)
        if len(locs) != network.n_agents:
            raise ValueError("one local problem per agent required")
        dims = {p.dim for p in locs}
        if len(dims) != 1:
            raise ValueError("all agents must share one decision dimension")
        self.network = network
        self.local_problems = locs
        self.dim = locs[0].dim
        self.n_agents = network.n_agents

    def check_multipliers(self, lam, mu):
        if len(lam) != self.n_agents or len(mu) != self.n_agents:
            raise ValueError("one multiplier vector per agent required")
        out_l, out_m = [], []
        for p, li, mi in zip(self.local_problems, lam, mu):
            li = np.asarray(li, dtype=float).reshape(-1)
            mi = np.asarray(mi, dtype=float).reshape(-1)
            if li.size != p.n_ineq:
                raise ValueError("inequality multiplier length mismatch")
            if mi.size != p.n_eq:
                raise ValueError("equality multiplier length mismatch")
            out_l.append(li)
            out_m.append(mi)
        return out_l, out_m

    def check_states(self, x, xi):
        x = np.asarray(x, dtype=float).reshape(self.n_agents, self.dim)
        xi = np.asarray(xi, dtype=float).reshape(self.n_agents, self.dim)
        return x, xi


@dataclass
class KKTResidual:
    """Infinity-norm residuals of the optimality conditions."""

    consensus: float
    stationarity: float
    primal_eq: float
    primal_ineq: float
    comp_slack: float

    def max(self):
        return max(
            self.consensus,
            self.stationarity,
            self.primal_eq,
            self.primal_ineq,
            self.comp_slack,
        )

    def as_dict(self):
        return {
            "consensus": self.consensus,
            "stationarity": self.stationarity,
            "primal_eq": self.primal_eq,
            "primal_ineq": self.primal_ineq,
            "comp_slack": self.comp_slack,
        }


def generalized_lagrangian(prob, x, xi, lam, mu):
    """Saddle function whose flow the agent dynamics follow.

    sum_i [ f_i(x_i) + (lam_i^2)^T g_i(x_i) + mu_i^T h_i(x_i) ]
      - xi^T (L x) + (1/2) x^T (L x)

    with L the network Laplacian acting blockwise on stacked states.
    Squaring lam keeps the inequality weight nonnegative without projection.
    """
    x, xi = prob.check_states(x, xi)
    lam, mu = prob.check_multipliers(lam, mu)
    total = 0.0
    for i, p in enumerate(prob.local_problems):
        total += p.objective.value(x[i])
        if p.n_ineq:
            total += float((lam[i] ** 2) @ p.ineq_values(x[i]))
        if p.n_eq:
            total += float(mu[i] @ p.eq_values(x[i]))
    lx = laplacian_apply(prob.network, x)
    total += float(-np.sum(xi * lx) + 0.5 * np.sum(x * lx))
    return total


def kkt_residual(prob, x, xi, lam, mu):
    """Residuals of the generalized optimality conditions, all inf-norms.

    consensus   : max | (L x)_i |
    stationarity: max | grad f_i + G_i^T lam_i^2 + H_i^T mu_i
                        + sum_j a_ij (xi_j - xi_i) |
    primal_eq   : max | h_i(x_i) |
    primal_ineq : max ( g_i(x_i) clipped below at 0 )
    comp_slack  : max | lam_ik^2 g_ik(x_i) |
    """
    x, xi = prob.check_states(x, xi)
    lam, mu = prob.check_multipliers(lam, mu)
    lx = laplacian_apply(prob.network, x)
    lxi = laplacian_apply(prob.network, xi)
    consensus = float(np.abs(lx).max()) if lx.size else 0.0
    stationarity = 0.0
    primal_eq = 0.0
    primal_ineq = 0.0
    comp_slack = 0.0
    for i, p in enumerate(prob.local_problems):
        grad = p.objective.gradient(x[i]).astype(float, copy=True)
        if p.n_ineq:
            gi = p.ineq_values(x[i])
            grad += p.ineq_gradients(x[i]).T @ (lam[i] ** 2)
            primal_ineq = max(primal_ineq, float(np.maximum(gi, 0.0).max()))
            comp_slack = max(comp_slack, float(np.abs(lam[i] ** 2 * gi).max()))
        if p.n_eq:
            hi = p.eq_values(x[i])
            grad += p.eq_gradients(x[i]).T @ mu[i]
            primal_eq = max(primal_eq, float(np.abs(hi).max()))
        # sum_j a_ij (xi_j - xi_i) = -(L xi)_i
        stationarity = max(stationarity, float(np.abs(grad - lxi[i]).max()))
    return KKTResidual(consensus, stationarity, primal_eq, primal_ineq, comp_slack)
