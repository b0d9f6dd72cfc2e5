"""Wave-variable channel layer for delay-robust neighbor exchange.

Instead of raw states, neighbors exchange scattering waves

    s_out = (-p + eta r) / sqrt(2 eta),   s_in = (p + eta r) / sqrt(2 eta),

where r stacks the receiver-side estimate of the neighbor's primal and
multiplier vectors and p = E (r - [x; xi]) is the coupling force, with

    E = [[a, -a], [a, 0]] (x) I_n.

A constant transmission delay maps the sender's outgoing wave onto the
receiver's incoming wave unchanged, so the channel stores energy instead of
creating it; that is what keeps the closed loop stable for arbitrary
constant delays.

The receiver never sees the sender's state: it reconstructs (r, p) from the
incoming wave and its own state by solving (E + eta I) r = sqrt(2 eta) s_in
+ E [x; xi], which splits into n independent 2x2 systems with determinant
eta (a + eta) + a^2 > 0.
"""

import numpy as np

__all__ = [
    "CouplingMatrix",
    "DelayLine",
    "ChannelEnd",
    "recover",
    "outgoing_wave",
    "push_pop",
    "direct_exchange",
    "wave_identity_residual",
]


class CouplingMatrix:
    """Block coupling E = [[a, -a], [a, 0]] (x) I_n for one directed pair."""

    def __init__(self, weight, dim):
        if weight <= 0.0:
            raise ValueError("coupling weight must be positive")
        if dim < 1:
            raise ValueError("dimension must be at least 1")
        self.weight = float(weight)
        self.dim = int(dim)

    def apply(self, vec):
        """E @ vec for a stacked 2n-vector [u; v]."""
        n = self.dim
        u, v = vec[:n], vec[n:]
        a = self.weight
        return np.concatenate([a * (u - v), a * u])


class DelayLine:
    """Fixed ring buffer realizing a constant transmission delay.

    The delay is quantized to round(delay / h) >= 1 Euler steps.  Popping at
    step k returns the sample pushed at step k - K; the buffer starts zeroed,
    which realizes the zero-history convention for t < delay.
    """

    def __init__(self, delay, h, width):
        if h <= 0.0:
            raise ValueError("step size must be positive")
        steps = int(round(delay / h))
        if steps < 1:
            raise ValueError(
                f"delay {delay} shorter than one step {h}; delays must be >= h"
            )
        self.delay = steps * h
        self.h = float(h)
        self.steps = steps
        self.width = int(width)
        self._buf = np.zeros((steps, width))
        self._idx = 0
        self._pops = 0
        self._pushes = 0

    def _check_time(self, t, count):
        if t is None:
            return
        if abs(t - count * self.h) > 0.5 * self.h:
            raise ValueError(
                f"delay line time skew: got t={t}, expected ~{count * self.h}"
            )

    def pop(self, t=None):
        """Sample from one delay ago (zeros before the line fills)."""
        self._check_time(t, self._pops)
        out = self._buf[self._idx].copy()
        self._pops += 1
        return out

    def push(self, value, t=None):
        self._check_time(t, self._pushes)
        value = np.asarray(value, dtype=float)
        if value.shape != (self.width,):
            raise ValueError(f"expected shape ({self.width},), got {value.shape}")
        self._buf[self._idx] = value
        self._pushes += 1
        self._idx = (self._idx + 1) % self.steps

    def push_pop(self, value, t=None):
        """Atomic pop-then-push; returns the sample from time t - delay."""
        out = self.pop(t)
        self.push(value, t)
        return out


class ChannelEnd:
    """One agent's end of one directed channel.

    Holds the coupling, the 2x2 reconstruction inverse (precomputed), the
    inbound delay line and the last recovered (r, p) pair.
    """

    def __init__(self, coupling, eta, inbound=None):
        if eta <= 0.0:
            raise ValueError("wave impedance eta must be positive")
        self.coupling = coupling
        self.eta = float(eta)
        self.inbound = inbound
        a = coupling.weight
        det = eta * (a + eta) + a * a
        if det <= 0.0:
            raise ValueError("coupling + impedance not invertible")
        # rows of (E + eta I)^{-1} restricted to one coordinate
        self._m11 = eta / det
        self._m12 = a / det
        self._m21 = -a / det
        self._m22 = (a + eta) / det
        self._sq2e = np.sqrt(2.0 * eta)
        self.last_r = None
        self.last_p = None

    def recover(self, s_in, x, xi):
        """Reconstruct (r, p) from the incoming wave and the local state."""
        n = self.coupling.dim
        a = self.coupling.weight
        # rhs of (E + eta I) r = sqrt(2 eta) s_in + E [x; xi]
        u = self._sq2e * s_in[:n] + a * (x - xi)
        v = self._sq2e * s_in[n:] + a * x
        r_x = self._m11 * u + self._m12 * v
        r_xi = self._m21 * u + self._m22 * v
        dx = r_x - x
        p = np.concatenate([a * (dx - (r_xi - xi)), a * dx])
        r = np.concatenate([r_x, r_xi])
        self.last_r = r
        self.last_p = p
        return r, p

    def outgoing_wave(self, r, p):
        """Wave sent back into the channel from the recovered pair."""
        return (self.eta * r - p) / self._sq2e


def recover(end, s_in, x, xi):
    """Functional form of ChannelEnd.recover."""
    return end.recover(s_in, x, xi)


def outgoing_wave(end, r, p):
    """Functional form of ChannelEnd.outgoing_wave."""
    return end.outgoing_wave(r, p)


def push_pop(line, value, t=None):
    """Functional form of DelayLine.push_pop."""
    return line.push_pop(value, t)


def direct_exchange(x_stack, xi_stack, neighbor_ids):
    """Exchange without a channel: r is the neighbor state itself.

    Used by the no-delay mode (current states) and the naive-delay mode
    (caller passes delayed copies of the stacked states).
    """
    return [(x_stack[j], xi_stack[j]) for j in neighbor_ids]


def wave_identity_residual(s_in, s_out, r, p):
    """Residual of the per-end power identity |s_in|^2 - |s_out|^2 = 2 r^T p.

    Evaluated in the factored form (s_in - s_out)^T (s_in + s_out) - 2 r^T p,
    which is algebraically identical but avoids the cancellation of two
    large squared norms.
    """
    return float((s_in - s_out) @ (s_in + s_out) - 2.0 * (r @ p))
