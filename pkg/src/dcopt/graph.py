"""Undirected weighted agent networks and their Laplacians."""

import numpy as np

__all__ = [
    "Network",
    "ring",
    "laplacian",
    "laplacian_apply",
    "neighbors",
    "is_connected",
]


class Network:
    """Undirected weighted graph over agents 0..N-1.

    Parameters
    ----------
    adjacency : (N, N) array_like
        Symmetric weight matrix, zero diagonal, nonnegative entries.
        a[i, j] > 0 means i and j exchange information with weight a[i, j].
    require_connected : bool
        Reject graphs whose positive-weight edges do not connect all agents.
    """

    def __init__(self, adjacency, require_connected=True):
        a = np.array(adjacency, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("adjacency must be a square matrix")
        if a.shape[0] < 1:
            raise ValueError("network needs at least one agent")
        if not np.allclose(a, a.T, rtol=0.0, atol=1e-12):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(a) != 0.0):
            raise ValueError("adjacency diagonal must be zero (no self-loops)")
        if np.any(a < 0.0):
            raise ValueError("edge weights must be nonnegative")
        a.setflags(write=False)
        self.adjacency = a
        self.n_agents = a.shape[0]
        # neighbor lists in ascending j order; fixed at construction
        self._neighbors = tuple(
            tuple((j, a[i, j]) for j in range(self.n_agents) if a[i, j] > 0.0)
            for i in range(self.n_agents)
        )
        if require_connected and not is_connected(self):
            raise ValueError("network is not connected")

    def edges(self):
        """Undirected edges as (i, j, weight) with i < j."""
        a = self.adjacency
        return [
            (i, j, a[i, j])
            for i in range(self.n_agents)
            for j in range(i + 1, self.n_agents)
            if a[i, j] > 0.0
        ]

    def directed_edges(self):
        """Ordered pairs (i, j, weight) with a[i, j] > 0, sorted by (i, j)."""
        a = self.adjacency
        return [
            (i, j, a[i, j])
            for i in range(self.n_agents)
            for j in range(self.n_agents)
            if a[i, j] > 0.0
        ]

    def __repr__(self):
        return f"Network(n_agents={self.n_agents}, n_edges={len(self.edges())})"


def ring(n_agents, weight=1.0):
    """Ring network: agent i connected to (i+1) mod N with uniform weight.

    A two-agent ring collapses to a single edge.
    """
    if n_agents < 2:
        raise ValueError("a ring needs at least two agents")
    if weight <= 0.0:
        raise ValueError("ring weight must be positive")
    a = np.zeros((n_agents, n_agents))
    for i in range(n_agents):
        j = (i + 1) % n_agents
        a[i, j] = weight
        a[j, i] = weight
    return Network(a)


def laplacian(net):
    """Graph Laplacian diag(A @ 1) - A of the network."""
    a = net.adjacency
    return np.diag(a.sum(axis=1)) - a


def laplacian_apply(net, v):
    """Blockwise Laplacian action on stacked per-agent vectors.

    v has shape (N, n); row i of the result is sum_j a_ij (v_i - v_j).
    """
    v = np.asarray(v, dtype=float)
    a = net.adjacency
    deg = a.sum(axis=1)
    if v.ndim == 1:
        return deg * v - a @ v
    return deg[:, None] * v - a @ v


def neighbors(net, i):
    """Neighbors of agent i as a tuple of (j, weight), ascending j."""
    if not 0 <= i < net.n_agents:
        raise ValueError(f"agent index {i} out of range")
    return net._neighbors[i]


def is_connected(net):
    """True when every agent is reachable over positive-weight edges."""
    n = net.n_agents
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        i = stack.pop()
        for j, _ in net._neighbors[i]:
            if not seen[j]:
                seen[j] = True
                stack.append(j)
    return bool(seen.all())
