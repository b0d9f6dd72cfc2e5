"""Robot-target matching as a distributed linear program.

N robots and N targets sit in a square area; robot l measures only its own
distances d_lk to each target and owns the l-th row of the assignment
matrix.  The relaxed problem over doubly stochastic z,

    min sum_lk d_lk z_lk   s.t. rows and columns sum to 1, z >= 0,

always has a permutation among its optimizers; when that permutation is
unique the LP optimum IS the matching, so the consensus simulator and the
brute-force enumeration must agree.

Every agent estimates the full N*N assignment vector (row-major).  Agent l
contributes the row-l cost, the row-l and column-l sum constraints, and
nonnegativity bounds for its own row.
"""

import csv
import itertools
from dataclasses import dataclass

import numpy as np

from .graph import ring
from .problem import (
    DistributedProblem,
    LocalProblem,
    make_affine,
    make_linear_nonneg_bound,
)

__all__ = [
    "MatchingInstance",
    "generate_instance",
    "load_instance_csv",
    "save_instance_csv",
    "build_distributed_problem",
    "brute_force_optimal",
    "assignment_cost",
    "extract_assignment",
]

_MAX_BRUTE_FORCE = 10  # 10! permutations is already ~3.6M


@dataclass(frozen=True)
class MatchingInstance:
    """Positions of n robots and n targets; distances are Euclidean."""

    robots: np.ndarray  # (n, 2)
    targets: np.ndarray  # (n, 2)

    def __post_init__(self):
        r = np.array(self.robots, dtype=float)
        t = np.array(self.targets, dtype=float)
        if r.ndim != 2 or r.shape[1] != 2 or t.shape != r.shape:
            raise ValueError("robots and targets must be matching (n, 2) arrays")
        if r.shape[0] < 1:
            raise ValueError("need at least one robot")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "robots", r)
        object.__setattr__(self, "targets", t)

    @property
    def n(self):
        return self.robots.shape[0]

    def distances(self):
        """(n, n) matrix of robot-target distances."""
        diff = self.robots[:, None, :] - self.targets[None, :, :]
        return np.sqrt((diff**2).sum(axis=2))


def generate_instance(seed, n=5, area=100.0, min_gap=1e-6):
    """Sample robot/target positions uniformly in [0, area]^2.

    Re-samples (deterministically, by advancing the seed) until the optimal
    permutation is unique with a cost gap of at least min_gap, so that the
    LP relaxation has a unique vertex optimizer.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    for attempt in range(100):
        rng = np.random.default_rng(int(seed) + attempt)
        inst = MatchingInstance(
            rng.uniform(0.0, area, (n, 2)), rng.uniform(0.0, area, (n, 2))
        )
        if n == 1:
            return inst
        costs = sorted(
            assignment_cost(inst, p) for p in itertools.permutations(range(n))
        )
        if costs[1] - costs[0] >= min_gap:
            return inst
    raise RuntimeError("could not sample an instance with a unique optimum")


def save_instance_csv(inst, path):
    """Write rows kind,id,px,py (kind in {robot, target})."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["kind", "id", "px", "py"])
        for i, (px, py) in enumerate(inst.robots):
            w.writerow(["robot", i, repr(float(px)), repr(float(py))])
        for i, (px, py) in enumerate(inst.targets):
            w.writerow(["target", i, repr(float(px)), repr(float(py))])


def load_instance_csv(path):
    """Read an instance written by save_instance_csv."""
    robots, targets = {}, {}
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row or row[0] == "kind":
                continue
            kind, ident, px, py = row[0], int(row[1]), float(row[2]), float(row[3])
            if kind == "robot":
                robots[ident] = (px, py)
            elif kind == "target":
                targets[ident] = (px, py)
            else:
                raise ValueError(f"unknown kind {kind!r} in {path}")
    if sorted(robots) != list(range(len(robots))) or sorted(robots) != sorted(targets):
        raise ValueError("instance file must list robots/targets 0..n-1")
    n = len(robots)
    return MatchingInstance(
        np.array([robots[i] for i in range(n)]),
        np.array([targets[i] for i in range(n)]),
    )


def build_distributed_problem(inst, network=None):
    """Distributed LP over the full n*n assignment vector (row-major).

    Agent l owns: objective sum_k d_lk x_(l,k), equalities "row l sums to 1"
    and "column l sums to 1", and bounds x_(l,k) >= 0 for its row.
    """
    n = inst.n
    if network is None:
        network = ring(n, 4.0)
    if network.n_agents != n:
        raise ValueError("network size must equal the number of robots")
    d = inst.distances()
    dim = n * n
    locals_ = []
    for l in range(n):
        c = np.zeros(dim)
        c[l * n : (l + 1) * n] = d[l]
        row = np.zeros(dim)
        row[l * n : (l + 1) * n] = 1.0
        col = np.zeros(dim)
        col[l::n] = 1.0
        locals_.append(
            LocalProblem(
                objective=make_affine(c, 0.0),
                inequalities=[
                    make_linear_nonneg_bound(l * n + k, dim) for k in range(n)
                ],
                equalities=[make_affine(row, -1.0), make_affine(col, -1.0)],
            )
        )
    return DistributedProblem(network, locals_)


def assignment_cost(inst, perm):
    """Total distance of robot l -> target perm[l]."""
    d = inst.distances()
    return float(sum(d[l, perm[l]] for l in range(inst.n)))


def brute_force_optimal(inst):
    """Enumerate all permutations; return (permutation, cost).

    Ties resolve to the lexicographically smallest permutation because
    enumeration is in lexicographic order and only strict improvements are
    accepted.
    """
    n = inst.n
    if n > _MAX_BRUTE_FORCE:
        raise ValueError(f"brute force limited to n <= {_MAX_BRUTE_FORCE}")
    d = inst.distances()
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(n)):
        cost = sum(d[l, perm[l]] for l in range(n))
        if cost < best_cost:
            best, best_cost = perm, cost
    return best, float(best_cost)


def extract_assignment(z, n=None):
    """Read a permutation off an assignment vector by row-wise argmax.

    Returns the permutation tuple, or None when the rounding is not
    trustworthy: some chosen entry < 0.5, or the argmax rows collide.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    if n is None:
        n = int(round(np.sqrt(z.size)))
    if n * n != z.size:
        raise ValueError("assignment vector length must be a square")
    zm = z.reshape(n, n)
    # ties resolve to the lowest column index (np.argmax convention)
    perm = tuple(int(np.argmax(zm[l])) for l in range(n))
    if any(zm[l, perm[l]] < 0.5 for l in range(n)):
        return None
    if len(set(perm)) != n:
        return None
    return perm
