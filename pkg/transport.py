"""Optimal-transport couplings and Wasserstein distances.

Exact couplings solve the assignment problem with scipy; entropic couplings
run log-domain Sinkhorn iterations in torch so the same solver serves metrics
(on arrays) and losses (on tensors, as the regularized objective whose
gradient is the plan).
"""
import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from errors import DimensionError

logger = logging.getLogger(__name__)

DEFAULT_EPSILON_FACTOR = 0.05
DEFAULT_MAX_ITERS = 200
DEFAULT_TOL = 1e-6
# Above this many particles per side the exact solver is replaced by Sinkhorn
EXACT_MAX_PARTICLES = 4096


@dataclass(frozen=True)
class CouplingPlan:
    kind: str
    cost: float
    perm: Optional[np.ndarray] = None
    plan: Optional[np.ndarray] = None
    converged: bool = True
    iterations: int = 0

    def __post_init__(self):
        if self.kind not in ("permutation", "dense"):
            raise ValueError(f"unknown coupling kind {self.kind!r}")


def as_points(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy().astype(np.float64)
    return np.asarray(getattr(x, "points", x), dtype=np.float64)


def cost_matrix(x, y, p):
    """C[j, k] = ||x_j - y_k||^p for point arrays"""
    x, y = as_points(x), as_points(y)
    if x.shape[1] != y.shape[1]:
        raise DimensionError(f"clouds live in d={x.shape[1]} and d={y.shape[1]}")
    if p == 2:
        return cdist(x, y, "sqeuclidean")
    return cdist(x, y, "euclidean") ** p


def pairwise_sq_distances(x, y):
    """Differentiable squared distances over the last two axes"""
    diff = x.unsqueeze(-2) - y.unsqueeze(-3)
    return (diff * diff).sum(-1)


def pairwise_distances(x, y):
    """Differentiable Euclidean distances; the subgradient at coincident points is 0"""
    sq = pairwise_sq_distances(x, y)
    positive = sq > 0
    safe = torch.where(positive, sq, torch.ones_like(sq))
    return torch.where(positive, safe.sqrt(), torch.zeros_like(sq))


def pairwise_cost(x, y, p):
    if p == 2:
        return pairwise_sq_distances(x, y)
    return pairwise_distances(x, y) ** p


def _tight_edges(C, perm):
    """Edges with zero reduced cost under dual potentials for the optimal `perm`.

    Column potentials are shortest-path distances over the reassignment graph
    (row i moving from perm[i] to j costs C[i, j] - C[i, perm[i]]). Every
    optimal permutation uses tight edges only.
    """
    n = len(perm)
    rows = np.arange(n)
    assigned = C[rows, perm]
    W = C - assigned[:, None]
    v = np.zeros(n)
    for _ in range(n):
        relaxed = np.minimum(v, (v[perm][:, None] + W).min(axis=0))
        if np.array_equal(relaxed, v):
            break
        v = relaxed
    u = assigned - v[perm]
    reduced = C - u[:, None] - v[None, :]
    return reduced <= 1e-9 * max(1.0, float(np.abs(C).max()))


def _reroute(i, j, perm, row_of, tight, fixed):
    """Move row i onto column j along an alternating path of tight edges"""
    start, target = row_of[j], perm[i]
    parent = {}
    queue = deque([start])
    while queue:
        q = queue.popleft()
        for c in np.flatnonzero(tight[q] & ~fixed):
            if c == j or c in parent:
                continue
            parent[c] = q
            if c == target:
                while True:
                    q = parent[c]
                    previous = perm[q]
                    perm[q], row_of[c] = c, q
                    if q == start:
                        break
                    c = previous
                perm[i], row_of[j] = j, i
                return True
            queue.append(row_of[c])
    return False


def _lowest_index_permutation(C, perm):
    """Lexicographically smallest permutation among those as cheap as `perm`"""
    n = len(perm)
    tight = _tight_edges(C, perm)
    perm = perm.copy()
    row_of = np.empty(n, dtype=perm.dtype)
    row_of[perm] = np.arange(n)
    fixed = np.zeros(n, dtype=bool)
    for i in range(n):
        for j in np.flatnonzero(tight[i] & ~fixed):
            if j == perm[i] or _reroute(i, j, perm, row_of, tight, fixed):
                break
        fixed[perm[i]] = True
    return perm


def _assignment_cost(C, perm, p):
    return (math.fsum(C[np.arange(len(perm)), perm]) / len(perm)) ** (1.0 / p)


def exact_coupling(x, y, p=2):
    """Optimal permutation between two equal-size clouds; cost is the exact W_p.

    Among tied optima the lowest-index permutation is returned.
    """
    xs, ys = as_points(x), as_points(y)
    if xs.shape[0] != ys.shape[0]:
        raise DimensionError(f"exact coupling needs equal cardinalities, got {xs.shape[0]} and {ys.shape[0]}")
    C = cost_matrix(xs, ys, p)
    _, perm = linear_sum_assignment(C)
    perm = _lowest_index_permutation(C, perm)
    return CouplingPlan(kind="permutation", perm=perm, cost=_assignment_cost(C, perm, p))


def _log_sinkhorn(C, epsilon, max_iters=DEFAULT_MAX_ITERS, tol=DEFAULT_TOL):
    """Log-domain Sinkhorn with uniform marginals and epsilon scaling.

    Potentials are warm-started through a geometric sequence of larger
    regularizations before iterating at `epsilon`. Returns (log plan,
    converged, iterations at the target epsilon).
    """
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    n, m = C.shape
    log_a = torch.full((n,), -math.log(n), dtype=C.dtype)
    log_b = torch.full((m,), -math.log(m), dtype=C.dtype)
    f = torch.zeros(n, dtype=C.dtype)
    g = torch.zeros(m, dtype=C.dtype)

    def sweep(eps):
        f_new = -eps * torch.logsumexp(log_b[None, :] + (g[None, :] - C) / eps, dim=1)
        g_new = -eps * torch.logsumexp(log_a[:, None] + (f_new[:, None] - C) / eps, dim=0)
        return f_new, g_new

    schedule = []
    eps = float(C.max())
    while eps > epsilon * 2:
        schedule.append(eps)
        eps /= 2
    for eps in schedule:
        for _ in range(10):
            f, g = sweep(eps)

    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        f, g = sweep(epsilon)
        log_plan = log_a[:, None] + log_b[None, :] + (f[:, None] + g[None, :] - C) / epsilon
        # columns are exact after the g update; rows carry the violation
        violation = (log_plan.exp().sum(1) - log_a.exp()).abs().max()
        if violation < tol:
            converged = True
            break
    return log_plan, converged, iterations


def sinkhorn_plan(x, y, p=2, epsilon=None, max_iters=DEFAULT_MAX_ITERS, tol=DEFAULT_TOL):
    """Entropic coupling; `cost` is the transport cost <P, C> (not rooted).

    When `epsilon` is None it defaults to 0.05 times the mean cost.
    """
    C = torch.as_tensor(cost_matrix(x, y, p), dtype=torch.float64)
    if epsilon is None:
        epsilon = _default_epsilon(C, DEFAULT_EPSILON_FACTOR)
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    log_plan, converged, iterations = _log_sinkhorn(C, float(epsilon), max_iters, tol)
    if not converged:
        logger.warning("Sinkhorn did not reach tol=%g within %d iterations (epsilon=%g)",
                       tol, max_iters, epsilon)
    plan = log_plan.exp().numpy()
    cost = math.fsum((plan * C.numpy()).ravel())
    return CouplingPlan(kind="dense", plan=plan, cost=cost, converged=converged, iterations=iterations)


def _default_epsilon(C, factor):
    mean = float(C.mean())
    return factor * mean if mean > 0 else 1.0


def sinkhorn_cost(x, y, p=2, epsilon_factor=DEFAULT_EPSILON_FACTOR, max_iters=DEFAULT_MAX_ITERS,
                  tol=DEFAULT_TOL):
    """Differentiable entropic transport objective <P, C> + eps * KL(P | a b).

    eps = epsilon_factor * mean(C) stays in the graph. The plan is solved on
    detached costs; at the optimum it is the exact gradient of the objective
    with respect to C, and KL(P | a b) is its derivative with respect to eps.
    """
    C = pairwise_cost(x, y, p)
    n, m = C.shape
    mean = C.mean()
    eps = epsilon_factor * mean if float(mean) > 0 else torch.ones_like(mean)
    with torch.no_grad():
        log_plan, _, _ = _log_sinkhorn(C.detach(), float(eps), max_iters, tol)
        plan = log_plan.exp()
        kl = (plan * (log_plan + math.log(n) + math.log(m))).sum()
    return (plan * C).sum() + eps * kl


def wasserstein_p(x, y, p=2):
    """W_p between two clouds: exact for equal sizes, entropic otherwise"""
    xs, ys = as_points(x), as_points(y)
    if xs.shape[1] != ys.shape[1]:
        raise DimensionError(f"clouds live in d={xs.shape[1]} and d={ys.shape[1]}")
    if xs.shape[0] == ys.shape[0] and xs.shape[0] <= EXACT_MAX_PARTICLES:
        C = cost_matrix(xs, ys, p)
        return _assignment_cost(C, linear_sum_assignment(C)[1], p)
    coupling = sinkhorn_plan(xs, ys, p)
    return max(coupling.cost, 0.0) ** (1.0 / p)


def minibatch_ot_pairs(x_batch, y_batch, p=2):
    """Reorder y_batch so row j is coupled to row j of x_batch"""
    if x_batch.shape[0] != y_batch.shape[0]:
        raise DimensionError(f"batches have {x_batch.shape[0]} and {y_batch.shape[0]} rows")
    perm = exact_coupling(x_batch, y_batch, p).perm
    if isinstance(y_batch, torch.Tensor):
        return x_batch, y_batch[torch.as_tensor(perm, dtype=torch.long)]
    return x_batch, y_batch[perm]
