"""Earth mover's distance between finitely supported distributions in R^2.

The exact solver runs the network simplex on the transportation problem
(min-cost flow on the complete bipartite graph). Degeneracy is handled with
the classic supply perturbation: pivots run on perturbed supplies, the final
flows are re-solved on the optimal tree with the true supplies. The entropic
path is a log-domain Sinkhorn whose coupling is rounded back to the feasible
polytope before costing.

All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TransportError(Exception):
    pass


class SupportTooLarge(TransportError):
    """Support exceeds the configured cap; truncate before calling."""


class Unnormalized(TransportError):
    """Weights are negative or do not sum to 1 within tolerance."""


class NotConverged(TransportError):
    """Sinkhorn hit the iteration cap; best estimate attached."""

    def __init__(self, estimate: float, marginal_error: float):
        super().__init__(f"sinkhorn not converged (marginal error {marginal_error:.2e})")
        self.estimate = estimate
        self.marginal_error = marginal_error


class ZeroObservedMass(TransportError):
    """Conditional-on-observed mode requires nonzero observed mass."""


@dataclass(frozen=True)
class DiscreteDistribution:
    """Weighted support points in world meters; weights nonnegative, sum 1."""

    support: np.ndarray  # (k, 2)
    weights: np.ndarray  # (k,)

    def __post_init__(self):
        support = np.atleast_2d(np.asarray(self.support, dtype=float))
        weights = np.asarray(self.weights, dtype=float).ravel()
        if support.shape[0] != weights.shape[0] or support.shape[1] != 2:
            raise ValueError(f"bad shapes {support.shape} / {weights.shape}")
        if np.any(weights < -1e-12):
            raise Unnormalized("negative weight")
        total = weights.sum()
        if abs(total - 1.0) > 1e-6:
            raise Unnormalized(f"weights sum to {total}")
        # canonicalize: merge duplicate support points, drop zero weights, renormalize
        weights = np.maximum(weights, 0.0)
        order = np.lexsort((support[:, 1], support[:, 0]))
        support, weights = support[order], weights[order]
        keep_s, keep_w = [], []
        for p, w in zip(support, weights):
            if keep_s and np.array_equal(keep_s[-1], p):
                keep_w[-1] += w
            else:
                keep_s.append(p)
                keep_w.append(w)
        support = np.array(keep_s)
        weights = np.array(keep_w)
        nz = weights > 0.0
        if not np.any(nz):
            raise Unnormalized("all weights zero")
        support, weights = support[nz], weights[nz]
        weights = weights / weights.sum()
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return len(self.weights)

    @classmethod
    def point_mass(cls, p) -> "DiscreteDistribution":
        return cls(np.asarray(p, dtype=float).reshape(1, 2), np.ones(1))


@dataclass(frozen=True)
class TransportPlan:
    """Feasible coupling between two supports with its total cost in meters."""

    flows: np.ndarray  # (n, m), row sums = source weights, col sums = sink weights
    cost: float

    def check(self, a: DiscreteDistribution, b: DiscreteDistribution, tol: float = 1e-6):
        if np.any(self.flows < -1e-9):
            raise ValueError("negative flow")
        if np.max(np.abs(self.flows.sum(axis=1) - a.weights)) > tol:
            raise ValueError("row sums do not match source weights")
        if np.max(np.abs(self.flows.sum(axis=0) - b.weights)) > tol:
            raise ValueError("column sums do not match sink weights")
        return self


def pairwise_distances(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    d = xs[:, None, :] - ys[None, :, :]
    return np.sqrt(np.maximum((d * d).sum(axis=-1), 0.0))


def _northwest_corner(a: np.ndarray, b: np.ndarray):
    """Initial basic feasible solution with exactly n + m - 1 cells."""
    n, m = len(a), len(b)
    ra, rb = a.copy(), b.copy()
    rows = np.empty(n + m - 1, dtype=np.int64)
    cols = np.empty(n + m - 1, dtype=np.int64)
    flow = np.empty(n + m - 1, dtype=float)
    i = j = k = 0
    while True:
        f = min(ra[i], rb[j])
        rows[k], cols[k], flow[k] = i, j, f
        ra[i] -= f
        rb[j] -= f
        k += 1
        if i == n - 1 and j == m - 1:
            break
        if ra[i] <= rb[j] and i < n - 1:
            i += 1
        elif j < m - 1:
            j += 1
        else:
            i += 1
    return rows[:k], cols[:k], flow[:k]


def _solve_tree_flows(n, m, rows, cols, a, b):
    """Exact flows on a spanning-tree basis by leaf elimination."""
    E = len(rows)
    adj = [[] for _ in range(n + m)]
    for e, (i, j) in enumerate(zip(rows, cols)):
        adj[i].append(e)
        adj[n + j].append(e)
    deg = np.array([len(x) for x in adj])
    rem = np.concatenate([a, b]).astype(float)
    done = np.zeros(E, dtype=bool)
    flow = np.zeros(E)
    queue = [x for x in range(n + m) if deg[x] == 1]
    while queue:
        x = queue.pop()
        edge = next((e for e in adj[x] if not done[e]), None)
        if edge is None:
            continue
        i, j = rows[edge], cols[edge]
        other = n + j if x == i else i
        flow[edge] = rem[x]
        rem[other] -= rem[x]
        rem[x] = 0.0
        done[edge] = True
        deg[x] -= 1
        deg[other] -= 1
        if deg[other] == 1:
            queue.append(other)
    return np.maximum(flow, 0.0)


def _network_simplex(a, b, C, max_pivots=200_000):
    """Optimal transportation plan for supplies a, demands b, costs C."""
    n, m = C.shape
    # Charnes perturbation: removes ties so every pivot is nondegenerate
    eps = 1e-7 / n
    ap = a + eps
    bp = b.copy()
    bp[-1] += n * eps
    rows, cols, flow = _northwest_corner(ap, bp)
    tol = 1e-11 * (1.0 + float(C.max(initial=0.0)))

    for _ in range(max_pivots):
        # potentials from the current tree
        adj = [[] for _ in range(n + m)]
        for e, (i, j) in enumerate(zip(rows, cols)):
            adj[i].append((n + j, e))
            adj[n + j].append((i, e))
        u = np.zeros(n)
        v = np.zeros(m)
        seen = np.zeros(n + m, dtype=bool)
        seen[0] = True
        stack = [0]
        parent = np.full(n + m, -1, dtype=np.int64)
        parent_edge = np.full(n + m, -1, dtype=np.int64)
        while stack:
            x = stack.pop()
            for y, e in adj[x]:
                if not seen[y]:
                    seen[y] = True
                    parent[y] = x
                    parent_edge[y] = e
                    i, j = rows[e], cols[e]
                    if y >= n:
                        v[y - n] = C[i, j] - u[x]
                    else:
                        u[y] = C[i, j] - v[x - n]
                    stack.append(y)
        if not seen.all():
            raise TransportError("basis lost connectivity")

        reduced = C - u[:, None] - v[None, :]
        ei, ej = np.unravel_index(np.argmin(reduced), reduced.shape)
        if reduced[ei, ej] >= -tol:
            break

        # cycle = entering edge + tree path from source ei to sink ej
        path_a = [ei]
        x = ei
        while x != 0 and parent[x] >= 0:
            path_a.append(parent[x])
            x = parent[x]
        path_b = [n + ej]
        x = n + ej
        while x != 0 and parent[x] >= 0:
            path_b.append(parent[x])
            x = parent[x]
        seta = {node: k for k, node in enumerate(path_a)}
        meet = next(node for node in path_b if node in seta)
        ka, kb = seta[meet], path_b.index(meet)
        nodes = path_a[: ka + 1] + list(reversed(path_b[:kb]))
        # edges along the path, alternating -delta/+delta starting at the source side
        cyc_edges = []
        for k in range(len(nodes) - 1):
            x, y = nodes[k], nodes[k + 1]
            e = parent_edge[x] if parent[x] == y else parent_edge[y]
            cyc_edges.append(e)
        leaving = min(cyc_edges[0::2], key=lambda e: flow[e])
        delta = flow[leaving]
        sign = -1.0
        for e in cyc_edges:
            flow[e] += sign * delta
            sign = -sign
        rows[leaving], cols[leaving], flow[leaving] = ei, ej, delta
    else:
        raise TransportError("pivot cap exceeded")

    true_flow = _solve_tree_flows(n, m, rows, cols, a, b)
    plan = np.zeros((n, m))
    plan[rows, cols] = true_flow
    cost = float((plan * C).sum())
    return plan, cost


def emd_exact(a: DiscreteDistribution, b: DiscreteDistribution, support_cap: int = 512):
    """Exact earth mover's distance and an optimal plan.

    Raises SupportTooLarge when either side exceeds support_cap.
    """
    if len(a) > support_cap or len(b) > support_cap:
        raise SupportTooLarge(f"supports {len(a)}x{len(b)} exceed cap {support_cap}")
    C = pairwise_distances(a.support, b.support)
    if len(a) == 1:
        flows = b.weights[None, :].copy()
        return float((flows * C).sum()), TransportPlan(flows, float((flows * C).sum()))
    if len(b) == 1:
        flows = a.weights[:, None].copy()
        return float((flows * C).sum()), TransportPlan(flows, float((flows * C).sum()))
    flows, cost = _network_simplex(a.weights, b.weights, C)
    return cost, TransportPlan(flows, cost)


def _round_coupling(P, a, b):
    """Project an approximate coupling onto the feasible polytope (rank-one fix)."""
    r = P.sum(axis=1)
    P = P * np.minimum(1.0, a / np.where(r > 0, r, 1.0))[:, None]
    c = P.sum(axis=0)
    P = P * np.minimum(1.0, b / np.where(c > 0, c, 1.0))[None, :]
    da = a - P.sum(axis=1)
    db = b - P.sum(axis=0)
    s = da.sum()
    if s > 1e-15:
        P = P + np.outer(da, db) / s
    return P


def emd_entropic(
    a: DiscreteDistribution,
    b: DiscreteDistribution,
    regularization: float = 0.01,
    max_iters: int = 2000,
    tol: float = 1e-9,
    support_cap: int = 512,
) -> float:
    """Entropy-regularized EMD via log-domain Sinkhorn; cost of the rounded plan."""
    if len(a) > support_cap or len(b) > support_cap:
        raise SupportTooLarge(f"supports {len(a)}x{len(b)} exceed cap {support_cap}")
    if regularization <= 0:
        raise ValueError("regularization must be positive")
    C = pairwise_distances(a.support, b.support)
    wa, wb = a.weights, b.weights
    log_a, log_b = np.log(wa), np.log(wb)
    f = np.zeros(len(wa))
    g = np.zeros(len(wb))
    reg = regularization
    err = np.inf
    for _ in range(max_iters):
        f = reg * (log_a - _lse((g[None, :] - C) / reg, axis=1))
        g = reg * (log_b - _lse((f[:, None] - C) / reg, axis=0))
        P = np.exp((f[:, None] + g[None, :] - C) / reg)
        err = np.abs(P.sum(axis=1) - wa).sum()
        if err < tol:
            break
    P = np.exp((f[:, None] + g[None, :] - C) / reg)
    cost = float((_round_coupling(P, wa, wb) * C).sum())
    if err >= tol:
        raise NotConverged(estimate=cost, marginal_error=float(err))
    return cost


def _lse(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.exp(x - m).sum(axis=axis))


def truncate_support(d: DiscreteDistribution, max_points: int):
    """Keep the max_points largest-weight points; returns (distribution, retained mass)."""
    if max_points < 1:
        raise ValueError("max_points must be >= 1")
    if len(d) <= max_points:
        return d, 1.0
    order = np.argsort(-d.weights, kind="stable")[:max_points]
    kept = float(d.weights[order].sum())
    return DiscreteDistribution(d.support[order], d.weights[order] / kept), kept


def emd(
    a: DiscreteDistribution,
    b: DiscreteDistribution,
    backend: str = "exact",
    truncate: int | None = None,
    support_cap: int = 512,
    sinkhorn_reg: float = 0.01,
    sinkhorn_iters: int = 2000,
) -> float:
    """Cost-only EMD with optional support truncation and backend selection."""
    if truncate is not None:
        a, _ = truncate_support(a, truncate)
        b, _ = truncate_support(b, truncate)
    if backend == "exact":
        cost, _ = emd_exact(a, b, support_cap=support_cap)
        return cost
    if backend == "entropic":
        try:
            return emd_entropic(
                a, b, regularization=sinkhorn_reg, max_iters=sinkhorn_iters, support_cap=support_cap
            )
        except NotConverged as exc:
            return exc.estimate
    raise ValueError(f"unknown EMD backend {backend!r}")


def emd_between_visitations(a, b, backend: str = "exact", truncate: int | None = None) -> float:
    """EMD between two visitation distributions, conditioned on observed cells.

    Both distributions must share a GridSpec. The out-of-bounds mass is dropped
    and the observed part renormalized before transport; raises ZeroObservedMass
    when either side has no observed mass.
    """
    if a.spec != b.spec:
        raise ValueError("visitation distributions live on different grids")
    return emd(
        a.conditioned_on_observed(),
        b.conditioned_on_observed(),
        backend=backend,
        truncate=truncate,
    )
