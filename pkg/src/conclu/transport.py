"""Entropic optimal transport with uniform marginals.

The solver alternates row/column rescaling of the Gibbs kernel exp(-D/eps)
(Sinkhorn-Knopp), switching to an equivalent log-domain sweep when the
row-min-shifted kernel still underflows a whole column. Two independent
test oracles live here as well: an exact LP solver that enumerates the
basic feasible solutions of the transportation polytope, and a
high-precision entropic solver that runs gradient ascent on the dual
potentials.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ScaleError, ShapeError
from .geometry import PointCloud

LP_MAX_ROWS = 6
LP_MAX_COLS = 4


def cost_matrix(pc, protos):
    """Exact squared Euclidean distances d_ij = ||p_i - c_j||^2.

    Computed from explicit differences (no expansion trick) so entries are
    exact to rounding and never negative.
    """
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    protos = np.asarray(protos, dtype=np.float64)
    if pts.ndim != 2 or protos.ndim != 2 or pts.shape[1] != protos.shape[1]:
        raise ShapeError(
            f"incompatible shapes for cost matrix: {pts.shape} vs {protos.shape}"
        )
    diff = pts[:, None, :] - protos[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


@dataclass
class TransportPlan:
    """Joint-probability matrix with uniform marginals and solver metadata."""

    gamma_joint: np.ndarray  # (N, J), rows ~ 1/N, columns ~ 1/J
    epsilon: float
    iterations: int

    @property
    def shape(self):
        return self.gamma_joint.shape


def pseudo_labels(plan):
    """Per-point soft targets: gamma = N * Gamma, rows ~ distributions."""
    return plan.gamma_joint.shape[0] * plan.gamma_joint


def _row_residual(gamma):
    n = gamma.shape[0]
    return np.abs(gamma.sum(axis=1) - 1.0 / n).max()


class _ColumnUnderflow(Exception):
    # internal: plain path lost a whole column to exp underflow
    pass


def sinkhorn(d, epsilon=1e-3, iters=20, tol=None, max_iters=100_000):
    """Balanced entropic transport by alternating row/column rescaling.

    Each sweep rescales rows to sum 1/N and then columns to sum 1/J, so
    column marginals are exact (up to rounding) at exit while row marginals
    carry the residual. ``iters`` fixes the sweep count for deterministic
    training; passing ``tol`` instead iterates until the row-marginal
    residual drops below it (used by the oracle test suite only).

    The Gibbs kernel is built with a per-row min shift, which leaves every
    iterate after the first row rescale unchanged (row scalings cancel) but
    keeps the kernel finite at tiny epsilon. If a whole column still
    underflows, the solver reruns the sweeps in the log domain.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2:
        raise ShapeError(f"cost matrix must be 2D, got shape {d.shape}")
    if not np.isfinite(d).all():
        raise NumericError("cost matrix contains non-finite entries")
    if epsilon <= 0.0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    if tol is None and iters < 1:
        raise ConfigError(f"need at least one iteration, got {iters}")

    n, j = d.shape
    ra, ca = 1.0 / n, 1.0 / j
    try:
        gamma, sweeps = _sinkhorn_plain(d, epsilon, iters, tol, max_iters, ra, ca)
    except _ColumnUnderflow:
        gamma, sweeps = _sinkhorn_log(d, epsilon, iters, tol, max_iters, ra, ca)

    if not np.isfinite(gamma).all():
        raise NumericError("transport plan became non-finite during rescaling")
    return TransportPlan(gamma_joint=gamma, epsilon=epsilon, iterations=sweeps)


def _row_shifted_kernel(d, epsilon, row_axis):
    shifted = d - d.min(axis=row_axis, keepdims=True)
    np.divide(shifted, -epsilon, out=shifted)
    np.exp(shifted, out=shifted)
    return shifted


def _sinkhorn_plain(d, epsilon, iters, tol, max_iters, ra, ca):
    gamma = _row_shifted_kernel(d, epsilon, row_axis=1)
    gamma /= gamma.sum()
    sweeps = 0
    limit = max_iters if tol is not None else iters
    while sweeps < limit:
        gamma *= ra / gamma.sum(axis=1, keepdims=True)
        colsum = gamma.sum(axis=0, keepdims=True)
        if not (colsum > 0.0).all():
            raise _ColumnUnderflow
        gamma *= ca / colsum
        sweeps += 1
        if tol is not None and _row_residual(gamma) <= tol:
            break
    return gamma, sweeps


def _logsumexp(x, axis=None, buf=None):
    m = x.max(axis=axis, keepdims=True)
    if buf is None:
        buf = np.empty_like(x)
    np.subtract(x, m, out=buf)
    np.exp(buf, out=buf)
    s = buf.sum(axis=axis, keepdims=True)
    np.log(s, out=s)
    s += m
    return s


def _sinkhorn_log(d, epsilon, iters, tol, max_iters, ra, ca):
    # literal mirror of the plain path in log space
    lg = -d / epsilon
    buf = np.empty_like(lg)
    lg -= _logsumexp(lg, buf=buf)
    lra, lca = np.log(ra), np.log(ca)
    sweeps = 0
    limit = max_iters if tol is not None else iters
    while sweeps < limit:
        lg += lra - _logsumexp(lg, axis=1, buf=buf)
        lg += lca - _logsumexp(lg, axis=0, buf=buf)
        sweeps += 1
        if tol is not None and _row_residual(np.exp(lg)) <= tol:
            break
    return np.exp(lg), sweeps


def sinkhorn_batch(d_stack, epsilon=1e-3, iters=20):
    """Solve a stack of equally shaped transport problems in one sweep loop.

    Vectorizes the fixed-iteration solver over the leading axis of a
    (V, N, J) cost stack; each slice gets exactly the per-matrix result up
    to elementwise arithmetic order. Used by the trainer, where every view
    in a batch yields one cost matrix.
    """
    d = np.asarray(d_stack, dtype=np.float64)
    if d.ndim != 3:
        raise ShapeError(f"cost stack must be 3D, got shape {d.shape}")
    if not np.isfinite(d).all():
        raise NumericError("cost stack contains non-finite entries")
    if epsilon <= 0.0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    if iters < 1:
        raise ConfigError(f"need at least one iteration, got {iters}")

    v, n, j = d.shape
    ra, ca = 1.0 / n, 1.0 / j
    try:
        gamma = _row_shifted_kernel(d, epsilon, row_axis=2)
        gamma /= gamma.sum(axis=(1, 2), keepdims=True)
        for _ in range(iters):
            gamma *= ra / gamma.sum(axis=2, keepdims=True)
            colsum = gamma.sum(axis=1, keepdims=True)
            if not (colsum > 0.0).all():
                raise _ColumnUnderflow
            gamma *= ca / colsum
    except _ColumnUnderflow:
        lg = -d / epsilon
        buf = np.empty_like(lg)
        lg -= _logsumexp(lg, axis=(1, 2), buf=buf)
        lra, lca = np.log(ra), np.log(ca)
        for _ in range(iters):
            lg += lra - _logsumexp(lg, axis=2, buf=buf)
            lg += lca - _logsumexp(lg, axis=1, buf=buf)
        gamma = np.exp(lg)
    if not np.isfinite(gamma).all():
        raise NumericError("transport plan became non-finite during rescaling")
    return [
        TransportPlan(gamma_joint=gamma[k], epsilon=epsilon, iterations=iters)
        for k in range(v)
    ]


def plan_entropy(gamma, tiny=1e-300):
    """H(Gamma) = -sum Gamma_ij (log Gamma_ij - 1), zero entries contributing 0."""
    g = np.asarray(gamma)
    mask = g > tiny
    return -(g[mask] * (np.log(g[mask]) - 1.0)).sum()


def entropic_objective(gamma, d, epsilon):
    """<Gamma, D> - eps * H(Gamma); the quantity each sweep decreases."""
    return float((gamma * d).sum() - epsilon * plan_entropy(gamma))


# ---------------------------------------------------------------------------
# exact LP oracle: vertex enumeration of the transportation polytope


_VERTEX_CACHE = {}


def _enumerate_vertices(n, j):
    """All distinct basic feasible solutions for uniform marginals (1/n, 1/j).

    Basic solutions correspond to spanning trees of the complete bipartite
    graph K_{n,j}; flows follow by leaf elimination and are independent of
    the cost matrix, so vertices are enumerated once per size and cached.
    Flows are integer multiples of 1/(n*j), which makes deduplication exact.
    """
    key = (n, j)
    if key in _VERTEX_CACHE:
        return _VERTEX_CACHE[key]

    edges = [(i, n + c) for i in range(n) for c in range(j)]
    n_edges = len(edges)
    need = n + j - 1
    n_nodes = n + j
    parent = list(range(n_nodes))

    def find(x):
        while parent[x] != x:
            x = parent[x]
        return x

    # integer demands scaled by n*j: rows j each, columns n each
    base_demand = [j] * n + [n] * j
    seen = set()
    vertices = []
    chosen = []

    def solve_tree():
        demand = base_demand.copy()
        deg = [0] * n_nodes
        incident = [[] for _ in range(n_nodes)]
        for e in chosen:
            a, b = edges[e]
            deg[a] += 1
            deg[b] += 1
            incident[a].append(e)
            incident[b].append(e)
        flow = {}
        leaves = [v for v in range(n_nodes) if deg[v] == 1]
        while leaves:
            u = leaves.pop()
            e = next(ei for ei in incident[u] if ei not in flow)
            a, b = edges[e]
            v = b if a == u else a
            f = demand[u]
            if f < 0:
                return
            flow[e] = f
            demand[u] = 0
            demand[v] -= f
            deg[u] -= 1
            deg[v] -= 1
            if deg[v] == 1:
                leaves.append(v)
        sig = tuple(sorted((e, f) for e, f in flow.items() if f > 0))
        if sig in seen:
            return
        seen.add(sig)
        mat = np.zeros(n * j)
        for e, f in flow.items():
            i, c = edges[e]
            mat[i * j + (c - n)] = f / (n * j)
        vertices.append(mat)

    def dfs(start, size):
        if size == need:
            solve_tree()
            return
        if n_edges - start < need - size:
            return
        for e in range(start, n_edges):
            a, b = edges[e]
            ra, rb = find(a), find(b)
            if ra == rb:
                continue
            parent[ra] = rb
            chosen.append(e)
            dfs(e + 1, size + 1)
            chosen.pop()
            parent[ra] = ra

    dfs(0, 0)
    stacked = np.array(vertices)
    _VERTEX_CACHE[key] = stacked
    return stacked


def transport_lp_oracle(d):
    """Exact minimum of <Gamma, D> over the uniform-marginal polytope.

    Enumerates all basic feasible solutions (polytope vertices); returns
    (optimal cost, one optimal vertex as an (N, J) plan). Limited to
    enumeration scale N <= 6, J <= 4.
    """
    d = np.asarray(d, dtype=np.float64)
    n, j = d.shape
    if n > LP_MAX_ROWS or j > LP_MAX_COLS:
        raise ScaleError(
            f"LP oracle supports N <= {LP_MAX_ROWS}, J <= {LP_MAX_COLS}; got {n}x{j}"
        )
    vertices = _enumerate_vertices(n, j)
    costs = vertices @ d.ravel()
    best = int(costs.argmin())
    return float(costs[best]), vertices[best].reshape(n, j)


# ---------------------------------------------------------------------------
# independent entropic oracle: gradient ascent on the dual potentials


def entropic_dual_oracle(d, epsilon, grad_tol=1e-12, max_iters=500_000):
    """High-precision entropic transport via dual gradient ascent.

    Maximizes phi(f, g) = <f, a> + <g, b> - eps * sum exp((f_i + g_j - D_ij)/eps)
    with Armijo backtracking until the marginal defect (the dual gradient)
    has infinity norm below ``grad_tol``. Deliberately avoids the
    alternating-rescaling updates so it can serve as an independent check.
    """
    d = np.asarray(d, dtype=np.float64)
    n, j = d.shape
    a = np.full(n, 1.0 / n)
    b = np.full(j, 1.0 / j)
    f = np.zeros(n)
    g = np.zeros(j)

    def plan(fv, gv):
        return np.exp((fv[:, None] + gv[None, :] - d) / epsilon)

    def value(fv, gv):
        return fv @ a + gv @ b - epsilon * plan(fv, gv).sum()

    step = epsilon
    phi = value(f, g)
    for _ in range(max_iters):
        p = plan(f, g)
        grad_f = a - p.sum(axis=1)
        grad_g = b - p.sum(axis=0)
        gnorm = max(np.abs(grad_f).max(), np.abs(grad_g).max())
        if gnorm <= grad_tol:
            return p
        sq = grad_f @ grad_f + grad_g @ grad_g
        t = step * 2.0
        while t > 1e-30:
            cand = value(f + t * grad_f, g + t * grad_g)
            if cand >= phi + 0.25 * t * sq:
                break
            t *= 0.5
        f += t * grad_f
        g += t * grad_g
        phi = value(f, g)
        step = t
    raise NumericError(
        f"dual oracle failed to reach gradient tolerance {grad_tol} "
        f"within {max_iters} iterations"
    )
