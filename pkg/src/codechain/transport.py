"""Cosine cost matrices, exact EMD, and channel alignment weights.

solve_emd is a classical primal transportation simplex: north-west
corner start, MODI (u/v) pricing on the basis tree, stepping-stone
pivots along the unique tree cycle, and Bland's smallest-index rule for
both the entering and the leaving variable so degenerate instances
cannot cycle. The marginals are perturbed internally by a tiny constant
to keep the start nondegenerate; once an optimal basis is found, the
reported plan is re-solved on that basis from the true marginals. A
dual-feasibility certificate is checked before returning.

Problem sizes here are the number of coarse codes (single digits), so
the implementation favors clarity over asymptotics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, InternalError
from .rvq import Codebook

_PERTURB = 1e-12
_PRICE_TOL = 1e-12
_CERT_TOL = 1e-9
_MARGINAL_TOL = 1e-9
_MAX_PIVOTS = 100000


@dataclass(frozen=True)
class CostMatrix:
    """Symmetric ground cost with zero diagonal, entries in [0, 2]."""

    costs: np.ndarray

    def __post_init__(self):
        costs = np.asarray(self.costs, dtype=np.float64)
        if costs.ndim != 2 or costs.shape[0] != costs.shape[1]:
            raise DataError("cost matrix must be square")
        if not np.all(np.isfinite(costs)):
            raise DataError("cost matrix must be finite")
        if np.max(np.abs(costs - costs.T)) > 1e-6:
            raise DataError("cost matrix must be symmetric")
        if costs.min() < -1e-6 or costs.max() > 2.0 + 1e-6:
            raise DataError("cost entries must lie in [0, 2]")
        if np.max(np.abs(np.diag(costs))) > 1e-6:
            raise DataError("cost diagonal must be zero")
        costs = np.clip(0.5 * (costs + costs.T), 0.0, 2.0)
        np.fill_diagonal(costs, 0.0)
        object.__setattr__(self, "costs", costs)

    @property
    def n(self) -> int:
        return self.costs.shape[0]


def cosine_cost(coarse: Codebook) -> CostMatrix:
    """1 - cosine similarity between coarse codewords."""
    v = coarse.vectors
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0.0):
        raise DataError("cosine cost undefined for a zero-norm codeword")
    u = v / norms[:, None]
    sim = np.clip(u @ u.T, -1.0, 1.0)
    costs = 1.0 - sim
    np.fill_diagonal(costs, 0.0)
    return CostMatrix(costs=0.5 * (costs + costs.T))


@dataclass(frozen=True)
class TransportPlan:
    plan: np.ndarray
    cost: float


def _northwest_corner(a: np.ndarray, b: np.ndarray):
    """Initial basic solution; always exactly 2n-1 basic cells."""
    n = a.size
    flow = np.zeros((n, n))
    in_basis = np.zeros((n, n), dtype=bool)
    a = a.copy()
    b = b.copy()
    i = j = 0
    while True:
        t = min(a[i], b[j])
        flow[i, j] = t
        in_basis[i, j] = True
        a[i] -= t
        b[j] -= t
        if i == n - 1 and j == n - 1:
            break
        # advance exactly one pointer per step: 2n-2 steps, 2n-1 cells,
        # and neither pointer can run past its last index even when the
        # marginal sums disagree at the 1e-9 tolerance
        if a[i] == 0.0 and i < n - 1:
            i += 1
        elif j < n - 1:
            j += 1
        else:
            i += 1
    return flow, in_basis


def _duals(in_basis: np.ndarray, costs: np.ndarray):
    """u_i + v_j = c_ij on basic cells, anchored at u_0 = 0."""
    n = costs.shape[0]
    u = np.full(n, np.nan)
    v = np.full(n, np.nan)
    u[0] = 0.0
    stack = [("r", 0)]
    while stack:
        kind, k = stack.pop()
        if kind == "r":
            for j in np.flatnonzero(in_basis[k]):
                if np.isnan(v[j]):
                    v[j] = costs[k, j] - u[k]
                    stack.append(("c", int(j)))
        else:
            for i in np.flatnonzero(in_basis[:, k]):
                if np.isnan(u[i]):
                    u[i] = costs[i, k] - v[k]
                    stack.append(("r", int(i)))
    if np.isnan(u).any() or np.isnan(v).any():
        raise InternalError("transport basis is not connected")
    return u, v


def _basis_cycle(in_basis: np.ndarray, entering: tuple[int, int]):
    """The unique cycle created by adding the entering cell to the tree.

    Returned cells start at the entering cell and alternate +/- along
    the cycle.
    """
    n = in_basis.shape[0]
    i0, j0 = entering
    start = ("c", j0)
    goal = ("r", i0)
    parent: dict = {}
    seen = {start}
    stack = [start]
    while stack:
        node = stack.pop()
        if node == goal:
            break
        kind, idx = node
        if kind == "c":
            for i in np.flatnonzero(in_basis[:, idx]):
                nxt = ("r", int(i))
                if nxt not in seen:
                    seen.add(nxt)
                    parent[nxt] = (node, (int(i), idx))
                    stack.append(nxt)
        else:
            for j in np.flatnonzero(in_basis[idx]):
                nxt = ("c", int(j))
                if nxt not in seen:
                    seen.add(nxt)
                    parent[nxt] = (node, (idx, int(j)))
                    stack.append(nxt)
    if goal not in seen:
        raise InternalError("entering cell closes no cycle; basis is not spanning")
    cells = []
    node = goal
    while node != start:
        node, cell = parent[node]
        cells.append(cell)
    cells.reverse()
    return [entering] + cells


def _tree_flows(in_basis: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Solve the basic flows on a spanning-tree basis by leaf stripping."""
    n = p.size
    flow = np.zeros((n, n))
    remaining = in_basis.copy()
    supply = p.astype(np.float64).copy()
    demand = q.astype(np.float64).copy()
    row_deg = remaining.sum(axis=1)
    col_deg = remaining.sum(axis=0)
    for _ in range(int(in_basis.sum())):
        rows = np.flatnonzero(row_deg == 1)
        if rows.size:
            i = int(rows[0])
            j = int(np.flatnonzero(remaining[i])[0])
            f = supply[i]
        else:
            cols = np.flatnonzero(col_deg == 1)
            if cols.size == 0:
                raise InternalError("transport basis contains a cycle")
            j = int(cols[0])
            i = int(np.flatnonzero(remaining[:, j])[0])
            f = demand[j]
        flow[i, j] = f
        supply[i] -= f
        demand[j] -= f
        remaining[i, j] = False
        row_deg[i] -= 1
        col_deg[j] -= 1
    return flow


def solve_emd(p: np.ndarray, q: np.ndarray, costs) -> TransportPlan:
    """Exact optimal transport between two discrete distributions.

    p and q must sum to 1 within 1e-9 with non-negative entries; costs
    is an (n, n) non-negative matrix or a CostMatrix. The returned plan
    has row sums p and column sums q within 1e-9 and globally minimal
    total cost.
    """
    if isinstance(costs, CostMatrix):
        costs = costs.costs
    costs = np.asarray(costs, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    n = p.size
    if p.shape != (n,) or q.shape != (n,) or costs.shape != (n, n):
        raise DataError("p, q must be length-n vectors and costs n x n")
    if n < 1:
        raise DataError("empty marginals")
    if not np.all(np.isfinite(costs)) or costs.min() < 0.0:
        raise DataError("costs must be finite and non-negative")
    if p.min() < -1e-12 or q.min() < -1e-12:
        raise DataError("marginals must be non-negative")
    if abs(p.sum() - 1.0) > _MARGINAL_TOL or abs(q.sum() - 1.0) > _MARGINAL_TOL:
        raise DataError("marginals must sum to 1 within 1e-9")
    p = np.maximum(p, 0.0)
    q = np.maximum(q, 0.0)
    if n == 1:
        return TransportPlan(plan=np.array([[1.0]]), cost=float(costs[0, 0]))

    # perturbed marginals keep every basic flow strictly positive
    pp = p + _PERTURB
    qq = q.copy()
    qq[-1] += n * _PERTURB

    flow, in_basis = _northwest_corner(pp, qq)
    for _ in range(_MAX_PIVOTS):
        u, v = _duals(in_basis, costs)
        reduced = costs - u[:, None] - v[None, :]
        candidates = np.logical_and(~in_basis, reduced < -_PRICE_TOL)
        if not candidates.any():
            break
        flat = int(np.argmax(candidates.ravel()))  # first True in row-major order
        entering = (flat // n, flat % n)
        cycle = _basis_cycle(in_basis, entering)
        minus = cycle[1::2]
        theta = min(flow[c] for c in minus)
        leaving = min(c for c in minus if flow[c] == theta)
        for idx, cell in enumerate(cycle):
            flow[cell] += theta if idx % 2 == 0 else -theta
        flow[leaving] = 0.0
        in_basis[leaving] = False
        in_basis[entering] = True
    else:
        raise InternalError("transportation simplex failed to terminate")

    # re-solve the optimal basis on the true marginals
    plan = np.maximum(_tree_flows(in_basis, p, q), 0.0)
    if (
        np.max(np.abs(plan.sum(axis=1) - p)) > _MARGINAL_TOL
        or np.max(np.abs(plan.sum(axis=0) - q)) > _MARGINAL_TOL
    ):
        raise InternalError("transport plan violates its marginals")
    u, v = _duals(in_basis, costs)
    if float((costs - u[:, None] - v[None, :]).min()) < -_CERT_TOL:
        raise InternalError("transport optimality certificate failed")
    return TransportPlan(plan=plan, cost=float((plan * costs).sum()))


@dataclass(frozen=True)
class ChannelWeights:
    """Per-channel alignment weights in (0, 1], with the mean transport costs."""

    weights: np.ndarray
    sigma: float
    mean_costs: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        mean_costs = np.asarray(self.mean_costs, dtype=np.float64)
        if weights.ndim != 1 or weights.shape != mean_costs.shape:
            raise DataError("weights and mean_costs must be aligned 1-D vectors")
        if np.any(weights <= 0.0) or np.any(weights > 1.0 + 1e-12):
            raise DataError("channel weights must lie in (0, 1]")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "mean_costs", mean_costs)

    @property
    def n_channels(self) -> int:
        return self.weights.size

    @classmethod
    def ones(cls, n_channels: int, sigma: float) -> "ChannelWeights":
        return cls(
            weights=np.ones(n_channels),
            sigma=sigma,
            mean_costs=np.zeros(n_channels),
        )


def channel_weights(src, trg, cost: CostMatrix, sigma: float) -> ChannelWeights:
    """exp(-(mean row-wise EMD / sigma)^2) per channel.

    src and trg are per-channel transition-matrix collections over the
    same codes; each matrix row is transported onto its counterpart row
    under the given ground cost, and the n_codes row costs are averaged.
    Identical matrices give weight 1; weights shrink toward 0 as the
    matrices drift apart.
    """
    if not sigma > 0.0:
        raise ConfigError("sigma must be > 0")
    if src.n_channels != trg.n_channels:
        raise DataError("source and target disagree on channel count")
    if src.n_codes != trg.n_codes or cost.n != src.n_codes:
        raise DataError("transition matrices and cost matrix disagree on n_codes")
    mean_costs = np.empty(src.n_channels)
    for d in range(src.n_channels):
        rows_src = src.tms[d].probs
        rows_trg = trg.tms[d].probs
        total = 0.0
        for i in range(src.n_codes):
            total += solve_emd(rows_src[i], rows_trg[i], cost.costs).cost
        mean_costs[d] = total / src.n_codes
    weights = np.exp(-((mean_costs / sigma) ** 2))
    return ChannelWeights(weights=weights, sigma=sigma, mean_costs=mean_costs)


def write_alignment_report(path, weights: ChannelWeights, config: dict | None = None) -> None:
    """Tab-separated per-channel report; deterministic bytes."""
    from . import records

    lines = []
    if config is not None:
        lines.append("# config " + records.dump_line(config))
    lines.append("# sigma " + repr(float(weights.sigma)))
    lines.append("channel\tmean_cost\tweight")
    for d in range(weights.n_channels):
        lines.append(
            f"{d}\t{float(weights.mean_costs[d])!r}\t{float(weights.weights[d])!r}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
