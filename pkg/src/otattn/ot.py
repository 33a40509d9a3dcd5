"""Optimal transport kernels.

Entropic transport (Sinkhorn, plain or log domain, with warm starts),
exact transport via the transportation simplex, entropy measures, linear
assignment, and the pairwise cost functions used by the attention variants.

All matrix arguments may carry leading batch axes: a cost of shape
``(..., m, n)`` with marginals ``(..., m)`` and ``(..., n)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

#: largest spread of the shifted cost (in units of tau) handled in the plain domain
PLAIN_DOMAIN_RANGE = 50.0
LOG_DOMAIN_BELOW_TAU = 0.05


class SinkhornError(FloatingPointError):
    pass


class MarginalError(ValueError):
    pass


@dataclass(frozen=True)
class SinkhornConfig:
    """Sinkhorn settings.

    ``tol`` bounds the maximum absolute column-marginal violation (rows are
    exact after every sweep).  ``tol=0`` runs exactly ``max_iterations``
    sweeps.  ``log_domain=None`` picks the domain automatically.
    """

    temperature: float = 1.0
    max_iterations: int = 1000
    tol: float = 1e-6
    log_domain: Optional[bool] = None

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be nonnegative")


@dataclass
class Marginals:
    a: Tensor
    b: Tensor

    def __post_init__(self):
        self.a = ad.as_tensor(self.a)
        self.b = ad.as_tensor(self.b)
        if (self.a.data < 0).any() or (self.b.data < 0).any():
            raise MarginalError("marginals must be nonnegative")
        sa = self.a.data.sum(axis=-1)
        sb = self.b.data.sum(axis=-1)
        if np.any(np.abs(sa - sb) > 1e-9 * np.maximum(sa, 1.0)):
            raise MarginalError(f"marginal mass mismatch: sum(a)={sa} sum(b)={sb}")

    @classmethod
    def unit(cls, m: int, n: int, batch: tuple = ()) -> "Marginals":
        """Unit row mass; columns share the same total equally."""
        return cls(np.ones(batch + (m,)), np.full(batch + (n,), m / n))

    @property
    def shape(self) -> tuple:
        return self.a.shape[-1], self.b.shape[-1]


@dataclass
class TransportPlan:
    values: Tensor
    converged: bool = True
    iterations: int = 0

    @property
    def data(self) -> np.ndarray:
        return self.values.data


@dataclass
class ScalingVectors:
    """Collected row/column normalizers, stored as logarithms when ``log_domain``."""

    u: np.ndarray
    v: np.ndarray
    log_domain: bool = False
    # tape-linked log u, set when the solve was differentiable; lets a warm
    # start stay differentiable with respect to the previous cost
    log_u_linked: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def detached(self) -> "ScalingVectors":
        return ScalingVectors(self.u, self.v, self.log_domain)

    def as_log(self) -> tuple[np.ndarray, np.ndarray]:
        if self.log_domain:
            return self.u, self.v
        with np.errstate(divide="ignore"):
            return np.log(self.u), np.log(self.v)

    def as_plain(self) -> tuple[np.ndarray, np.ndarray]:
        if self.log_domain:
            return np.exp(self.u), np.exp(self.v)
        return self.u, self.v

    def apply(self, C, temperature: float) -> np.ndarray:
        """Rebuild the plan ``diag(u) exp(-C/tau) diag(v)`` from these vectors."""
        C = np.asarray(C.data if isinstance(C, Tensor) else C, dtype=np.float64)
        if self.log_domain:
            return np.exp(self.u[..., :, None] - C / temperature + self.v[..., None, :])
        return self.u[..., :, None] * np.exp(-C / temperature) * self.v[..., None, :]


def _check_dims(C: Tensor, marg: Marginals):
    m, n = C.shape[-2:]
    if marg.a.shape[-1] != m or marg.b.shape[-1] != n:
        raise ValueError(f"marginals {marg.shape} do not match cost {C.shape}")


def _shifts(C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row then column minima; ``C - r - s`` is nonnegative with a zero in every row and column."""
    r = C.min(axis=-1)
    s = (C - r[..., :, None]).min(axis=-2)
    return r, s


def use_log_domain(C, cfg: SinkhornConfig) -> bool:
    """Log domain below ``tau = 0.05`` or when the shifted kernel spans too many orders."""
    if cfg.log_domain is not None:
        return cfg.log_domain
    if cfg.temperature < LOG_DOMAIN_BELOW_TAU:
        return True
    data = np.asarray(C.data if isinstance(C, Tensor) else C, dtype=np.float64)
    r, s = _shifts(data)
    spread = (data - r[..., :, None] - s[..., None, :]).max()
    return spread / cfg.temperature > PLAIN_DOMAIN_RANGE


def _col_violation(P_colsum: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(P_colsum - b)))


def _log_of(x: Tensor) -> Tensor:
    if x.tape is not None:
        return ad.log(x)
    with np.errstate(divide="ignore"):
        return Tensor(np.log(x.data))


def sinkhorn(C, marg: Marginals | None = None, cfg: SinkhornConfig | None = None,
             warm: ScalingVectors | None = None) -> tuple[TransportPlan, ScalingVectors]:
    """Entropic transport plan ``diag(u) exp(-C/tau) diag(v)``.

    Each sweep first rescales columns to ``b`` then rows to ``a``, so a single
    sweep with unit row mass is exactly slot attention's
    softmax-over-slots-then-normalize.  Differentiable through the unrolled
    sweeps when ``C`` or the marginals are tape-linked.
    """
    C = ad.as_tensor(C)
    cfg = cfg or SinkhornConfig()
    m, n = C.shape[-2:]
    batch = C.shape[:-2]
    if marg is None:
        marg = Marginals.unit(m, n, batch)
    _check_dims(C, marg)
    if not np.all(np.isfinite(C.data)):
        raise ValueError("cost matrix has non-finite entries")
    if warm is not None and (warm.u.shape[-1] != m or warm.v.shape[-1] != n):
        raise ValueError("warm-start vectors do not match the cost shape")
    if use_log_domain(C, cfg):
        return _sinkhorn_log(C, marg, cfg, warm)
    return _sinkhorn_plain(C, marg, cfg, warm)


def _linked_warm(warm, C: Tensor):
    """The warm start's tape-linked log u when it lives on ``C``'s tape."""
    if warm is None or warm.log_u_linked is None or C.tape is None:
        return None
    if warm.log_u_linked.tape is not C.tape or warm.log_u_linked.shape != C.shape[:-1]:
        return None
    return warm.log_u_linked


def _sinkhorn_plain(C, marg, cfg, warm):
    tau = cfg.temperature
    # row/column constants do not change the plan; they are folded back into u, v
    r, s = _shifts(C.data)
    K = ad.exp((C - Tensor(r[..., :, None]) - Tensor(s[..., None, :])) * (-1.0 / tau))
    a, b = marg.a, marg.b
    # start from the unshifted u (ones when cold), expressed in shifted coordinates
    linked = _linked_warm(warm, C)
    if linked is not None:
        log_u = linked - Tensor(r / tau)
        u = ad.exp(ad.maximum(log_u - Tensor(log_u.data.max(axis=-1, keepdims=True)), -700.0))
    else:
        log_u = -r / tau
        if warm is not None:
            log_u = np.broadcast_to(warm.as_log()[0], C.shape[:-1]) + log_u
        u = Tensor(np.exp(np.clip(log_u - log_u.max(axis=-1, keepdims=True), -700, 0)))
    row_shape, col_shape = C.shape[:-1], C.shape[:-2] + C.shape[-1:]
    converged = False
    it = 0
    try:
        for it in range(1, cfg.max_iterations + 1):
            v = b / ad.reshape(ad.matmul(ad.expand_dims(u, -2), K), col_shape)
            u = a / ad.reshape(ad.matmul(K, ad.expand_dims(v, -1)), row_shape)
            if cfg.tol > 0:
                colsum = v.data * np.matmul(u.data[..., None, :], K.data)[..., 0, :]
                if _col_violation(colsum, b.data) <= cfg.tol:
                    converged = True
                    break
    except ad.DomainError as exc:
        raise SinkhornError(
            f"sinkhorn underflow at iteration {it} (tau={tau}); use the log domain") from exc
    P = ad.expand_dims(u, -1) * K * ad.expand_dims(v, -2)
    if not (np.all(np.isfinite(P.data)) and np.all(np.isfinite(u.data)) and np.all(np.isfinite(v.data))):
        raise SinkhornError(f"non-finite intermediate in plain-domain sinkhorn (tau={tau})")
    if not converged:
        converged = _col_violation(P.data.sum(axis=-2), b.data) <= (cfg.tol if cfg.tol > 0 else 1e-6)
    with np.errstate(divide="ignore"):
        sv = ScalingVectors(np.log(u.data) + r / tau, np.log(v.data) + s / tau, True)
    if u.tape is not None and np.all(u.data > 0):
        sv.log_u_linked = ad.log(u) + Tensor(r / tau)
    return TransportPlan(P, converged, it), sv


def _sinkhorn_log(C, marg, cfg, warm):
    tau = cfg.temperature
    M = C * (-1.0 / tau)
    log_a, log_b = _log_of(marg.a), _log_of(marg.b)
    linked = _linked_warm(warm, C)
    if linked is not None:
        f = linked
    elif warm is not None:
        f = Tensor(np.broadcast_to(warm.as_log()[0], C.shape[:-1]).copy())
    else:
        f = Tensor(np.zeros(C.shape[:-1]))
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        g = log_b - ad.logsumexp(M + ad.expand_dims(f, -1), axis=-2)
        f = log_a - ad.logsumexp(M + ad.expand_dims(g, -2), axis=-1)
        if cfg.tol > 0:
            colsum = np.exp(f.data[..., :, None] + M.data + g.data[..., None, :]).sum(axis=-2)
            if _col_violation(colsum, marg.b.data) <= cfg.tol:
                converged = True
                break
    P = ad.exp(M + ad.expand_dims(f, -1) + ad.expand_dims(g, -2))
    if not np.all(np.isfinite(P.data)):
        raise SinkhornError(f"non-finite intermediate in log-domain sinkhorn (tau={tau})")
    if not converged:
        converged = _col_violation(P.data.sum(axis=-2), marg.b.data) <= (cfg.tol if cfg.tol > 0 else 1e-6)
    sv = ScalingVectors(f.data.copy(), g.data.copy(), True)
    if f.tape is not None:
        sv.log_u_linked = f
    return TransportPlan(P, converged, it), sv


# ---------------------------------------------------------------------------
# entropy
# ---------------------------------------------------------------------------

def _values(P) -> Tensor:
    return P.values if isinstance(P, TransportPlan) else ad.as_tensor(P)


def entropy(P) -> Tensor:
    """``-sum P log P`` over the last two axes (``0 log 0 = 0``)."""
    return ad.neg(ad.reduce_sum(ad.xlogx(_values(P)), axis=(-2, -1)))


def normalized_entropy(P, marg: Marginals | None = None) -> np.ndarray | float:
    """Entropy divided by ``m log n``: 0 for a permutation, 1 for uniform rows.

    Only defined for the unit-row-mass convention.
    """
    vals = _values(P).data
    m, n = vals.shape[-2:]
    if marg is not None and not np.allclose(marg.a.data, 1.0, rtol=0, atol=1e-12):
        raise MarginalError("normalized_entropy requires all-ones row marginals")
    if n < 2:
        raise ValueError("normalized entropy needs at least two columns")
    h = entropy(Tensor(vals)).data / (m * np.log(n))
    return float(h) if np.ndim(h) == 0 else h


# ---------------------------------------------------------------------------
# exact transport
# ---------------------------------------------------------------------------

def _tree_path(basis: set, m: int, n: int, start_row: int, end_col: int) -> list:
    """Cells on the basis-tree path from row ``start_row`` to column ``end_col``."""
    adj_rows = [[] for _ in range(m)]
    adj_cols = [[] for _ in range(n)]
    for (i, j) in sorted(basis):
        adj_rows[i].append(j)
        adj_cols[j].append(i)
    # nodes: rows 0..m-1, cols m..m+n-1
    parent = {start_row: None}
    queue = [start_row]
    target = m + end_col
    head = 0
    while head < len(queue):
        node = queue[head]
        head += 1
        if node == target:
            break
        if node < m:
            nbrs = [m + j for j in adj_rows[node]]
        else:
            nbrs = adj_cols[node - m]
        for nb in nbrs:
            if nb not in parent:
                parent[nb] = node
                queue.append(nb)
    cells = []
    node = target
    while parent[node] is not None:
        prev = parent[node]
        cells.append((prev, node - m) if prev < m else (node, prev - m))
        node = prev
    cells.reverse()
    return cells


def _potentials(C: np.ndarray, basis: set, m: int, n: int):
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    u[0] = 0.0
    rows_of = [[] for _ in range(n)]
    cols_of = [[] for _ in range(m)]
    for (i, j) in basis:
        cols_of[i].append(j)
        rows_of[j].append(i)
    stack = [("r", 0)]
    while stack:
        kind, k = stack.pop()
        if kind == "r":
            for j in cols_of[k]:
                if np.isnan(v[j]):
                    v[j] = C[k, j] - u[k]
                    stack.append(("c", j))
        else:
            for i in rows_of[k]:
                if np.isnan(u[i]):
                    u[i] = C[i, k] - v[k]
                    stack.append(("r", i))
    return u, v


def _transportation_simplex(C: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, n = C.shape
    X = np.zeros((m, n))
    basis = set()
    ra, rb = a.astype(np.float64).copy(), b.astype(np.float64).copy()
    i = j = 0
    # northwest corner start; degenerate steps keep m + n - 1 basic cells
    while True:
        q = min(ra[i], rb[j])
        X[i, j] = q
        basis.add((i, j))
        ra[i] -= q
        rb[j] -= q
        if i == m - 1 and j == n - 1:
            break
        if j == n - 1 or (i < m - 1 and ra[i] <= rb[j]):
            i += 1
        else:
            j += 1
    scale = max(1.0, float(np.abs(C).max()))
    cost_eps = 1e-12 * scale
    mass_eps = 1e-13 * max(1.0, float(a.sum()))
    max_pivots = 50 * m * n + 100
    for _ in range(max_pivots):
        u, v = _potentials(C, basis, m, n)
        R = C - u[:, None] - v[None, :]
        cand = np.argwhere(R < -cost_eps)
        enter = None
        for (ci, cj) in cand:  # Bland: lowest row-major index
            if (ci, cj) not in basis:
                enter = (int(ci), int(cj))
                break
        if enter is None:
            break
        path = _tree_path(basis, m, n, enter[0], enter[1])
        minus = path[0::2]
        plus = path[1::2]
        theta = min(X[c] for c in minus)
        leave = min(c for c in minus if X[c] <= theta + mass_eps)
        for c in minus:
            X[c] -= theta
        for c in plus:
            X[c] += theta
        X[enter] += theta
        X[leave] = 0.0
        basis.discard(leave)
        basis.add(enter)
    else:
        raise RuntimeError("transportation simplex did not terminate")
    X[X < 0] = 0.0
    return X


def emd_exact(C, marg: Marginals | None = None) -> TransportPlan:
    """Exact (unregularized) transport plan, a vertex of the transportation polytope.

    Solved with the transportation simplex under Bland's rule, so ties are
    broken deterministically by input order.  The result is never
    tape-linked.
    """
    Cd = np.asarray(C.data if isinstance(C, Tensor) else C, dtype=np.float64)
    m, n = Cd.shape[-2:]
    batch = Cd.shape[:-2]
    if marg is None:
        marg = Marginals.unit(m, n, batch)
    _check_dims(ad.as_tensor(Cd), marg)
    if not np.all(np.isfinite(Cd)):
        raise ValueError("cost matrix has non-finite entries")
    a = np.broadcast_to(marg.a.data, batch + (m,))
    b = np.broadcast_to(marg.b.data, batch + (n,))
    if np.any(a.sum(axis=-1) <= 0):
        raise MarginalError("zero-mass marginals")
    out = np.empty(Cd.shape)
    for idx in np.ndindex(*batch):
        out[idx] = _transportation_simplex(Cd[idx], a[idx], b[idx])
    return TransportPlan(Tensor(out), True, 0)


def emd_with_sinkhorn_surrogate(C, marg: Marginals | None = None,
                                cfg: SinkhornConfig | None = None) -> TransportPlan:
    """``emd(C) + sinkhorn(C)``: exact plan forward, Sinkhorn gradient backward."""
    C = ad.as_tensor(C)
    exact = emd_exact(ad.detach(C), marg)
    sh, _ = sinkhorn(C, marg, cfg)
    return TransportPlan(exact.values + sh.values, sh.converged, sh.iterations)


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------

def hungarian(C) -> np.ndarray:
    """Minimum-cost injective assignment of rows to columns (``m <= n``).

    Shortest augmenting paths with dual potentials, O(m^2 n).  Ties go to the
    lowest column index.  Returns the column chosen for each row.
    """
    C = np.asarray(C.data if isinstance(C, Tensor) else C, dtype=np.float64)
    m, n = C.shape
    if m > n:
        raise ValueError(f"hungarian needs rows <= columns, got {m}x{n}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    # plain lists: these matrices are tiny and numpy call overhead dominates
    cost = C.tolist()
    inf = float("inf")
    u = [0.0] * (m + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)  # p[j]: 1-based row matched to column j
    way = [0] * (n + 1)
    for i in range(1, m + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = cost[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assignment = np.empty(m, dtype=np.int64)
    for j in range(1, n + 1):
        if p[j]:
            assignment[p[j] - 1] = j - 1
    return assignment


def assignment_cost(C, assignment) -> float:
    C = np.asarray(C)
    return float(C[np.arange(len(assignment)), assignment].sum())


# ---------------------------------------------------------------------------
# costs
# ---------------------------------------------------------------------------

METRICS = ("neg_dot", "l2", "cosine")


def distance_costs(Q, K, metric: str = "l2") -> Tensor:
    """Pairwise costs between rows of ``Q`` (..., m, d) and ``K`` (..., n, d).

    ``l2`` is half the squared Euclidean distance, which differs from
    ``neg_dot`` only by per-row and per-column constants.
    """
    Q = ad.as_tensor(Q)
    K = ad.as_tensor(K)
    if Q.shape[-1] != K.shape[-1]:
        raise ValueError(f"feature dims differ: {Q.shape[-1]} vs {K.shape[-1]}")
    dots = ad.matmul(Q, ad.transpose(K))
    if metric == "neg_dot":
        return ad.neg(dots)
    if metric == "l2":
        qq = ad.reduce_sum(Q * Q, axis=-1, keepdims=True)
        kk = ad.transpose(ad.reduce_sum(K * K, axis=-1, keepdims=True))
        return (qq + kk) * 0.5 - dots
    if metric == "cosine":
        qn = ad.reduce_sum(Q * Q, axis=-1, keepdims=True)
        kn = ad.reduce_sum(K * K, axis=-1, keepdims=True)
        if (qn.data == 0).any() or (kn.data == 0).any():
            raise ValueError("cosine distance undefined for zero-norm rows")
        denom = ad.sqrt(qn) * ad.transpose(ad.sqrt(kn))
        return 1.0 - dots / denom
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
