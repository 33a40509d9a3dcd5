"""Independent numerical oracles shared by the test modules."""
import itertools

import numpy as np

FD_STEP = 1e-5


def central_diff(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


def brute_force_assignment(C: np.ndarray) -> float:
    """Smallest total cost over all injective row-to-column maps."""
    m, n = C.shape
    rows = range(m)
    return min(sum(C[i, p[i]] for i in rows) for p in itertools.permutations(range(n), m))


def brute_force_emd(C: np.ndarray) -> float:
    """Exact transport cost for square C with unit marginals: best permutation (Birkhoff)."""
    return brute_force_assignment(C)


def plain_sinkhorn(C: np.ndarray, a: np.ndarray, b: np.ndarray, tau: float, iters: int = 20000) -> np.ndarray:
    """Textbook scaling iterations, column update first; for cross-checking only."""
    K = np.exp(-C / tau)
    u = np.ones(len(a))
    for _ in range(iters):
        v = b / (K.T @ u)
        u = a / (K @ v)
    return u[:, None] * K * v[None, :]
