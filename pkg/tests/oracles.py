"""Independent reference computations used by the tests.

Nothing here imports the package's solvers: each oracle recomputes its
quantity from first principles so a shared bug cannot hide.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

FD_STEP = 1e-5


def central_differences(f, arrays: list[np.ndarray], h: float = FD_STEP) -> list[np.ndarray]:
    """Gradient of scalar ``f()`` w.r.t. each array, perturbing entries in place."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            fp = f()
            a[idx] = old - h
            fm = f()
            a[idx] = old
            g[idx] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    a = np.concatenate([x.ravel() for x in analytic])
    n = np.concatenate([x.ravel() for x in numeric])
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def ot_by_permutations(cost: np.ndarray) -> float:
    """Exact OT between uniform marginals of equal size: best permutation."""
    n = cost.shape[0]
    return min(cost[np.arange(n), list(p)].mean() for p in itertools.permutations(range(n)))


def ot_uniform_exact(cost: np.ndarray) -> float:
    """Exact OT between uniform marginals of any sizes.

    Both sides are expanded to ``lcm(n, m)`` equal-mass atoms; the uniform
    assignment problem then has permutation vertices. Permutations are
    enumerated when small; larger cases use the Hungarian algorithm.
    """
    n, m = cost.shape
    L = n * m // math.gcd(n, m)
    big = np.repeat(np.repeat(cost, L // n, axis=0), L // m, axis=1)
    if L <= 8:
        return ot_by_permutations(big)
    r, c = linear_sum_assignment(big)
    return float(big[r, c].mean())


def ot_linprog(cost: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Exact OT with arbitrary marginals as a linear program."""
    n, m = cost.shape
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    res = linprog(cost.ravel(), A_eq=A_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    assert res.success
    return float(res.fun)


def hellinger_sq_loop(p, q) -> float:
    return 2.0 * sum((math.sqrt(a) - math.sqrt(b)) ** 2 for a, b in zip(p, q))


def softmax_loop(row) -> list[float]:
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]
