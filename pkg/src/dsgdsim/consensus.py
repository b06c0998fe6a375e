"""Time-varying Metropolis consensus matrices, their ordered products, and
mixing diagnostics.

A consensus matrix mixes worker parameters within one gossip group. Built
with the Metropolis rule it is symmetric and doubly stochastic, so products
of such matrices converge geometrically to the uniform matrix (all entries
1/N); ``mixing_deviation_bound`` evaluates the standard bound for that
convergence in terms of the smallest positive entry beta and the
connectivity window B.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConsensusMatrix",
    "MatrixProduct",
    "metropolis_matrix",
    "verify_doubly_stochastic",
    "phi_product",
    "phi_uniform_deviation",
    "mixing_deviation_bound",
    "extract_beta",
    "matrix_to_csv",
]

Edge = tuple[int, int]

# Products accumulate rounding, so they get a looser tolerance than the
# freshly built matrices (1e-12).
MATRIX_TOL = 1e-12
PRODUCT_TOL = 1e-10


@dataclass(frozen=True)
class ConsensusMatrix:
    """Dense mixing matrix with the active-edge support it was built from."""

    n: int
    entries: np.ndarray
    support: frozenset[Edge]

    def __post_init__(self):
        if self.entries.shape != (self.n, self.n):
            raise ValueError(f"entries must be {self.n}x{self.n}, got {self.entries.shape}")


@dataclass(frozen=True)
class MatrixProduct:
    """Ordered product of consensus matrices over the iteration span (s, k)."""

    n: int
    entries: np.ndarray
    span: tuple[int, int]


def metropolis_matrix(n: int, group_edges, wait_counts: dict[int, int]) -> ConsensusMatrix:
    """Build the Metropolis mixing matrix for one gossip group.

    For an active edge {i, j} the off-diagonal weight is
    1 / (1 + max(wait_counts[i], wait_counts[j])); each diagonal entry absorbs
    the remainder of its row. Workers untouched by ``group_edges`` keep their
    own value (diagonal 1).

    wait_counts[i] is the number of active neighbors worker i waits for and
    must be at least i's degree within ``group_edges``.
    """
    edges = frozenset((i, j) if i < j else (j, i) for i, j in group_edges)
    degree = {v: 0 for e in edges for v in e}
    for i, j in edges:
        if i == j:
            raise ValueError(f"self loop ({i},{j}) in group edges")
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"edge ({i},{j}) out of range for n={n}")
        degree[i] += 1
        degree[j] += 1
    for v, d in degree.items():
        if v not in wait_counts:
            raise ValueError(f"missing wait count for worker {v}")
        if wait_counts[v] < d:
            raise ValueError(
                f"wait count {wait_counts[v]} for worker {v} is below its group degree {d}"
            )
    p = np.zeros((n, n))
    for i, j in edges:
        w = 1.0 / (1.0 + max(wait_counts[i], wait_counts[j]))
        p[i, j] = w
        p[j, i] = w
    for i in range(n):
        off = p[i].sum()
        diag = 1.0 - off
        if diag < 0.0:
            raise ValueError(f"negative diagonal {diag} at worker {i}: inconsistent wait counts")
        p[i, i] = diag
    return ConsensusMatrix(n=n, entries=p, support=edges)


def _as_array(m) -> np.ndarray:
    return np.asarray(getattr(m, "entries", m), dtype=float)


def verify_doubly_stochastic(m, tol: float) -> bool:
    """True iff all row/column sums are within tol of 1 and entries >= -tol."""
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    a = _as_array(m)
    if np.min(a) < -tol:
        return False
    rows = np.abs(a.sum(axis=1) - 1.0)
    cols = np.abs(a.sum(axis=0) - 1.0)
    return bool(max(rows.max(), cols.max()) <= tol)


def phi_product(matrices, start: int = 1) -> MatrixProduct:
    """Left-to-right product of consensus matrices P(s) P(s+1) ... P(k)."""
    mats = [_as_array(m) for m in matrices]
    if not mats:
        raise ValueError("product of an empty matrix sequence")
    n = mats[0].shape[0]
    acc = mats[0].copy()
    for m in mats[1:]:
        if m.shape[0] != n:
            raise ValueError(f"dimension mismatch: {n} vs {m.shape[0]}")
        acc = acc @ m
    return MatrixProduct(n=n, entries=acc, span=(start, start + len(mats) - 1))


def phi_uniform_deviation(p) -> float:
    """Max elementwise distance of a matrix product from the uniform matrix."""
    a = _as_array(p)
    n = a.shape[0]
    return float(np.max(np.abs(1.0 / n - a)))


def mixing_deviation_bound(beta: float, n: int, b: int, k: int, s: int) -> float:
    """Geometric bound on phi_uniform_deviation for a product over (s, k).

    Evaluates 2 (1 + beta^-(NB)) / (1 - beta^(NB)) * (1 - beta^(NB))^((k-s)/(NB))
    where beta is the smallest positive consensus-matrix entry and every
    window of B consecutive matrices spans a connected graph.
    """
    if not (0.0 < beta < 1.0):
        raise ValueError(f"beta must be in (0,1), got {beta}")
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if b < 1:
        raise ValueError(f"b must be >= 1, got {b}")
    if k < s:
        raise ValueError(f"need k >= s, got k={k}, s={s}")
    nb = n * b
    try:
        beta_nb = beta**nb
        beta_neg = beta ** (-nb)
    except OverflowError as exc:
        raise ValueError(f"beta^(-NB) overflows for beta={beta}, NB={nb}") from exc
    if not np.isfinite(beta_neg):
        raise ValueError(f"beta^(-NB) overflows for beta={beta}, NB={nb}")
    decay = (1.0 - beta_nb) ** ((k - s) / nb)
    return 2.0 * (1.0 + beta_neg) / (1.0 - beta_nb) * decay


def extract_beta(matrices) -> float:
    """Smallest strictly positive entry across all given matrices."""
    best = np.inf
    for m in matrices:
        a = _as_array(m)
        pos = a[a > 0.0]
        if pos.size:
            best = min(best, float(pos.min()))
    if not np.isfinite(best):
        raise ValueError("no strictly positive entry in any matrix")
    return best


def matrix_to_csv(m) -> str:
    """Row-major CSV dump at full float precision (round-trip safe)."""
    a = _as_array(m)
    return "\n".join(",".join(repr(float(x)) for x in row) for row in a) + "\n"
