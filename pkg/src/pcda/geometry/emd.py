"""Earth Mover's Distance between equal-size point sets.

The distance is the *mean* Euclidean length of the matched pairs under the
cheapest bijection. Three solvers are provided:

* :func:`emd_exact` - Hungarian algorithm, for N up to a few hundred.
* :func:`emd_approx` - epsilon-scaling auction, used at training time.
* :func:`emd_oracle` - brute-force enumeration, N <= 8, for verification only.
"""

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from ._kernels import auction_assign, batch_auction_assign
from .cloud import as_points

DEFAULT_EPSILON = 1e-2
ORACLE_MAX_POINTS = 8


@dataclass(frozen=True)
class Assignment:
    """``mapping[i]`` is the index in cloud B paired with point ``i`` of A."""

    mapping: np.ndarray
    cost: float

    def is_bijection(self) -> bool:
        m = np.asarray(self.mapping)
        return m.ndim == 1 and np.array_equal(np.sort(m), np.arange(m.size))


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def matched_cost(a, b, mapping: np.ndarray) -> float:
    a, b = as_points(a), as_points(b)
    d = a - b[mapping]
    return float(np.sqrt((d * d).sum(axis=1)).mean())


def _check_pair(a, b):
    a, b = as_points(a), as_points(b)
    if a.shape != b.shape:
        raise ValueError(f"point counts differ: {a.shape[0]} vs {b.shape[0]}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("point coordinates must be finite")
    return a, b


def emd_exact(a, b) -> Assignment:
    a, b = _check_pair(a, b)
    rows, cols = linear_sum_assignment(pairwise_distances(a, b))
    mapping = np.empty(a.shape[0], dtype=np.int64)
    mapping[rows] = cols
    return Assignment(mapping, matched_cost(a, b, mapping))


def emd_approx(a, b, epsilon: float = DEFAULT_EPSILON) -> Assignment:
    """Auction solution; mean cost is at most ``exact + epsilon``."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    a, b = _check_pair(a, b)
    mapping = auction_assign(pairwise_distances(a, b), epsilon)
    return Assignment(mapping, matched_cost(a, b, mapping))


def emd_oracle(a, b) -> Assignment:
    a, b = _check_pair(a, b)
    n = a.shape[0]
    if n > ORACLE_MAX_POINTS:
        raise ValueError(f"oracle enumerates N! bijections; refusing N={n} > {ORACLE_MAX_POINTS}")
    cost = pairwise_distances(a, b)
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    totals = cost[np.arange(n), perms].sum(axis=1)
    best = perms[int(np.argmin(totals))]
    return Assignment(best, matched_cost(a, b, best))


def emd_gradient(a, b, assignment: Assignment) -> np.ndarray:
    """Gradient of the matched mean distance w.r.t. the points of ``a``.

    The assignment is held fixed; coincident pairs contribute zero.
    """
    a, b = _check_pair(a, b)
    diff = a - b[assignment.mapping]
    norm = np.sqrt((diff * diff).sum(axis=1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, diff / (a.shape[0] * safe), 0.0)


def batch_mappings(a: np.ndarray, b: np.ndarray, method: str = "approx",
                   epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Assignments for a batch of (B, N, 3) pairs, one row of indices per pair."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected matching (B, N, 3) batches, got {a.shape} and {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("point coordinates must be finite")
    if method == "approx":
        if not epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        return batch_auction_assign(a, b, epsilon)
    return np.stack([solve(x, y, method).mapping for x, y in zip(a, b)])


def solve(a, b, method: str = "approx", epsilon: float = DEFAULT_EPSILON) -> Assignment:
    if method == "approx":
        return emd_approx(a, b, epsilon)
    if method == "exact":
        return emd_exact(a, b)
    if method == "oracle":
        return emd_oracle(a, b)
    raise ValueError(f"unknown EMD method {method!r}")
