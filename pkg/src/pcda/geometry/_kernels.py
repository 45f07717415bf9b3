"""Hot loops for point-cloud geometry: farthest-point sampling and the auction
assignment solver.

Each kernel has a numba implementation and a vectorised numpy implementation.
The dispatchers at the bottom pick one according to
:func:`pcda._accel.numba_enabled`. FPS is bit-identical across paths; the
auction paths differ in bidding order (Gauss-Seidel vs Jacobi) and can return
different assignments of equal quality.
"""

import numpy as np

from .._accel import njit, numba_enabled

_NO_OWNER = -1


# --------------------------------------------------------------------------
# farthest point sampling
# --------------------------------------------------------------------------

@njit(cache=True)
def _fps_numba(points, n, start):
    total = points.shape[0]
    out = np.empty(n, dtype=np.int64)
    mind = np.full(total, np.inf)
    cur = start
    for k in range(n):
        out[k] = cur
        cx = points[cur, 0]
        cy = points[cur, 1]
        cz = points[cur, 2]
        best = -1.0
        best_idx = 0
        for i in range(total):
            dx = points[i, 0] - cx
            dy = points[i, 1] - cy
            dz = points[i, 2] - cz
            d = dx * dx + dy * dy + dz * dz
            if d < mind[i]:
                mind[i] = d
            if mind[i] > best:
                best = mind[i]
                best_idx = i
        cur = best_idx
    return out


def _fps_numpy(points, n, start):
    total = points.shape[0]
    out = np.empty(n, dtype=np.int64)
    mind = np.full(total, np.inf)
    cur = start
    for k in range(n):
        out[k] = cur
        diff = points - points[cur]
        # same association order as the numba loop so both paths agree bitwise
        d = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        np.minimum(mind, d, out=mind)
        cur = int(np.argmax(mind))
    return out


# --------------------------------------------------------------------------
# auction algorithm (minimisation, epsilon scaling)
# --------------------------------------------------------------------------

@njit(cache=True)
def _auction_numba(cost, eps, scale):
    n = cost.shape[0]
    prices = np.zeros(n)
    person_to_obj = np.full(n, _NO_OWNER, dtype=np.int64)
    if n == 1:
        person_to_obj[0] = 0
        return person_to_obj
    obj_to_person = np.full(n, _NO_OWNER, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)

    cur_eps = cost.max() / 4.0
    if cur_eps < eps:
        cur_eps = eps
    while True:
        for i in range(n):
            person_to_obj[i] = _NO_OWNER
            obj_to_person[i] = _NO_OWNER
            queue[i] = n - 1 - i
        top = n
        while top > 0:
            top -= 1
            i = queue[top]
            best = -np.inf
            second = -np.inf
            best_j = 0
            for j in range(n):
                v = -cost[i, j] - prices[j]
                if v > best:
                    second = best
                    best = v
                    best_j = j
                elif v > second:
                    second = v
            prices[best_j] += best - second + cur_eps
            prev = obj_to_person[best_j]
            obj_to_person[best_j] = i
            person_to_obj[i] = best_j
            if prev != _NO_OWNER:
                person_to_obj[prev] = _NO_OWNER
                queue[top] = prev
                top += 1
        if cur_eps <= eps:
            break
        cur_eps = cur_eps / scale
        if cur_eps < eps:
            cur_eps = eps
    return person_to_obj


def _auction_numpy(cost, eps, scale):
    n = cost.shape[0]
    person_to_obj = np.full(n, _NO_OWNER, dtype=np.int64)
    if n == 1:
        person_to_obj[0] = 0
        return person_to_obj
    prices = np.zeros(n)
    obj_to_person = np.full(n, _NO_OWNER, dtype=np.int64)
    cur_eps = max(cost.max() / 4.0, eps)
    while True:
        person_to_obj[:] = _NO_OWNER
        obj_to_person[:] = _NO_OWNER
        free = np.arange(n)
        while free.size:
            values = -cost[free] - prices
            top2 = np.argpartition(-values, 1, axis=1)[:, :2]
            rows = np.arange(free.size)
            v0 = values[rows, top2[:, 0]]
            v1 = values[rows, top2[:, 1]]
            best_j = np.where(v0 >= v1, top2[:, 0], top2[:, 1])
            gap = np.abs(v0 - v1)
            bids = prices[best_j] + gap + cur_eps
            # highest bid wins each object; ties go to the lowest person index
            order = np.lexsort((free, -bids, best_j))
            first = np.ones(order.size, dtype=bool)
            first[1:] = best_j[order][1:] != best_j[order][:-1]
            winners = order[first]
            objs = best_j[winners]
            prev = obj_to_person[objs]
            evicted = prev[prev != _NO_OWNER]
            person_to_obj[evicted] = _NO_OWNER
            prices[objs] = bids[winners]
            obj_to_person[objs] = free[winners]
            person_to_obj[free[winners]] = objs
            free = np.sort(np.concatenate([free[~np.isin(np.arange(free.size), winners)], evicted]))
        if cur_eps <= eps:
            break
        cur_eps = max(cur_eps / scale, eps)
    return person_to_obj


@njit(cache=True)
def _batch_auction_numba(a, b, eps, scale):
    batch, n = a.shape[0], a.shape[1]
    out = np.empty((batch, n), dtype=np.int64)
    cost = np.empty((n, n))
    for k in range(batch):
        for i in range(n):
            for j in range(n):
                dx = a[k, i, 0] - b[k, j, 0]
                dy = a[k, i, 1] - b[k, j, 1]
                dz = a[k, i, 2] - b[k, j, 2]
                cost[i, j] = np.sqrt(dx * dx + dy * dy + dz * dz)
        out[k] = _auction_numba(cost, eps, scale)
    return out


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def fps_indices(points: np.ndarray, n: int, start: int) -> np.ndarray:
    points = np.ascontiguousarray(points, dtype=np.float64)
    if numba_enabled():
        return _fps_numba(points, n, start)
    return _fps_numpy(points, n, start)


def auction_assign(cost: np.ndarray, eps: float, scale: float = 5.0) -> np.ndarray:
    """Return ``mapping`` with ``mapping[i]`` the column assigned to row ``i``.

    The result is within ``n * eps`` of the optimal total cost.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if numba_enabled():
        return _auction_numba(cost, float(eps), float(scale))
    return _auction_numpy(cost, float(eps), float(scale))


def batch_auction_assign(a: np.ndarray, b: np.ndarray, eps: float, scale: float = 5.0) -> np.ndarray:
    """Auction mappings for a batch of (B, N, 3) cloud pairs."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if numba_enabled():
        return _batch_auction_numba(a, b, float(eps), float(scale))
    out = np.empty(a.shape[:2], dtype=np.int64)
    for k in range(a.shape[0]):
        diff = a[k][:, None, :] - b[k][None, :, :]
        out[k] = _auction_numpy(np.sqrt((diff * diff).sum(-1)), float(eps), float(scale))
    return out
