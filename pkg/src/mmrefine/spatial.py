"""Uniform-grid spatial index for radius counting and nearest-neighbour queries.

Points are hashed into cubic cells of side ``cell``.  A query scans its own
cell and the 26 adjacent ones, so radius queries are exact for any radius up
to ``cell`` and a nearest neighbour found at distance ``<= cell`` is exact.
"""

from __future__ import annotations

import numpy as np

BRUTE_FORCE_LIMIT = 1000
_OFFSETS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64)


def _as_points(a) -> np.ndarray:
    return np.asarray(a, dtype=float).reshape(-1, 3)


def _sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # one fixed summation order keeps grid and brute-force results bit-identical
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


class GridIndex:
    def __init__(self, points, cell: float):
        if not cell > 0:
            raise ValueError(f"cell size must be positive, got {cell}")
        self.points = _as_points(points)
        self.cell = float(cell)
        self.origin = self.points.min(axis=0) if len(self.points) else np.zeros(3)
        ijk = self._cells(self.points)
        # pad by one cell on each side so neighbour keys never wrap
        self.dims = (ijk.max(axis=0) + 3) if len(ijk) else np.ones(3, dtype=np.int64)
        keys = self._key(ijk)
        self.order = np.argsort(keys, kind="stable")
        self.sorted_keys = keys[self.order]

    def _cells(self, pts: np.ndarray) -> np.ndarray:
        return np.floor((pts - self.origin) / self.cell).astype(np.int64) + 1

    def _key(self, ijk: np.ndarray) -> np.ndarray:
        return (ijk[:, 0] * self.dims[1] + ijk[:, 1]) * self.dims[2] + ijk[:, 2]

    def _candidates(self, queries: np.ndarray):
        """Yield ``(query_idx, point_idx)`` candidate pairs from the 27 surrounding cells."""
        ijk = self._cells(queries)
        for off in _OFFSETS:
            nb = ijk + off
            inside = np.all((nb >= 0) & (nb < self.dims), axis=1)
            q = np.nonzero(inside)[0]
            if not len(q):
                continue
            key = self._key(nb[q])
            lo = np.searchsorted(self.sorted_keys, key, side="left")
            hi = np.searchsorted(self.sorted_keys, key, side="right")
            cnt = hi - lo
            q, lo, cnt = q[cnt > 0], lo[cnt > 0], cnt[cnt > 0]
            if not len(q):
                continue
            qi = np.repeat(q, cnt)
            starts = np.repeat(lo - np.cumsum(cnt) + cnt, cnt)
            pos = np.arange(len(qi)) + starts
            yield qi, self.order[pos]

    def count_within(self, queries, radius: float) -> np.ndarray:
        """Number of indexed points with distance ``<= radius`` from each query."""
        if radius > self.cell * (1 + 1e-12):
            raise ValueError(f"radius {radius} exceeds the cell size {self.cell}")
        queries = _as_points(queries)
        counts = np.zeros(len(queries), dtype=np.int64)
        if not len(self.points):
            return counts
        r2 = radius * radius
        for qi, pi in self._candidates(queries):
            hit = _sq_dist(queries[qi], self.points[pi]) <= r2
            counts += np.bincount(qi[hit], minlength=len(queries))
        return counts

    def nearest_distance(self, queries) -> np.ndarray:
        """Exact nearest-neighbour distance for each query."""
        queries = _as_points(queries)
        best = np.full(len(queries), np.inf)
        for qi, pi in self._candidates(queries):
            np.minimum.at(best, qi, _sq_dist(queries[qi], self.points[pi]))
        best = np.sqrt(best)
        far = best > self.cell
        if np.any(far):
            best[far] = brute_force_nearest(queries[far], self.points)
        return best


def brute_force_nearest(queries, points, chunk: int = 2048) -> np.ndarray:
    queries = _as_points(queries)
    points = _as_points(points)
    out = np.empty(len(queries))
    for s in range(0, len(queries), chunk):
        q = queries[s : s + chunk]
        d2 = _sq_dist(q[:, None, :], points[None, :, :])
        out[s : s + chunk] = np.sqrt(d2.min(axis=1))
    return out


def default_cell(points) -> float:
    """Cell side giving on the order of a few points per occupied cell."""
    pts = _as_points(points)
    ext = np.ptp(pts, axis=0) if len(pts) else np.ones(3)
    ext = np.maximum(ext, 1e-3 * max(ext.max(), 1e-9))
    return float(max((np.prod(ext) * 4.0 / max(len(pts), 1)) ** (1 / 3), 1e-6))


def nearest_distances(queries, points, method: str = "auto") -> np.ndarray:
    """Distance from each query to its nearest point; grid above 1000 points unless forced."""
    points = _as_points(points)
    if method == "brute" or (method == "auto" and len(points) <= BRUTE_FORCE_LIMIT):
        return brute_force_nearest(queries, points)
    return GridIndex(points, default_cell(points)).nearest_distance(queries)
