"""Asymmetric distance computation over precomputed lookup tables.

Given a query, one table per subspace holds the squared distances from
the query sub-vector to every centroid of that subspace's codebook. The
approximate distance from the query to an encoded vector is then the sum
of m table entries, one gather per subspace.
"""

from __future__ import annotations

import heapq

import numpy as np


def row_sq_dists(rows: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance from each row to v, in float32.

    The single distance kernel shared by eager table computation and
    lazy refinement fills: each output element depends only on its own
    row, so filling a table entry lazily produces bit-identical values
    to computing the whole table up front.
    """
    diff = rows - v
    return (diff * diff).sum(axis=1)


def compute_tables(y: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    """Per-subspace distance tables for one query.

    Args:
        y: Query vector of dimension m * dsub (rotation, if any, already
            applied by the caller).
        codebooks: (m, k, dsub) centroid array.

    Returns:
        (m, k) float32 array; entry [j, i] is the squared distance from
        the j-th query sub-vector to centroid i of codebook j.
    """
    m, k, dsub = codebooks.shape
    y = np.asarray(y, dtype=np.float32).reshape(-1)
    if y.size != m * dsub:
        raise ValueError(f"query dimension {y.size} != {m}*{dsub}")
    ysub = y.reshape(m, dsub)
    tables = np.empty((m, k), dtype=np.float32)
    for j in range(m):
        tables[j] = row_sq_dists(codebooks[j], ysub[j])
    return tables


def adc(code, tables: np.ndarray) -> float:
    """Approximate squared distance of one code: sum of m table entries.

    Accumulates in float64 in subspace order; the batch path below and
    the lazy refinement path use the identical order, so all three agree
    bit-for-bit.
    """
    total = 0.0
    for j in range(tables.shape[0]):
        total += float(tables[j, int(code[j])])
    return total


def adc_batch(codes: np.ndarray, tables: np.ndarray) -> np.ndarray:
    """Vectorized adc over an (n, m) code array; float64 (n,) output."""
    n = codes.shape[0]
    acc = np.zeros(n, dtype=np.float64)
    for j in range(tables.shape[0]):
        acc += tables[j, codes[:, j]]
    return acc


def top_r_by_distance(dists: np.ndarray, ids: np.ndarray, r: int):
    """Indices of the r smallest distances, ties broken by lower id.

    Returns (ids, dists) sorted ascending by (distance, id). Exact under
    ties: the selection threshold keeps every tied candidate before the
    final lexicographic sort.
    """
    n = dists.shape[0]
    if r >= n:
        order = np.lexsort((ids, dists))
        return ids[order], dists[order]
    part = np.argpartition(dists, r - 1)[:r]
    dmax = dists[part].max()
    cand = np.flatnonzero(dists <= dmax)
    order = cand[np.lexsort((ids[cand], dists[cand]))][:r]
    return ids[order], dists[order]


class ResultSet:
    """Bounded collector of the r best (distance, id) pairs.

    Backed by a max-heap so a streaming scan can push every candidate in
    O(log r); the stored worst pair is evicted whenever a better one
    arrives. Ordering is by (distance, id), so ties go to the lower id.
    """

    def __init__(self, r: int):
        if r < 1:
            raise ValueError(f"result size must be >= 1, got {r}")
        self.r = r
        self._heap = []  # (-distance, -id): heap root is the worst kept pair

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, vid: int, dist: float) -> None:
        item = (-float(dist), -int(vid))
        if len(self._heap) < self.r:
            heapq.heappush(self._heap, item)
        elif item > self._heap[0]:
            heapq.heapreplace(self._heap, item)

    @classmethod
    def from_arrays(cls, ids: np.ndarray, dists: np.ndarray, r: int) -> "ResultSet":
        """Build directly from candidate arrays (equivalent to pushing all)."""
        rs = cls(r)
        top_ids, top_dists = top_r_by_distance(
            np.asarray(dists, dtype=np.float64), np.asarray(ids), r
        )
        rs._heap = [(-float(d), -int(i)) for d, i in zip(top_dists, top_ids)]
        heapq.heapify(rs._heap)
        return rs

    def items(self):
        """Kept pairs as a list of (distance, id), best first."""
        return [(-d, -i) for d, i in sorted(self._heap, reverse=True)]

    @property
    def ids(self) -> np.ndarray:
        return np.array([i for _, i in self.items()], dtype=np.int64)

    @property
    def distances(self) -> np.ndarray:
        return np.array([d for d, _ in self.items()], dtype=np.float64)

    @property
    def worst(self) -> float:
        return -self._heap[0][0] if self._heap else np.inf


def scan(codes: np.ndarray, tables: np.ndarray, r: int, ids=None) -> ResultSet:
    """Return the r codes with smallest adc distance.

    Args:
        codes: (n, m) code array (one database list).
        tables: (m, k) lookup tables for the query.
        r: Result count; if the list is shorter, everything is returned.
        ids: Optional vector ids; defaults to positions 0..n-1.

    Returns:
        ResultSet ordered by (distance, id).
    """
    codes = np.asarray(codes)
    n = codes.shape[0]
    if n == 0:
        return ResultSet(r)
    if ids is None:
        ids = np.arange(n, dtype=np.int64)
    return ResultSet.from_arrays(ids, adc_batch(codes, tables), r)
