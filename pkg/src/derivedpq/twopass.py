"""Two-pass search over derived codebooks.

First pass: distances from the query to the small derived codebooks are
quantized to 8 bits and every code in the list is scored by masking its
indexes down to their low bits, one byte-table gather per subspace.
Candidates fall into 255 buckets keyed by that quantized score, with a
moving bound that discards anything provably outside the best r2.

Second pass: buckets are walked in ascending score order and candidates
are re-scored with the full codebooks through lazily filled lookup
tables, so only the table entries actually touched are ever computed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .search import ResultSet, adc_batch, compute_tables, row_sq_dists

_SATURATED = 255  # quantized score meaning "beyond qmax"; never bucketed


@dataclass
class QuantizedTables:
    """8-bit quantized small-codebook tables plus their value range.

    Entries for distances within [qmin, qmax] hold
    floor((d - qmin) / (qmax - qmin) * 255) clamped to [0, 254]; entries
    for distances beyond qmax hold 255.
    """

    q: np.ndarray  # (m, kbar) uint8
    qmin: float
    qmax: float
    bbar: int


def _adc_low_float(codes: np.ndarray, small_tables: np.ndarray, bbar: int) -> np.ndarray:
    """Float small-table score of each code: masked gather, float64 sum."""
    mask = (1 << bbar) - 1
    acc = np.zeros(codes.shape[0], dtype=np.float64)
    for j in range(small_tables.shape[0]):
        acc += small_tables[j, codes[:, j] & mask]
    return acc


def quantize_with_bounds(small_tables: np.ndarray, qmin: float, qmax: float, bbar: int) -> QuantizedTables:
    """Quantize small tables against an externally chosen [qmin, qmax]."""
    if qmax <= qmin:
        q = np.zeros(small_tables.shape, dtype=np.uint8)
        return QuantizedTables(q=q, qmin=qmin, qmax=qmin, bbar=bbar)
    scaled = np.floor(
        (small_tables.astype(np.float64) - qmin) * (255.0 / (qmax - qmin))
    )
    q = np.clip(scaled, 0, 254).astype(np.uint8)
    q[small_tables > qmax] = _SATURATED
    return QuantizedTables(q=q, qmin=qmin, qmax=qmax, bbar=bbar)


def quantize_tables(small_tables: np.ndarray, prefix_codes: np.ndarray, r2: int) -> QuantizedTables:
    """Quantize per-query small tables to 8 bits.

    qmin is the smallest entry across all m small tables; qmax is the
    largest small-table score among the first min(r2, len) codes of the
    list, so roughly r2 list entries land below the top bucket.

    Args:
        small_tables: (m, kbar) float32 tables from the derived codebooks.
        prefix_codes: Leading codes of the list to be scanned, at least 1.
        r2: Candidate budget of the upcoming scan.
    """
    prefix_codes = np.asarray(prefix_codes)
    if prefix_codes.shape[0] == 0:
        raise ValueError("need at least one code to estimate qmax")
    kbar = small_tables.shape[1]
    bbar = int(kbar).bit_length() - 1
    if kbar != (1 << bbar):
        raise ValueError(f"small table size {kbar} is not a power of two")
    qmin = float(small_tables.min())
    scores = _adc_low_float(prefix_codes[: min(r2, len(prefix_codes))], small_tables, bbar)
    qmax = float(scores.max())
    return quantize_with_bounds(small_tables, qmin, qmax, bbar)


def adc_low_bits(code, qtables: QuantizedTables, bbar=None) -> int:
    """Quantized score of one code: masked gathers, saturating at 255."""
    bbar = qtables.bbar if bbar is None else bbar
    mask = (1 << bbar) - 1
    q = qtables.q
    total = 0
    for j in range(q.shape[0]):
        total += int(q[j, int(code[j]) & mask])
    return min(total, _SATURATED)


def adc_low_batch(codes: np.ndarray, qtables: QuantizedTables) -> np.ndarray:
    """Vectorized adc_low_bits over an (n, m) code array; uint8 output."""
    mask = (1 << qtables.bbar) - 1
    q = qtables.q
    acc = q[0, codes[:, 0] & mask].astype(np.int32)
    for j in range(1, q.shape[0]):
        acc += q[j, codes[:, j] & mask]
    return np.minimum(acc, _SATURATED).astype(np.uint8)


class CappedBuckets:
    """255 candidate buckets keyed by quantized score, with a discard bound.

    Scores run 0..254; score 255 means "beyond qmax" and is always
    discarded. Once r2 candidates are stored, the bound becomes (bucket
    of the current r2-th smallest score) + 1; later arrivals at or above
    the bound are discarded and stored buckets at or above it are
    evicted. Ties in the boundary bucket are retained, so the kept set
    is always a superset of the true smallest-r2 set.
    """

    def __init__(self, r2: int, capped: bool = True):
        if r2 < 1:
            raise ValueError(f"r2 must be >= 1, got {r2}")
        self.r2 = r2
        self.capped = capped
        self.bound = _SATURATED
        self._buckets = [[] for _ in range(_SATURATED)]
        self._counts = np.zeros(_SATURATED, dtype=np.int64)
        self.count = 0
        self._strict = 0  # stored ids in buckets < bound - 1

    def put(self, score: int, vid: int) -> bool:
        """Insert one candidate; returns False if it was discarded."""
        score = int(score)
        if score >= _SATURATED or (self.capped and score >= self.bound):
            return False
        self._buckets[score].append(vid)
        self._counts[score] += 1
        self.count += 1
        if self.capped:
            if score < self.bound - 1:
                self._strict += 1
            if self._strict >= self.r2:
                self._tighten()
        return True

    def _tighten(self) -> None:
        cum = np.cumsum(self._counts)
        new_bound = int(np.searchsorted(cum, self.r2)) + 1
        for b in range(new_bound, self.bound):
            if self._counts[b]:
                self.count -= int(self._counts[b])
                self._counts[b] = 0
                self._buckets[b] = []
        self.bound = new_bound
        self._strict = int(cum[new_bound - 2]) if new_bound >= 2 else 0

    def bucket_ids(self, b: int) -> np.ndarray:
        return np.asarray(self._buckets[b], dtype=np.int64)

    @property
    def bucket_sizes(self) -> np.ndarray:
        return self._counts.copy()

    def retained_ids(self) -> np.ndarray:
        """All stored ids, ascending bucket order, insertion order within."""
        kept = [b for b in self._buckets if b]
        if not kept:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([np.asarray(b, dtype=np.int64) for b in kept])

    @classmethod
    def from_arrays(cls, scores: np.ndarray, ids: np.ndarray, r2: int, capped: bool = True) -> "CappedBuckets":
        """Bulk-build; final state is identical to streaming every put.

        The streaming bound only ever discards candidates that provably
        cannot enter the final retained set, so the end state depends
        only on the multiset of (score, id) pairs, not on their order.
        """
        cb = cls(r2, capped=capped)
        scores = np.asarray(scores)
        ids = np.asarray(ids)
        counts = np.bincount(scores, minlength=256)[: _SATURATED].astype(np.int64)
        if capped:
            cum = np.cumsum(counts)
            if cum[-1] >= r2:
                cb.bound = int(np.searchsorted(cum, r2)) + 1
        keep = scores < cb.bound
        kept_scores = scores[keep]
        kept_ids = ids[keep]
        order = np.argsort(kept_scores, kind="stable")
        sorted_scores = kept_scores[order]
        sorted_ids = kept_ids[order]
        starts = np.searchsorted(sorted_scores, np.arange(cb.bound))
        ends = np.searchsorted(sorted_scores, np.arange(cb.bound), side="right")
        for b in range(cb.bound):
            if ends[b] > starts[b]:
                cb._buckets[b] = sorted_ids[starts[b] : ends[b]].tolist()
                cb._counts[b] = ends[b] - starts[b]
        cb.count = int(ends[-1]) if cb.bound else 0
        cb._strict = int(ends[cb.bound - 2]) if cb.bound >= 2 else 0
        return cb


def scan_derived(codes: np.ndarray, qtables: QuantizedTables, r2: int, ids=None, capped: bool = True) -> CappedBuckets:
    """Score a code list against quantized tables into capped buckets.

    Returns buckets holding a superset of the r2 codes with smallest
    quantized scores (boundary ties retained); saturated codes are
    dropped.
    """
    codes = np.asarray(codes)
    if ids is None:
        ids = np.arange(codes.shape[0], dtype=np.int64)
    if codes.shape[0] == 0:
        return CappedBuckets(r2, capped=capped)
    scores = adc_low_batch(codes, qtables)
    return CappedBuckets.from_arrays(scores, ids, r2, capped=capped)


class LazyTables:
    """Full-codebook lookup tables filled on demand.

    Entries start at the sentinel -1 (squared distances are never
    negative) and are computed with the same distance kernel as eager
    tables, so a lazily produced value is bit-identical to the eager one.
    n_computed counts distinct entries actually filled.
    """

    def __init__(self, codebooks: np.ndarray, y: np.ndarray):
        m, k, dsub = codebooks.shape
        y = np.asarray(y, dtype=np.float32).reshape(-1)
        if y.size != m * dsub:
            raise ValueError(f"query dimension {y.size} != {m}*{dsub}")
        self._codebooks = codebooks
        self._ysub = y.reshape(m, dsub)
        self.tables = np.full((m, k), -1.0, dtype=np.float32)
        self.n_computed = 0

    @property
    def size(self) -> int:
        return self.tables.size

    def ensure(self, j: int, indexes: np.ndarray) -> None:
        """Fill any still-missing entries of table j among indexes."""
        indexes = np.unique(indexes)
        missing = indexes[self.tables[j, indexes] == -1.0]
        if missing.size:
            self.tables[j, missing] = row_sq_dists(
                self._codebooks[j][missing], self._ysub[j]
            )
            self.n_computed += int(missing.size)


def adc_refine(code, lazy: LazyTables) -> float:
    """Precise score of one code, filling lazy table entries as needed.

    Matches adc over fully precomputed tables bit-for-bit: same per-entry
    kernel, same float64 accumulation order.
    """
    total = 0.0
    for j in range(lazy.tables.shape[0]):
        idx = int(code[j])
        if lazy.tables[j, idx] == -1.0:
            lazy.ensure(j, np.array([idx]))
        total += float(lazy.tables[j, idx])
    return total


def _refine_batch(codes: np.ndarray, lazy: LazyTables) -> np.ndarray:
    """adc_refine over a candidate code block; float64 scores."""
    for j in range(codes.shape[1]):
        lazy.ensure(j, codes[:, j])
    return adc_batch(codes, lazy.tables)


def refine(codes: np.ndarray, buckets: CappedBuckets, lazy: LazyTables, r: int, r2: int, ids_to_rows=None) -> ResultSet:
    """Re-score bucketed candidates with full codebooks; keep the best r.

    Walks buckets in ascending score order, always processing whole
    buckets, until at least r2 candidates have been scored or the
    buckets run out. The boundary bucket is processed in full, so the
    processed count may exceed r2.

    Args:
        codes: The scanned code list.
        buckets: Candidate accumulator from scan_derived.
        lazy: Lazy full-codebook tables for this query.
        r: Result count.
        r2: Candidate budget.
        ids_to_rows: Optional mapping from vector id to row in codes, for
            lists whose ids are not positions.
    """
    chunks = []
    processed = 0
    for b in range(buckets.bound):
        chunk = buckets.bucket_ids(b)
        if chunk.size == 0:
            continue
        chunks.append(chunk)
        processed += chunk.size
        if processed >= r2:
            break
    if not chunks:
        return ResultSet(r)
    cand_ids = np.concatenate(chunks)
    rows = cand_ids if ids_to_rows is None else ids_to_rows[cand_ids]
    dists = _refine_batch(codes[rows], lazy)
    return ResultSet.from_arrays(cand_ids, dists, r)


def nns_derived(quantizer, codes: np.ndarray, y: np.ndarray, r: int, r2: int, capped: bool = True, return_timings: bool = False):
    """Two-pass nearest-neighbor search of one query over a code list.

    Composes small-table computation and quantization, the bucketed
    low-bit scan, and full-codebook refinement. Vector ids are list
    positions.

    Args:
        quantizer: Fitted ProductQuantizer.
        codes: (n, m) encoded database.
        y: Raw query vector.
        r: Results to return (r <= r2).
        r2: Candidate budget for the first pass.
        capped: Disable to keep every non-saturated candidate bucketed.
        return_timings: Also return per-phase wall times in microseconds.

    Returns:
        ResultSet, or (ResultSet, {"tables_us", "scan_us", "refine_us"}).
    """
    if r > r2:
        raise ValueError(f"r={r} must not exceed r2={r2}")
    codes = np.asarray(codes)
    y = np.asarray(y, dtype=np.float32).reshape(-1)
    yr = quantizer.rotate(y.reshape(1, -1)).reshape(-1)

    t0 = time.perf_counter_ns()
    small = compute_tables(yr, quantizer.derived_codebooks_)
    qt = quantize_tables(small, codes[: min(r2, codes.shape[0])], r2)
    t1 = time.perf_counter_ns()
    buckets = scan_derived(codes, qt, r2, capped=capped)
    t2 = time.perf_counter_ns()
    lazy = LazyTables(quantizer.codebooks_, yr)
    results = refine(codes, buckets, lazy, r, r2)
    t3 = time.perf_counter_ns()

    if return_timings:
        timings = {
            "tables_us": (t1 - t0) / 1000.0,
            "scan_us": (t2 - t1) / 1000.0,
            "refine_us": (t3 - t2) / 1000.0,
        }
        return results, timings
    return results
