"""Inverted index with residual encoding and multi-probe search.

Space is split into n_cells coarse cells by k-means; every database
vector is stored in its nearest cell's list as the product-quantized
code of its residual (vector minus cell center). A query probes the ma
nearest cells and scans their lists against tables computed from the
query's per-cell residual, either conventionally or with the two-pass
derived search. In derived mode the 8-bit quantization bounds are taken
from the first non-empty probed list and shared across all probed
lists, so one bucket accumulator can rank candidates from every list.
"""

from __future__ import annotations

import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .clustering import kmeans, nearest_centroids
from .errors import InvariantError
from .flat import pack_results
from .search import ResultSet, adc_batch, compute_tables, top_r_by_distance
from .twopass import (
    CappedBuckets,
    LazyTables,
    _refine_batch,
    adc_low_batch,
    quantize_tables,
    quantize_with_bounds,
)

# Coarse k-means trains on at most this many sampled vectors per cell.
_COARSE_SAMPLE_PER_CELL = 256


class IVFIndex(BaseEstimator):
    """Inverted file over residual product-quantizer codes.

    Parameters
    ----------
    quantizer : ProductQuantizer
        Parameter carrier for the residual quantizer; it is (re)trained
        on residuals during fit, since codes only make sense in the
        frame of their cell's center.
    n_cells : int
        Number of coarse cells (K).
    seed : int
        Seeds coarse sampling and clustering.
    coarse_iters : int
        K-means iteration cap for the coarse codebook.
    """

    def __init__(self, quantizer, n_cells: int = 256, seed: int = 42, coarse_iters: int = 50):
        self.quantizer = quantizer
        self.n_cells = n_cells
        self.seed = seed
        self.coarse_iters = coarse_iters

    # -- build --------------------------------------------------------------

    def fit(self, X, train=None):
        """Cluster the database into cells and encode residuals.

        Args:
            X: (n, d) database, n >= n_cells.
            train: Optional training vectors for the residual quantizer;
                defaults to the database itself.
        """
        X = check_array(X, dtype=np.float32, order="C")
        n = X.shape[0]
        if self.n_cells < 1:
            raise ValueError(f"n_cells must be >= 1, got {self.n_cells}")
        if n < self.n_cells:
            raise ValueError(f"need at least n_cells={self.n_cells} vectors, got {n}")
        rng = np.random.default_rng(self.seed)
        sample_size = min(n, _COARSE_SAMPLE_PER_CELL * self.n_cells)
        sample = X[rng.choice(n, size=sample_size, replace=False)] if sample_size < n else X
        coarse = kmeans(sample, self.n_cells, seed=self.seed, max_iters=self.coarse_iters)
        self.centers_ = coarse.centroids

        cell_of, _ = nearest_centroids(X, self.centers_)
        residuals = X - self.centers_[cell_of]
        if train is None:
            train_residuals = residuals
        else:
            train = check_array(train, dtype=np.float32, order="C")
            train_cells, _ = nearest_centroids(train, self.centers_)
            train_residuals = train - self.centers_[train_cells]
        self.quantizer.fit(train_residuals)

        codes = self.quantizer.encode(residuals)
        order = np.argsort(cell_of, kind="stable").astype(np.int64)
        self.cell_of_ = cell_of
        self.sorted_ids_ = order
        self.sorted_codes_ = np.ascontiguousarray(codes[order])
        counts = np.bincount(cell_of, minlength=self.n_cells)
        self.offsets_ = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.row_of_ = np.empty(n, dtype=np.int64)
        self.row_of_[order] = np.arange(n)
        self.n_ = n
        return self

    # -- query --------------------------------------------------------------

    def probe(self, y, ma: int):
        """The ma cells nearest to y, with per-cell residual queries.

        Returns (cell ids ascending by center distance, residual queries
        y - center per probed cell). Ties go to the lower cell id.
        """
        check_is_fitted(self, "centers_")
        y = np.asarray(y, dtype=np.float32).reshape(-1)
        if not (1 <= ma <= self.n_cells):
            raise ValueError(f"ma must be in [1, {self.n_cells}], got {ma}")
        diff = self.centers_.astype(np.float64) - y.astype(np.float64)
        dists = np.einsum("kd,kd->k", diff, diff)
        cells, _ = top_r_by_distance(dists, np.arange(self.n_cells, dtype=np.int64), ma)
        return cells, y[None, :] - self.centers_[cells]

    def _cell_slice(self, cell: int):
        return int(self.offsets_[cell]), int(self.offsets_[cell + 1])

    def search(self, Y, r: int, ma: int = 8, mode: str = "conventional", r2=None, capped: bool = True, return_timings: bool = False):
        """Top-r neighbors of each query over the ma nearest cells.

        Same result conventions as FlatIndex.search; ids are database
        row numbers. Derived mode requires r2 >= r and accumulates one
        candidate set across all probed lists.
        """
        check_is_fitted(self, "centers_")
        Y = check_array(Y, dtype=np.float32, order="C")
        if mode not in ("conventional", "derived"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "derived":
            if r2 is None:
                raise ValueError("derived mode requires r2")
            if r > r2:
                raise ValueError(f"r={r} must not exceed r2={r2}")
        nq = Y.shape[0]
        timings = {
            "index_us": np.zeros(nq),
            "tables_us": np.zeros(nq),
            "scan_us": np.zeros(nq),
            "refine_us": np.zeros(nq),
        }
        results = []
        for qi in range(nq):
            if mode == "conventional":
                rs, t = self._search_conventional(Y[qi], r, ma)
            else:
                rs, t = self._search_derived(Y[qi], r, r2, ma, capped)
            results.append(rs)
            for key, value in t.items():
                timings[key][qi] = value
        dists, ids = pack_results(results, r)
        if return_timings:
            return dists, ids, timings
        return dists, ids

    def _search_conventional(self, y, r, ma):
        t0 = time.perf_counter_ns()
        cells, res_qs = self.probe(y, ma)
        t1 = time.perf_counter_ns()
        rotated = self.quantizer.rotate(res_qs)
        id_chunks, dist_chunks = [], []
        tables_ns = 0
        scan_ns = 0
        for ci, cell in enumerate(cells):
            lo, hi = self._cell_slice(cell)
            if lo == hi:
                continue
            s0 = time.perf_counter_ns()
            tables = compute_tables(rotated[ci], self.quantizer.codebooks_)
            s1 = time.perf_counter_ns()
            dist_chunks.append(adc_batch(self.sorted_codes_[lo:hi], tables))
            id_chunks.append(self.sorted_ids_[lo:hi])
            s2 = time.perf_counter_ns()
            tables_ns += s1 - s0
            scan_ns += s2 - s1
        if id_chunks:
            rs = ResultSet.from_arrays(
                np.concatenate(id_chunks), np.concatenate(dist_chunks), r
            )
        else:
            rs = ResultSet(r)
        return rs, {
            "index_us": (t1 - t0) / 1000.0,
            "tables_us": tables_ns / 1000.0,
            "scan_us": scan_ns / 1000.0,
            "refine_us": 0.0,
        }

    def _search_derived(self, y, r, r2, ma, capped):
        t0 = time.perf_counter_ns()
        cells, res_qs = self.probe(y, ma)
        t1 = time.perf_counter_ns()

        # Tables: small tables per probed cell, quantized against bounds
        # taken from the first non-empty probed list.
        rotated = self.quantizer.rotate(res_qs)
        qtables = {}
        bounds = None
        for ci, cell in enumerate(cells):
            lo, hi = self._cell_slice(cell)
            if lo == hi:
                continue
            small = compute_tables(rotated[ci], self.quantizer.derived_codebooks_)
            if bounds is None:
                qt = quantize_tables(
                    small, self.sorted_codes_[lo : lo + min(r2, hi - lo)], r2
                )
                bounds = (qt.qmin, qt.qmax)
            else:
                qt = quantize_with_bounds(small, bounds[0], bounds[1], self.quantizer.bbar_)
            qtables[int(cell)] = qt
        t2 = time.perf_counter_ns()

        # Scan: one shared candidate accumulator over all probed lists.
        score_chunks, id_chunks = [], []
        for cell in cells:
            lo, hi = self._cell_slice(int(cell))
            if lo == hi:
                continue
            score_chunks.append(
                adc_low_batch(self.sorted_codes_[lo:hi], qtables[int(cell)])
            )
            id_chunks.append(self.sorted_ids_[lo:hi])
        if not score_chunks:
            zero = {k: 0.0 for k in ("tables_us", "scan_us", "refine_us")}
            zero["index_us"] = (t1 - t0) / 1000.0
            return ResultSet(r), zero
        buckets = CappedBuckets.from_arrays(
            np.concatenate(score_chunks), np.concatenate(id_chunks), r2, capped=capped
        )
        t3 = time.perf_counter_ns()

        # Refine: whole buckets in ascending score order until r2
        # candidates are re-scored, each in its own cell's residual frame.
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
        if chunks:
            cand_ids = np.concatenate(chunks)
            cell_rotated = {int(c): rotated[ci] for ci, c in enumerate(cells)}
            lazies = {}
            dist_parts, id_parts = [], []
            cand_cells = self.cell_of_[cand_ids]
            for cell in np.unique(cand_cells):
                members = cand_ids[cand_cells == cell]
                lazy = lazies.setdefault(
                    int(cell),
                    LazyTables(self.quantizer.codebooks_, cell_rotated[int(cell)]),
                )
                codes = self.sorted_codes_[self.row_of_[members]]
                dist_parts.append(_refine_batch(codes, lazy))
                id_parts.append(members)
            rs = ResultSet.from_arrays(
                np.concatenate(id_parts), np.concatenate(dist_parts), r
            )
        else:
            rs = ResultSet(r)
        t4 = time.perf_counter_ns()
        return rs, {
            "index_us": (t1 - t0) / 1000.0,
            "tables_us": (t2 - t1) / 1000.0,
            "scan_us": (t3 - t2) / 1000.0,
            "refine_us": (t4 - t3) / 1000.0,
        }

    # -- integrity ------------------------------------------------------

    def validate(self) -> None:
        """Check list structure and quantizer invariants."""
        check_is_fitted(self, "centers_")
        self.quantizer.validate()
        if not np.array_equal(np.sort(self.sorted_ids_), np.arange(self.n_)):
            raise InvariantError("inverted lists do not partition the database")
        counts = np.diff(self.offsets_)
        if not np.array_equal(counts, np.bincount(self.cell_of_, minlength=self.n_cells)):
            raise InvariantError("list offsets disagree with cell assignments")
        k = self.quantizer.k_
        codes = self.sorted_codes_
        if codes.min(initial=0) < 0 or codes.max(initial=0) >= k:
            raise InvariantError(f"stored codes fall outside [0, {k})")

    # -- persistence ------------------------------------------------------

    def _serialize(self):
        check_is_fitted(self, "centers_")
        qkind, qparams, qarrays = self.quantizer._serialize()
        params = {
            "n_cells": self.n_cells,
            "seed": self.seed,
            "coarse_iters": self.coarse_iters,
            "quantizer_kind": qkind,
            "quantizer_params": qparams,
        }
        arrays = {
            "centers": self.centers_,
            "cell_of": self.cell_of_,
            "sorted_ids": self.sorted_ids_,
            "sorted_codes": self.sorted_codes_,
            "offsets": self.offsets_,
        }
        arrays.update({f"q.{name}": arr for name, arr in qarrays.items()})
        return "ivf", params, arrays

    @classmethod
    def _deserialize(cls, params, arrays):
        from .vecio import _model_class

        qcls = _model_class(params["quantizer_kind"], "<container>")
        qarrays = {
            name[2:]: arr for name, arr in arrays.items() if name.startswith("q.")
        }
        quantizer = qcls._deserialize(params["quantizer_params"], qarrays)
        index = cls(
            quantizer,
            n_cells=params["n_cells"],
            seed=params["seed"],
            coarse_iters=params["coarse_iters"],
        )
        index.centers_ = arrays["centers"]
        index.cell_of_ = arrays["cell_of"]
        index.sorted_ids_ = arrays["sorted_ids"]
        index.sorted_codes_ = arrays["sorted_codes"]
        index.offsets_ = arrays["offsets"]
        index.n_ = index.sorted_ids_.shape[0]
        index.row_of_ = np.empty(index.n_, dtype=np.int64)
        index.row_of_[index.sorted_ids_] = np.arange(index.n_)
        return index
