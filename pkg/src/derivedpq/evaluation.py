"""Ground truth, recall, candidate-budget calibration, and benchmarking."""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .flat import FlatIndex
from .ivf import IVFIndex
from .quantizer import OptimizedProductQuantizer, ProductQuantizer
from .search import ResultSet, top_r_by_distance

_NN_BLOCK_ELEMS = 2**25

# Queries used by the calibration protocol (the leading slice).
CALIBRATION_QUERIES = 1000

CSV_COLUMNS = [
    "method", "m", "b", "bbar", "K", "ma", "r", "r2",
    "recall", "index_us", "tables_us", "scan_us", "refine_us", "total_us",
]


def exact_nn(database, queries, depth: int) -> np.ndarray:
    """Exact nearest neighbors by brute force.

    Args:
        database: (n, d) vectors.
        queries: (nq, d) vectors, same d.
        depth: Neighbors per query (capped at n).

    Returns:
        (nq, depth) int32 ids, ascending true squared distance, distance
        ties broken by lower id.
    """
    db = np.ascontiguousarray(database, dtype=np.float32)
    qs = np.ascontiguousarray(queries, dtype=np.float32)
    if db.ndim != 2 or qs.ndim != 2 or db.shape[1] != qs.shape[1]:
        raise ValueError(
            f"dimension mismatch: database {db.shape}, queries {qs.shape}"
        )
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    n = db.shape[0]
    depth = min(depth, n)
    db64 = db.astype(np.float64)
    db_norms = np.einsum("nd,nd->n", db64, db64)
    ids = np.arange(n, dtype=np.int64)
    out = np.empty((qs.shape[0], depth), dtype=np.int32)
    rows = max(1, _NN_BLOCK_ELEMS // max(n, 1))
    for start in range(0, qs.shape[0], rows):
        block = qs[start : start + rows].astype(np.float64)
        d2 = db_norms[None, :] - 2.0 * (block @ db64.T)
        d2 += np.einsum("qd,qd->q", block, block)[:, None]
        for i in range(d2.shape[0]):
            top_ids, _ = top_r_by_distance(d2[i], ids, depth)
            out[start + i] = top_ids
    return out


def _result_ids(results) -> np.ndarray:
    if isinstance(results, np.ndarray):
        return results
    rows = []
    width = max((len(rs) for rs in results), default=0)
    for rs in results:
        ids = rs.ids if isinstance(rs, ResultSet) else np.asarray(rs)
        rows.append(np.pad(ids, (0, width - len(ids)), constant_values=-1))
    return np.asarray(rows)


def recall_at_r(results, truth: np.ndarray, r: int) -> float:
    """Fraction of queries whose true nearest neighbor is in the top r.

    Args:
        results: (nq, >=r) id array, or a list of ResultSets.
        truth: (nq, >=1) ground-truth ids, rank 0 first.
    """
    ids = _result_ids(results)
    truth = np.asarray(truth)
    if truth.ndim != 2 or truth.shape[1] < 1:
        raise ValueError("ground truth must have at least one column")
    if ids.shape[0] != truth.shape[0]:
        raise ValueError(
            f"{ids.shape[0]} result rows vs {truth.shape[0]} truth rows"
        )
    hits = (ids[:, :r] == truth[:, :1]).any(axis=1)
    return float(hits.mean())


def calibrate_r2(index, queries, truth, r: int, grid, search_kwargs=None) -> int:
    """Smallest candidate budget whose recall keeps up with the full scan.

    Runs the conventional search once for the reference recall, then the
    derived search at each grid value ascending; returns the first r2
    whose recall is at least 99% of the reference. Falls back to the
    largest grid value (with a warning) if none qualifies.

    Args:
        index: Fitted FlatIndex or IVFIndex.
        queries: Calibration queries (callers pass the protocol subset).
        truth: Ground-truth ids for those queries.
        r: Recall depth.
        grid: Ascending candidate-budget values, non-empty.
        search_kwargs: Extra search arguments (for example {"ma": 8}).
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty r2 grid")
    if sorted(grid) != grid:
        raise ValueError("r2 grid must be ascending")
    kwargs = dict(search_kwargs or {})
    _, full_ids = index.search(queries, r, mode="conventional", **kwargs)
    full_recall = recall_at_r(full_ids, truth, r)
    for r2 in grid:
        _, ids = index.search(queries, r, mode="derived", r2=int(r2), **kwargs)
        if recall_at_r(ids, truth, r) >= 0.99 * full_recall:
            return int(r2)
    warnings.warn(
        f"no grid value reached 99% of the reference recall {full_recall:.4f}; "
        f"returning {grid[-1]}",
        stacklevel=2,
    )
    return int(grid[-1])


@dataclass
class MethodSpec:
    """One benchmark configuration.

    bbar None means a conventional full-table scan; a value (including
    bbar == b) selects the two-pass derived search with budget r2.
    """

    name: str
    m: int
    b: int
    bbar: int | None = None
    r2: int | None = None
    opq: bool = False

    @property
    def mode(self) -> str:
        return "derived" if self.bbar is not None else "conventional"


@dataclass
class BenchReport:
    """Benchmark rows (means) plus per-row medians, CSV-serializable."""

    rows: list = field(default_factory=list)
    medians: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row[k] for k in CSV_COLUMNS})


def run_bench(
    database,
    queries,
    methods,
    r_values,
    truth=None,
    index_kind: str = "flat",
    n_cells: int = 256,
    ma: int = 8,
    seed: int = 42,
    train=None,
    warmup: int = 10,
) -> BenchReport:
    """Train, index, and time each method over the query set.

    Per query the search phases (index / tables / scan / refine) are
    timed with a monotonic clock inside an independently measured total;
    the first `warmup` queries are run once untimed. Recall is reported
    against `truth` (computed exactly when omitted) at each r.

    Args:
        database: (n, d) database vectors.
        queries: (nq, d) query vectors.
        methods: MethodSpec list; conflicting specs fail before any run.
        r_values: Result depths to report, e.g. [1, 10, 100].
        truth: Optional (nq, >=1) ground-truth ids.
        index_kind: "flat" (exhaustive) or "ivf".
        n_cells, ma: IVF geometry, ignored for flat.
        seed: Training seed.
        train: Optional training set; defaults to the database.
        warmup: Untimed leading queries.

    Returns:
        BenchReport with one row per (method, r).
    """
    database = np.ascontiguousarray(database, dtype=np.float32)
    queries = np.ascontiguousarray(queries, dtype=np.float32)
    r_values = [int(r) for r in r_values]
    if not r_values or any(r < 1 for r in r_values):
        raise ValueError(f"invalid r values {r_values}")
    if index_kind not in ("flat", "ivf"):
        raise ValueError(f"unknown index kind {index_kind!r}")
    for spec in methods:
        if spec.mode == "derived" and spec.r2 is None:
            raise ValueError(f"method {spec.name}: derived mode requires r2")
        if spec.mode == "derived" and spec.r2 < max(r_values):
            raise ValueError(f"method {spec.name}: r2 < max r")
    if truth is None:
        truth = exact_nn(database, queries, depth=1)
    truth = np.asarray(truth)

    r_max = max(r_values)
    report = BenchReport()
    for spec in methods:
        qcls = OptimizedProductQuantizer if spec.opq else ProductQuantizer
        quantizer = qcls(m=spec.m, b=spec.b, bbar=spec.bbar, seed=seed)
        if index_kind == "flat":
            index = FlatIndex(quantizer).fit(database, train=train)
        else:
            index = IVFIndex(quantizer, n_cells=n_cells, seed=seed).fit(
                database, train=train
            )
        search_kwargs = {"mode": spec.mode}
        if spec.mode == "derived":
            search_kwargs["r2"] = spec.r2
        if index_kind == "ivf":
            search_kwargs["ma"] = ma

        if warmup > 0:
            index.search(queries[: min(warmup, len(queries))], r_max, **search_kwargs)

        nq = len(queries)
        ids = np.empty((nq, r_max), dtype=np.int64)
        phases = {k: np.zeros(nq) for k in ("index_us", "tables_us", "scan_us", "refine_us")}
        total_us = np.zeros(nq)
        for qi in range(nq):
            t0 = time.perf_counter_ns()
            _, row_ids, t = index.search(
                queries[qi : qi + 1], r_max, return_timings=True, **search_kwargs
            )
            total_us[qi] = (time.perf_counter_ns() - t0) / 1000.0
            ids[qi] = row_ids[0]
            for key in phases:
                phases[key][qi] += t[key][0]

        for r in r_values:
            recall = recall_at_r(ids, truth, r)
            base = {
                "method": spec.name,
                "m": spec.m,
                "b": spec.b,
                "bbar": spec.bbar if spec.bbar is not None else 0,
                "K": n_cells if index_kind == "ivf" else 0,
                "ma": ma if index_kind == "ivf" else 0,
                "r": r,
                "r2": spec.r2 if spec.mode == "derived" else 0,
                "recall": round(recall, 6),
            }
            means = {key: round(float(arr.mean()), 3) for key, arr in phases.items()}
            means["total_us"] = round(float(total_us.mean()), 3)
            report.rows.append({**base, **means})
            report.medians.append(
                {
                    **base,
                    **{key: round(float(np.median(arr)), 3) for key, arr in phases.items()},
                    "total_us": round(float(np.median(total_us)), 3),
                }
            )
    return report
