"""Exhaustive search over one encoded database list."""

from __future__ import annotations

import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import InvariantError
from .search import ResultSet, adc_batch, compute_tables
from .twopass import nns_derived


def pack_results(result_sets, r: int):
    """Stack per-query ResultSets into (distances, ids) arrays.

    Rows shorter than r are padded with inf / -1.
    """
    nq = len(result_sets)
    dists = np.full((nq, r), np.inf, dtype=np.float64)
    ids = np.full((nq, r), -1, dtype=np.int64)
    for qi, rs in enumerate(result_sets):
        got = len(rs)
        if got:
            dists[qi, :got] = rs.distances
            ids[qi, :got] = rs.ids
    return dists, ids


class FlatIndex(BaseEstimator):
    """Encoded database scanned exhaustively, one or two passes.

    Parameters
    ----------
    quantizer : ProductQuantizer
        Fitted or unfitted; an unfitted quantizer is trained during fit
        on the training set (or the database itself).
    """

    def __init__(self, quantizer):
        self.quantizer = quantizer

    def fit(self, X, train=None):
        """Encode the database; train the quantizer first if needed."""
        X = check_array(X, dtype=np.float32, order="C")
        if not hasattr(self.quantizer, "codebooks_"):
            self.quantizer.fit(X if train is None else train)
        self.codes_ = self.quantizer.encode(X)
        self.n_ = X.shape[0]
        return self

    def search(self, Y, r: int, mode: str = "conventional", r2=None, capped: bool = True, return_timings: bool = False):
        """Top-r neighbors for each query row.

        Args:
            Y: (nq, d) queries.
            r: Results per query.
            mode: "conventional" scans full tables; "derived" runs the
                two-pass search and needs r2 >= r.
            r2: Candidate budget for derived mode.
            capped: Derived mode only; disable the bucket discard bound.
            return_timings: Also return per-query phase timings.

        Returns:
            (distances, ids) arrays of shape (nq, r), plus a timing dict
            of per-query microsecond arrays when requested.
        """
        check_is_fitted(self, "codes_")
        Y = check_array(Y, dtype=np.float32, order="C")
        if mode not in ("conventional", "derived"):
            raise ValueError(f"unknown mode {mode!r}")
        nq = Y.shape[0]
        timings = {
            "index_us": np.zeros(nq),
            "tables_us": np.zeros(nq),
            "scan_us": np.zeros(nq),
            "refine_us": np.zeros(nq),
        }
        results = []
        if mode == "conventional":
            for qi in range(nq):
                t0 = time.perf_counter_ns()
                yr = self.quantizer.rotate(Y[qi : qi + 1]).reshape(-1)
                tables = compute_tables(yr, self.quantizer.codebooks_)
                t1 = time.perf_counter_ns()
                dists = adc_batch(self.codes_, tables)
                ids = np.arange(self.n_, dtype=np.int64)
                results.append(ResultSet.from_arrays(ids, dists, r))
                t2 = time.perf_counter_ns()
                timings["tables_us"][qi] = (t1 - t0) / 1000.0
                timings["scan_us"][qi] = (t2 - t1) / 1000.0
        else:
            if r2 is None:
                raise ValueError("derived mode requires r2")
            for qi in range(nq):
                rs, t = nns_derived(
                    self.quantizer, self.codes_, Y[qi], r, r2,
                    capped=capped, return_timings=True,
                )
                results.append(rs)
                for key, value in t.items():
                    timings[key][qi] = value
        dists, ids = pack_results(results, r)
        if return_timings:
            return dists, ids, timings
        return dists, ids

    # -- persistence ------------------------------------------------------

    def validate(self) -> None:
        self.quantizer.validate()
        if hasattr(self, "codes_"):
            k = self.quantizer.k_
            codes = self.codes_
            if codes.min(initial=0) < 0 or codes.max(initial=0) >= k:
                raise InvariantError(f"stored codes fall outside [0, {k})")

    def _serialize(self):
        check_is_fitted(self, "codes_")
        qkind, qparams, qarrays = self.quantizer._serialize()
        params = {"quantizer_kind": qkind, "quantizer_params": qparams}
        arrays = {"codes": self.codes_}
        arrays.update({f"q.{name}": arr for name, arr in qarrays.items()})
        return "flat", params, arrays

    @classmethod
    def _deserialize(cls, params, arrays):
        from .vecio import _model_class

        qcls = _model_class(params["quantizer_kind"], "<container>")
        qarrays = {
            name[2:]: arr for name, arr in arrays.items() if name.startswith("q.")
        }
        quantizer = qcls._deserialize(params["quantizer_params"], qarrays)
        index = cls(quantizer)
        index.codes_ = arrays["codes"]
        index.n_ = index.codes_.shape[0]
        return index
