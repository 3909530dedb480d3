"""Product quantizers with jointly trained derived codebooks.

A product quantizer splits a d-vector into m sub-vectors and encodes
each against its own codebook of k = 2^b centroids. On top of the full
codebooks, training carves out per-subspace derived codebooks of
kbar = 2^bbar centroids: the full codebook is partitioned into kbar
equal-size groups, each derived centroid is its group's mean, and the
full codebook is re-ordered so that the low bbar bits of any centroid
index equal its group id. A scan can therefore approximate distances
with the small tables by masking code indexes, no re-encoding needed.
"""

from __future__ import annotations

import warnings

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .clustering import kmeans, kmeans_same_size, nearest_centroids
from .errors import InvariantError


def low_bits(index: int, bbar: int) -> int:
    """The low bbar bits of a centroid index: index mod 2^bbar."""
    return int(index) & ((1 << bbar) - 1)


def packing_permutation(partition, bbar: int) -> np.ndarray:
    """Permutation placing group l's member ibar at index (ibar << bbar) | l.

    Args:
        partition: kbar equal-size groups of centroid indexes, kbar = 2^bbar.
        bbar: Bits reserved for the group id.

    Returns:
        perm with perm[new_index] = old_index.

    Raises:
        ValueError: Group count is not 2^bbar, groups are unbalanced, or
            the groups do not cover each index exactly once.
    """
    kbar = len(partition)
    if kbar != (1 << bbar):
        raise ValueError(f"expected {1 << bbar} groups for bbar={bbar}, got {kbar}")
    sizes = {len(g) for g in partition}
    if len(sizes) != 1:
        raise ValueError(f"unbalanced partition, group sizes {sorted(sizes)}")
    group_size = sizes.pop()
    k = kbar * group_size
    perm = np.full(k, -1, dtype=np.int64)
    for gid, members in enumerate(partition):
        for ibar, old in enumerate(members):
            perm[(ibar << bbar) | gid] = old
    if not np.array_equal(np.sort(perm), np.arange(k)):
        raise ValueError("partition does not cover each centroid index exactly once")
    return perm


def build_final_codebook(temp: np.ndarray, partition, bbar: int) -> np.ndarray:
    """Re-order a codebook so low_bits(index, bbar) equals the group id.

    The output is a permutation of the input rows; centroid values are
    untouched, only their indexes change.
    """
    perm = packing_permutation(partition, bbar)
    if len(perm) != temp.shape[0]:
        raise ValueError(
            f"partition covers {len(perm)} centroids, codebook has {temp.shape[0]}"
        )
    return temp[perm].copy()


def _encode_with(x: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    """Per-subspace nearest-centroid indexes, ties to the lowest index."""
    m, k, dsub = codebooks.shape
    dtype = np.uint8 if k <= 256 else np.uint16
    codes = np.empty((x.shape[0], m), dtype=dtype)
    for j in range(m):
        labels, _ = nearest_centroids(x[:, j * dsub : (j + 1) * dsub], codebooks[j])
        codes[:, j] = labels
    return codes


def _decode_with(codes: np.ndarray, codebooks: np.ndarray) -> np.ndarray:
    m, k, dsub = codebooks.shape
    out = np.empty((codes.shape[0], m * dsub), dtype=np.float32)
    for j in range(m):
        out[:, j * dsub : (j + 1) * dsub] = codebooks[j][codes[:, j]]
    return out


class ProductQuantizer(TransformerMixin, BaseEstimator):
    """Product quantizer trained with k-means, plus derived codebooks.

    Parameters
    ----------
    m : int
        Number of subspaces; the input dimension must be divisible by m.
    b : int
        Bits per full codebook (k = 2^b centroids), 1 <= b <= 16.
    bbar : int or None
        Bits per derived codebook, 1 <= bbar <= b. None means bbar = b,
        in which case the derived codebook is the full codebook up to
        centroid order.
    seed : int
        Seeds all clustering; identical inputs reproduce identical models.
    max_iters : int
        K-means iteration cap.

    Attributes
    ----------
    codebooks_ : (m, 2^b, d/m) float32
        Full codebooks, re-ordered so the low bbar bits of each index
        equal the derived group id.
    derived_codebooks_ : (m, 2^bbar, d/m) float32
        Group means of the full codebooks.
    derived_assignments_ : (m, 2^b) int32
        Group id each (re-ordered) centroid was assigned to during the
        balanced split. Equal to low_bits(index, bbar) for a valid model.
    distortions_ : (m,) float64
        Final per-subspace k-means distortion on the training set.
    """

    def __init__(self, m: int = 8, b: int = 8, bbar=None, seed: int = 42, max_iters: int = 50):
        self.m = m
        self.b = b
        self.bbar = bbar
        self.seed = seed
        self.max_iters = max_iters

    # -- training ---------------------------------------------------------

    def fit(self, X, y=None):
        X = self._check_fit_input(X)
        self.rotation_ = None
        codebooks, distortions = self._train_codebooks(X)
        self._finalize(codebooks, distortions)
        return self

    def _check_fit_input(self, X) -> np.ndarray:
        X = check_array(X, dtype=np.float32, order="C")
        m, b = self.m, self.b
        bbar = b if self.bbar is None else self.bbar
        if not (1 <= b <= 16):
            raise ValueError(f"b must be in [1, 16], got {b}")
        if not (1 <= bbar <= b):
            raise ValueError(f"bbar must be in [1, b={b}], got {bbar}")
        if m < 1:
            raise ValueError(f"m must be >= 1, got {m}")
        n, d = X.shape
        if d % m != 0:
            raise ValueError(f"dimension {d} not divisible by m={m}")
        k = 1 << b
        if n < k:
            raise ValueError(f"need at least 2^b={k} training vectors, got {n}")
        if n < 32 * k:
            warnings.warn(
                f"training set of {n} vectors is small for {k} centroids per "
                f"subspace; expect noisy codebooks",
                stacklevel=3,
            )
        self.d_ = d
        self.dsub_ = d // m
        self.bbar_ = bbar
        self.k_ = k
        self.kbar_ = 1 << bbar
        self.code_dtype_ = np.uint8 if b <= 8 else np.uint16
        return X

    def _train_codebooks(self, X, init=None, max_iters=None):
        m, k, dsub = self.m, self.k_, self.dsub_
        iters = self.max_iters if max_iters is None else max_iters
        codebooks = np.empty((m, k, dsub), dtype=np.float32)
        distortions = np.empty(m, dtype=np.float64)
        for j in range(m):
            sub = X[:, j * dsub : (j + 1) * dsub]
            result = kmeans(
                sub,
                k,
                seed=self.seed + j,
                max_iters=iters,
                init_centroids=None if init is None else init[j],
            )
            codebooks[j] = result.centroids
            distortions[j] = result.distortion
        return codebooks, distortions

    def _finalize(self, codebooks, distortions):
        """Split each full codebook into balanced groups and re-order it."""
        m, kbar, bbar = self.m, self.kbar_, self.bbar_
        self.codebooks_ = np.empty_like(codebooks)
        self.derived_codebooks_ = np.empty((m, kbar, self.dsub_), dtype=np.float32)
        self.derived_assignments_ = np.empty((m, self.k_), dtype=np.int32)
        for j in range(m):
            split = kmeans_same_size(
                codebooks[j], kbar, seed=self.seed + j, max_iters=self.max_iters
            )
            perm = packing_permutation(split.partition, bbar)
            self.codebooks_[j] = codebooks[j][perm]
            self.derived_codebooks_[j] = split.centroids
            self.derived_assignments_[j] = split.labels[perm]
        self.distortions_ = distortions

    # -- encoding ---------------------------------------------------------

    def encode(self, X) -> np.ndarray:
        """Encode rows of X to (n, m) centroid-index codes."""
        check_is_fitted(self, "codebooks_")
        X = check_array(X, dtype=np.float32, order="C")
        if X.shape[1] != self.d_:
            raise ValueError(f"expected dimension {self.d_}, got {X.shape[1]}")
        return _encode_with(self.rotate(X), self.codebooks_)

    def decode(self, codes) -> np.ndarray:
        """Reconstruct vectors from codes (inverse rotation applied)."""
        check_is_fitted(self, "codebooks_")
        codes = np.asarray(codes)
        if codes.ndim != 2 or codes.shape[1] != self.m:
            raise ValueError(f"expected (n, {self.m}) codes, got shape {codes.shape}")
        if codes.min(initial=0) < 0 or codes.max(initial=0) >= self.k_:
            raise ValueError("code index out of range")
        recon = _decode_with(codes, self.codebooks_)
        if self.rotation_ is not None:
            recon = recon @ self.rotation_.T
        return recon

    def transform(self, X):
        return self.encode(X)

    def inverse_transform(self, codes):
        return self.decode(codes)

    def rotate(self, X: np.ndarray) -> np.ndarray:
        """Apply the learned rotation (identity for plain PQ)."""
        if self.rotation_ is None:
            return X
        return (X @ self.rotation_).astype(np.float32, copy=False)

    def reconstruction_error(self, X) -> float:
        """Mean squared reconstruction error per vector."""
        X = check_array(X, dtype=np.float32, order="C")
        recon = self.decode(self.encode(X))
        diff = X.astype(np.float64) - recon.astype(np.float64)
        return float(np.einsum("nd,nd->n", diff, diff).mean())

    # -- integrity --------------------------------------------------------

    def validate(self) -> None:
        """Check structural invariants; raise InvariantError on violation.

        Verifies that every centroid's recorded group id equals the low
        bbar bits of its index, and that the rotation (if any) is
        orthonormal to 1e-5 per entry.
        """
        check_is_fitted(self, "codebooks_")
        expected = np.arange(self.k_, dtype=np.int32) & (self.kbar_ - 1)
        for j in range(self.m):
            if not np.array_equal(self.derived_assignments_[j], expected):
                bad = np.flatnonzero(self.derived_assignments_[j] != expected)[0]
                raise InvariantError(
                    f"subspace {j}: centroid {int(bad)} is in group "
                    f"{int(self.derived_assignments_[j][bad])}, index demands "
                    f"{int(expected[bad])}"
                )
        if not np.all(np.isfinite(self.codebooks_)):
            raise InvariantError("non-finite centroid in full codebooks")
        if not np.all(np.isfinite(self.derived_codebooks_)):
            raise InvariantError("non-finite centroid in derived codebooks")
        if self.rotation_ is not None:
            eye = self.rotation_.T.astype(np.float64) @ self.rotation_.astype(np.float64)
            if np.abs(eye - np.eye(self.d_)).max() > 1e-5:
                raise InvariantError("rotation matrix is not orthonormal")

    # -- persistence ------------------------------------------------------

    _kind = "pq"

    def _params_dict(self):
        return {
            "m": self.m,
            "b": self.b,
            "bbar": self.bbar,
            "seed": self.seed,
            "max_iters": self.max_iters,
        }

    def _serialize(self):
        check_is_fitted(self, "codebooks_")
        arrays = {
            "codebooks": self.codebooks_,
            "derived_codebooks": self.derived_codebooks_,
            "derived_assignments": self.derived_assignments_,
            "distortions": self.distortions_,
        }
        if self.rotation_ is not None:
            arrays["rotation"] = self.rotation_
        return self._kind, self._params_dict(), arrays

    @classmethod
    def _deserialize(cls, params, arrays):
        model = cls(**params)
        model.codebooks_ = arrays["codebooks"]
        model.derived_codebooks_ = arrays["derived_codebooks"]
        model.derived_assignments_ = arrays["derived_assignments"]
        model.distortions_ = arrays["distortions"]
        model.rotation_ = arrays.get("rotation")
        m, k, dsub = model.codebooks_.shape
        model.d_ = m * dsub
        model.dsub_ = dsub
        model.k_ = k
        model.kbar_ = model.derived_codebooks_.shape[1]
        model.bbar_ = int(model.kbar_).bit_length() - 1
        model.code_dtype_ = np.uint8 if model.b <= 8 else np.uint16
        return model


class OptimizedProductQuantizer(ProductQuantizer):
    """Product quantizer with a learned orthonormal rotation.

    Alternates between re-training codebooks on rotated data and solving
    for the best rotation given the current reconstructions (orthogonal
    Procrustes via SVD). Each step is non-increasing in training
    reconstruction error, so the final model is at least as good as the
    plain product quantizer it starts from. outer_iters=0 degenerates to
    ProductQuantizer exactly.
    """

    _kind = "opq"

    def __init__(
        self,
        m: int = 8,
        b: int = 8,
        bbar=None,
        seed: int = 42,
        max_iters: int = 50,
        outer_iters: int = 10,
        inner_iters: int = 10,
    ):
        super().__init__(m=m, b=b, bbar=bbar, seed=seed, max_iters=max_iters)
        self.outer_iters = outer_iters
        self.inner_iters = inner_iters

    def fit(self, X, y=None):
        X = self._check_fit_input(X)
        codebooks, distortions = self._train_codebooks(X)
        rotation = None
        rotated = X
        for _ in range(self.outer_iters):
            codes = _encode_with(rotated, codebooks)
            recon = _decode_with(codes, codebooks)
            cross = X.T.astype(np.float64) @ recon.astype(np.float64)
            u, _, vt = np.linalg.svd(cross)
            rotation = (u @ vt).astype(np.float32)
            rotated = X @ rotation
            codebooks, distortions = self._train_codebooks(
                rotated, init=codebooks, max_iters=self.inner_iters
            )
        self.rotation_ = rotation
        self._finalize(codebooks, distortions)
        return self

    def _params_dict(self):
        params = super()._params_dict()
        params["outer_iters"] = self.outer_iters
        params["inner_iters"] = self.inner_iters
        return params
