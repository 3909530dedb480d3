"""Product quantizer training, index packing, and the rotation variant."""

import numpy as np
import pytest

from derivedpq import (
    InvariantError,
    OptimizedProductQuantizer,
    ProductQuantizer,
)
from derivedpq.quantizer import (
    build_final_codebook,
    low_bits,
    packing_permutation,
)
from tests.conftest import gaussian_blobs


class TestLowBits:
    def test_known_values(self):
        assert low_bits(9, 2) == 1
        assert low_bits(13, 2) == 1
        assert low_bits(9, 3) == 1
        assert low_bits(7, 3) == 7
        assert low_bits(8, 3) == 0

    def test_zero_width_is_always_zero(self):
        for index in (0, 1, 17, 255, 65535):
            assert low_bits(index, 0) == 0


class TestPackingPermutation:
    def test_sixteen_centroids_four_groups(self):
        # group 1's members must land on every index whose low 2 bits are 1
        partition = [
            np.array([0, 4, 8, 12]),
            np.array([2, 6, 10, 14]),
            np.array([1, 5, 9, 13]),
            np.array([3, 7, 11, 15]),
        ]
        perm = packing_permutation(partition, 2)
        assert perm[[1, 5, 9, 13]].tolist() == [2, 6, 10, 14]
        for new_index in range(16):
            gid = new_index & 0b11
            assert perm[new_index] in partition[gid]

    def test_member_rank_fills_high_bits(self):
        partition = [np.array([3, 1]), np.array([0, 2])]
        perm = packing_permutation(partition, 1)
        # new = (rank << 1) | gid
        assert perm.tolist() == [3, 0, 1, 2]

    def test_random_balanced_partition_is_bijective(self):
        rng = np.random.default_rng(0)
        order = rng.permutation(256)
        partition = [order[g * 16 : (g + 1) * 16] for g in range(16)]
        perm = packing_permutation(partition, 4)
        assert sorted(perm.tolist()) == list(range(256))

    def test_rejects_wrong_group_count(self):
        with pytest.raises(ValueError, match="groups"):
            packing_permutation([np.array([0, 1]), np.array([2, 3])], 2)

    def test_rejects_unbalanced_groups(self):
        with pytest.raises(ValueError, match="unbalanced"):
            packing_permutation([np.array([0]), np.array([1, 2])], 1)

    def test_rejects_duplicate_membership(self):
        with pytest.raises(ValueError, match="exactly once"):
            packing_permutation([np.array([0, 0]), np.array([1, 2])], 1)

    def test_reorder_keeps_rows(self):
        rng = np.random.default_rng(1)
        temp = rng.normal(size=(8, 3)).astype(np.float32)
        partition = [np.array([5, 2]), np.array([0, 7]), np.array([1, 3]), np.array([4, 6])]
        packed = build_final_codebook(temp, partition, 2)
        assert packed.shape == temp.shape
        # same multiset of rows, new order
        a = np.array(sorted(map(tuple, packed.tolist())))
        b = np.array(sorted(map(tuple, temp.tolist())))
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(packed[0], temp[5])
        np.testing.assert_array_equal(packed[1], temp[0])


@pytest.fixture(scope="module")
def fitted_pq():
    X = gaussian_blobs(4000, 16, 24, seed=21)
    return ProductQuantizer(m=4, b=5, bbar=3, seed=0).fit(X), X


class TestProductQuantizer:
    def test_shapes_and_dtypes(self, fitted_pq):
        pq, _ = fitted_pq
        assert pq.codebooks_.shape == (4, 32, 4)
        assert pq.derived_codebooks_.shape == (4, 8, 4)
        assert pq.derived_assignments_.shape == (4, 32)
        assert pq.codebooks_.dtype == np.float32
        assert pq.code_dtype_ == np.uint8

    def test_group_id_is_low_bits_of_index(self, fitted_pq):
        pq, _ = fitted_pq
        expected = np.arange(32) & 0b111
        for j in range(4):
            np.testing.assert_array_equal(pq.derived_assignments_[j], expected)

    def test_group_membership_is_exhaustive_for_several_shapes(self):
        # every index must belong to exactly the group its low bits name
        for b, bbar in [(8, 4), (8, 8), (10, 6)]:
            k, kbar = 1 << b, 1 << bbar
            X = gaussian_blobs(max(4000, 32 * k), 8, 40, seed=b * 17 + bbar)
            pq = ProductQuantizer(m=2, b=b, bbar=bbar, seed=3).fit(X)
            expected = np.arange(k) & (kbar - 1)
            for j in range(pq.m):
                np.testing.assert_array_equal(pq.derived_assignments_[j], expected)
            pq.validate()

    def test_derived_rows_are_group_means(self, fitted_pq):
        pq, _ = fitted_pq
        for j in range(4):
            for gid in range(8):
                members = pq.codebooks_[j][np.arange(32) & 0b111 == gid]
                np.testing.assert_allclose(
                    pq.derived_codebooks_[j][gid],
                    members.astype(np.float64).mean(axis=0),
                    rtol=1e-5,
                    atol=1e-6,
                )

    def test_encode_matches_brute_force(self, fitted_pq):
        pq, X = fitted_pq
        sample = X[:64]
        codes = pq.encode(sample)
        for i, x in enumerate(sample.astype(np.float64)):
            for j in range(4):
                sub = x[j * 4 : (j + 1) * 4]
                dists = [np.sum((sub - c) ** 2) for c in pq.codebooks_[j].astype(np.float64)]
                assert codes[i, j] == int(np.argmin(dists))

    def test_centroids_encode_to_their_own_index(self, fitted_pq):
        pq, _ = fitted_pq
        # stitch full vectors whose subvectors are exact centroids
        idx = np.arange(32)
        full = np.concatenate([pq.codebooks_[j][idx] for j in range(4)], axis=1)
        codes = pq.encode(full)
        for j in range(4):
            np.testing.assert_array_equal(codes[:, j], idx)

    def test_encode_is_idempotent(self, fitted_pq):
        pq, X = fitted_pq
        codes = pq.encode(X[:128])
        again = pq.encode(pq.decode(codes))
        np.testing.assert_array_equal(codes, again)

    def test_transform_aliases_encode(self, fitted_pq):
        pq, X = fitted_pq
        np.testing.assert_array_equal(pq.transform(X[:16]), pq.encode(X[:16]))
        np.testing.assert_array_equal(
            pq.inverse_transform(pq.encode(X[:16])), pq.decode(pq.encode(X[:16]))
        )

    def test_decode_rejects_bad_codes(self, fitted_pq):
        pq, _ = fitted_pq
        with pytest.raises(ValueError):
            pq.decode(np.array([[0, 0, 0, 32]]))
        with pytest.raises(ValueError):
            pq.decode(np.zeros((2, 3), dtype=np.int64))

    def test_reconstruction_error_definition(self, fitted_pq):
        pq, X = fitted_pq
        sample = X[:200]
        recon = pq.decode(pq.encode(sample))
        expected = np.mean(np.sum((sample.astype(np.float64) - recon) ** 2, axis=1))
        assert pq.reconstruction_error(sample) == pytest.approx(expected, rel=1e-12)

    def test_bbar_defaults_to_b(self):
        X = gaussian_blobs(600, 8, 10, seed=2)
        pq = ProductQuantizer(m=2, b=4, seed=0).fit(X)
        assert pq.bbar_ == 4
        assert pq.kbar_ == pq.k_ == 16

    def test_bbar_equal_b_means_singleton_groups(self):
        X = gaussian_blobs(600, 8, 10, seed=2)
        pq = ProductQuantizer(m=2, b=4, bbar=4, seed=0).fit(X)
        # one centroid per group: the derived codebook is the full codebook
        np.testing.assert_allclose(pq.derived_codebooks_, pq.codebooks_, atol=1e-6)
        pq.validate()

    def test_validate_flags_corruption(self, fitted_pq):
        pq, _ = fitted_pq
        import copy

        broken = copy.deepcopy(pq)
        broken.derived_assignments_[2, 5] ^= 1
        with pytest.raises(InvariantError, match="subspace 2"):
            broken.validate()

    def test_refit_is_deterministic(self):
        X = gaussian_blobs(800, 8, 12, seed=4)
        a = ProductQuantizer(m=2, b=4, bbar=2, seed=9).fit(X)
        c = ProductQuantizer(m=2, b=4, bbar=2, seed=9).fit(X)
        np.testing.assert_array_equal(a.codebooks_, c.codebooks_)
        np.testing.assert_array_equal(a.derived_codebooks_, c.derived_codebooks_)

    def test_input_validation(self):
        X = np.zeros((64, 7), dtype=np.float32)
        with pytest.raises(ValueError, match="divisible"):
            ProductQuantizer(m=2, b=3).fit(X)
        with pytest.raises(ValueError):
            ProductQuantizer(m=2, b=0).fit(np.zeros((64, 8), dtype=np.float32))
        with pytest.raises(ValueError):
            ProductQuantizer(m=2, b=17).fit(np.zeros((200000, 8), dtype=np.float32))
        with pytest.raises(ValueError, match="bbar"):
            ProductQuantizer(m=2, b=4, bbar=5).fit(np.zeros((64, 8), dtype=np.float32))
        with pytest.raises(ValueError):
            # fewer training points than centroids
            ProductQuantizer(m=2, b=6).fit(np.zeros((32, 8), dtype=np.float32))

    def test_small_training_set_warns(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(40, 8)).astype(np.float32)
        with pytest.warns(UserWarning, match="small"):
            ProductQuantizer(m=2, b=5, seed=0).fit(X)

    def test_get_params_round_trip(self):
        pq = ProductQuantizer(m=4, b=5, bbar=3, seed=7, max_iters=20)
        params = pq.get_params()
        assert params["m"] == 4 and params["b"] == 5 and params["bbar"] == 3
        clone = ProductQuantizer(**params)
        assert clone.seed == 7 and clone.max_iters == 20


def random_rotation(d, seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return q.astype(np.float32)


@pytest.fixture(scope="module")
def anisotropic():
    """Blob data mixed across subspaces by a random rotation.

    Plain subspace-wise quantization suffers here; a learned rotation can
    undo the mixing.
    """
    X = gaussian_blobs(4000, 16, 32, seed=31, spread=0.02)
    return (X @ random_rotation(16, 0)).astype(np.float32)


class TestOptimizedProductQuantizer:
    def test_zero_rounds_equals_plain_pq(self):
        X = gaussian_blobs(1500, 8, 12, seed=6)
        pq = ProductQuantizer(m=2, b=4, bbar=2, seed=3).fit(X)
        opq = OptimizedProductQuantizer(m=2, b=4, bbar=2, seed=3, outer_iters=0).fit(X)
        assert opq.rotation_ is None
        np.testing.assert_array_equal(opq.codebooks_, pq.codebooks_)
        np.testing.assert_array_equal(opq.derived_codebooks_, pq.derived_codebooks_)
        np.testing.assert_array_equal(opq.encode(X[:32]), pq.encode(X[:32]))

    def test_rotation_is_orthonormal(self, anisotropic):
        opq = OptimizedProductQuantizer(m=4, b=5, bbar=3, seed=0, outer_iters=4).fit(
            anisotropic
        )
        eye = opq.rotation_.astype(np.float64).T @ opq.rotation_.astype(np.float64)
        np.testing.assert_allclose(eye, np.eye(16), atol=1e-5)
        opq.validate()

    def test_rotation_lowers_reconstruction_error(self, anisotropic):
        pq = ProductQuantizer(m=4, b=5, bbar=3, seed=0).fit(anisotropic)
        opq = OptimizedProductQuantizer(
            m=4, b=5, bbar=3, seed=0, outer_iters=8, inner_iters=10
        ).fit(anisotropic)
        assert opq.reconstruction_error(anisotropic) < 0.9 * pq.reconstruction_error(
            anisotropic
        )

    def test_decode_inverts_rotation(self, anisotropic):
        opq = OptimizedProductQuantizer(m=4, b=5, bbar=3, seed=0, outer_iters=3).fit(
            anisotropic
        )
        sample = anisotropic[:100]
        recon = opq.decode(opq.encode(sample))
        assert recon.shape == sample.shape
        # reconstructions live in the original (un-rotated) space
        err = np.mean(np.sum((sample - recon) ** 2, axis=1))
        assert err == pytest.approx(opq.reconstruction_error(sample), rel=1e-6)

    def test_group_structure_survives_rotation_training(self, anisotropic):
        opq = OptimizedProductQuantizer(m=4, b=5, bbar=2, seed=1, outer_iters=3).fit(
            anisotropic
        )
        expected = np.arange(32) & 0b11
        for j in range(4):
            np.testing.assert_array_equal(opq.derived_assignments_[j], expected)
