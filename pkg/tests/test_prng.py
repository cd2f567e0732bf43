"""Keyed matrix generation tests: hash vectors, stream statistics,
column order, orthonormalization, and frozen golden outputs."""

import numpy as np
import pytest

from biopreimage import (
    SeedError,
    SplitMix64,
    derive_matrix,
    derive_seed,
    fnv1a64,
    gram_schmidt,
    matrix_digest,
)
from biopreimage.prng import FNV_OFFSET_BASIS


class TestHashing:
    def test_fnv1a64_vectors(self):
        # published reference values for 64-bit FNV-1a
        assert fnv1a64(b"") == FNV_OFFSET_BASIS
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8

    def test_derive_seed_str_bytes_equivalent(self):
        assert derive_seed("hunter2") == derive_seed(b"hunter2")

    def test_derive_seed_rejects_empty(self):
        with pytest.raises(SeedError):
            derive_seed("")
        with pytest.raises(SeedError):
            derive_seed(b"")

    def test_distinct_passwords_distinct_seeds(self):
        seeds = {derive_seed(f"pw-{i}") for i in range(500)}
        assert len(seeds) == 500


class TestSplitMix64:
    def test_deterministic(self):
        a = SplitMix64(12345)
        b = SplitMix64(12345)
        assert [a.next_u64() for _ in range(10)] == [b.next_u64() for _ in range(10)]

    def test_uniform_range(self):
        s = SplitMix64(999)
        draws = np.array([s.next_uniform() for _ in range(10_000)])
        assert draws.min() >= -0.5
        assert draws.max() < 0.5

    def test_uniform_moments(self):
        s = SplitMix64(42)
        draws = np.array([s.next_uniform() for _ in range(50_000)])
        assert abs(draws.mean()) < 0.01
        assert abs(draws.var() - 1.0 / 12.0) < 0.005

    def test_next_byte_range(self):
        s = SplitMix64(7)
        vals = [s.next_byte() for _ in range(2000)]
        assert min(vals) >= 0 and max(vals) <= 255
        assert len(set(vals)) > 200

    def test_fill_column_matches_scalar_stream(self):
        col = SplitMix64(31337).fill_column(16)
        s = SplitMix64(31337)
        assert np.array_equal(col, [s.next_uniform() for _ in range(16)])


class TestDeriveMatrix:
    def test_shape_and_range(self):
        mat = derive_matrix("pw", 7, 5)
        assert mat.shape == (7, 5)
        assert (mat >= -0.5).all() and (mat < 0.5).all()

    def test_read_only(self):
        mat = derive_matrix("pw", 3, 3)
        with pytest.raises(ValueError):
            mat[0, 0] = 0.0

    def test_column_major_fill(self):
        # the first column consumes the first n stream draws
        mat = derive_matrix("column-check", 5, 3)
        s = SplitMix64(derive_seed("column-check"))
        assert np.array_equal(mat[:, 0], [s.next_uniform() for _ in range(5)])
        assert np.array_equal(mat[:, 1], [s.next_uniform() for _ in range(5)])

    def test_deterministic(self):
        assert np.array_equal(derive_matrix("pw", 6, 4), derive_matrix("pw", 6, 4))

    def test_distinct_passwords_fuzz(self):
        mats = [derive_matrix(f"k{i}", 4, 4) for i in range(100)]
        digests = {matrix_digest(m) for m in mats}
        assert len(digests) == 100

    def test_rejects_bad_dims(self):
        with pytest.raises(SeedError):
            derive_matrix("pw", 0, 4)
        with pytest.raises(SeedError):
            derive_matrix("pw", 4, 0)

    def test_golden_entries(self):
        mat = derive_matrix("golden-password", 4, 3)
        want_col0 = [
            -0.4376287067387634,
            0.45305227129039993,
            -0.032874586839024,
            0.4326307618543208,
        ]
        assert np.allclose(mat[:, 0], want_col0, rtol=0, atol=0)

    def test_golden_digest(self):
        mat = derive_matrix("golden-password", 4, 3)
        assert matrix_digest(mat) == 0xCEF07648CE7A8314

    def test_digest_sensitive_to_entries(self):
        mat = derive_matrix("pw", 4, 3)
        bumped = mat.copy()
        bumped[2, 1] += 1e-12
        assert matrix_digest(bumped) != matrix_digest(mat)


class TestGramSchmidt:
    def test_orthonormal_output(self):
        rng = np.random.default_rng(1)
        cols = rng.uniform(-0.5, 0.5, size=(20, 8))
        q = gram_schmidt(cols)
        assert np.abs(q.T @ q - np.eye(8)).max() < 1e-9

    def test_span_preserved(self):
        rng = np.random.default_rng(2)
        cols = rng.uniform(-0.5, 0.5, size=(10, 4))
        q = gram_schmidt(cols)
        # projecting the original columns onto the Q basis reconstructs them
        back = q @ (q.T @ cols)
        assert np.allclose(back, cols, atol=1e-9)

    def test_degenerate_column_regenerated(self):
        cols = np.zeros((4, 2))
        cols[:, 0] = [1.0, 0, 0, 0]
        cols[:, 1] = [2.0, 0, 0, 0]  # linearly dependent on the first
        fresh = iter([np.array([0.0, 1.0, 0, 0])])

        def regenerate():
            return next(fresh).copy()

        q = gram_schmidt(cols, regenerate=regenerate)
        assert np.abs(q.T @ q - np.eye(2)).max() < 1e-12

    def test_degenerate_without_regenerator_raises(self):
        cols = np.ones((3, 2))
        with pytest.raises(SeedError):
            gram_schmidt(cols)

    def test_orthonormalized_matrix(self):
        mat = derive_matrix("ortho-pw", 30, 6, orthonormalize=True)
        assert np.abs(mat.T @ mat - np.eye(6)).max() < 1e-9

    def test_orthonormalized_golden_digest(self):
        mat = derive_matrix("golden-password", 4, 3, orthonormalize=True)
        assert matrix_digest(mat) == 0x5D0DE64EF0DDF54F

    def test_rejects_m_exceeding_n(self):
        with pytest.raises(SeedError):
            derive_matrix("pw", 3, 4, orthonormalize=True)
