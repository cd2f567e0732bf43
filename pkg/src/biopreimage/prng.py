"""Deterministic password-keyed generation of projection matrices.

The password is hashed with 64-bit FNV-1a and the result seeds a
splitmix64 stream; both recurrences are fixed here bit-for-bit so that
any reimplementation (any language) produces identical matrices.  The
generator is deliberately not cryptographic: the threat model hands the
password to the attacker anyway.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

FNV_OFFSET_BASIS = 14695981039346656037
FNV_PRIME = 1099511628211

#: Residual column norm below which a candidate direction counts as
#: linearly dependent during orthonormalization.
_DEGENERATE_NORM = 1e-12


class SeedError(ValueError):
    """Raised for unusable password or matrix dimensions."""


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash (xor byte, multiply by the FNV prime)."""
    h = FNV_OFFSET_BASIS
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & _MASK64
    return h


def _as_bytes(password: bytes | str) -> bytes:
    if isinstance(password, str):
        password = password.encode("utf-8")
    return password


def derive_seed(password: bytes | str) -> int:
    """Password bytes to 64-bit seed state. Empty passwords are refused."""
    password = _as_bytes(password)
    if not password:
        raise SeedError("password must be non-empty")
    return fnv1a64(password)


class SplitMix64:
    """splitmix64 stream: state += golden-gamma; output = mixed state.

    Owns its state; do not share one instance across concurrent
    derivations.
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def next_uniform(self) -> float:
        """Uniform draw on [-0.5, 0.5): u / 2^64 - 0.5."""
        return self.next_u64() / 18446744073709551616.0 - 0.5

    def next_byte(self) -> int:
        """Top 8 bits of the next output; unbiased uniform on [0, 255]."""
        return self.next_u64() >> 56

    def fill_column(self, n: int) -> np.ndarray:
        return np.array([self.next_uniform() for _ in range(n)], dtype=np.float64)


def gram_schmidt(columns: np.ndarray, regenerate=None) -> np.ndarray:
    """Classical Gram-Schmidt over matrix columns, re-normalized to unit
    length.

    ``regenerate``, when given, is called to supply a fresh column if the
    residual after orthogonalization is numerically zero; without it the
    degenerate case raises.
    """
    columns = np.array(columns, dtype=np.float64)
    n, m = columns.shape
    if m > n:
        raise SeedError(f"cannot orthonormalize {m} columns in dimension {n}")
    out = np.empty_like(columns)
    j = 0
    attempts = 0
    while j < m:
        v = columns[:, j].copy()
        for k in range(j):
            v -= (out[:, k] @ v) * out[:, k]
        norm = np.linalg.norm(v)
        if norm < _DEGENERATE_NORM:
            attempts += 1
            if regenerate is None or attempts > 64:
                raise SeedError("degenerate column during orthonormalization")
            columns[:, j] = regenerate()
            continue
        out[:, j] = v / norm
        j += 1
    return out


def derive_matrix(password: bytes | str, n: int, m: int, orthonormalize: bool = False) -> np.ndarray:
    """n x m projection matrix with entries uniform on [-0.5, 0.5).

    Columns are filled one at a time from the splitmix64 stream (first
    column fully before the second), so the layout is reproducible
    across implementations.  With ``orthonormalize`` the columns are
    passed through Gram-Schmidt afterwards; a linearly dependent column
    (never seen in practice) is replaced by further draws from the same
    stream.
    """
    if n < 1 or m < 1:
        raise SeedError(f"matrix dims must be positive, got {n}x{m}")
    if orthonormalize and m > n:
        raise SeedError(f"orthonormalization needs m <= n, got n={n} m={m}")
    stream = SplitMix64(derive_seed(password))
    cols = np.empty((n, m), dtype=np.float64)
    for j in range(m):
        cols[:, j] = stream.fill_column(n)
    if orthonormalize:
        cols = gram_schmidt(cols, regenerate=lambda: stream.fill_column(n))
    cols.flags.writeable = False
    return cols


def matrix_digest(matrix: np.ndarray) -> int:
    """64-bit conformance checksum of a projection matrix.

    FNV-1a over each entry rendered as a 17-significant-digit decimal
    (the shortest form that round-trips IEEE doubles), newline after
    each, taken in fill order (column by column).  Two implementations
    agree on this digest iff they produce bit-identical matrices.
    """
    h = FNV_OFFSET_BASIS
    matrix = np.asarray(matrix, dtype=np.float64)
    for j in range(matrix.shape[1]):
        for i in range(matrix.shape[0]):
            for b in format(matrix[i, j], ".17g").encode("ascii") + b"\n":
                h ^= b
                h = (h * FNV_PRIME) & _MASK64
    return h
