"""Dense float64 kernels shared by the rest of the package.

Everything here is pure and operates on plain numpy arrays, so the functions
are safe to call from worker threads. Random draws use PCG64 (numpy's default
bit generator) with an explicit seed; the same seed reproduces the same bits,
which the bit-exact equivalence tests depend on.
"""

from __future__ import annotations

import numpy as np

Seed = int | np.random.SeedSequence


def as_matrix(values) -> np.ndarray:
    """Coerce input to a C-contiguous float64 2-D array."""
    m = np.ascontiguousarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check.

    Delegates to the numpy/BLAS product. A given build evaluates identical
    inputs identically from run to run, which is the determinism the
    equivalence tests rely on.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax, stabilised by subtracting each row's max."""
    m = as_matrix(m)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def frobenius_distance(a, b) -> float:
    """Frobenius norm of (a - b); shapes must match."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sqrt(np.sum(d * d)))


def gaussian(shape, sigma: float, seed: Seed) -> np.ndarray:
    """i.i.d. N(0, sigma^2) samples of the requested shape.

    sigma = 0 returns exact zeros. The draw comes from a fresh
    Generator(PCG64(seed)), so identical seeds give identical outputs.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal(shape) * float(sigma)
