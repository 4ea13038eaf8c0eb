"""Dense float64 linear algebra, damped SPD solves, and splittable counter-based RNG.

Everything downstream builds on three guarantees made here:

* all numeric buffers are contiguous float64 ndarrays (the universal value
  carrier for images, parameters, and gradients),
* solves against symmetric positive definite matrices are damped and report
  the failing pivot on breakdown so callers can escalate,
* random draws are pure functions of an explicit (seed, stream) state, so any
  consumer can own an independent, reproducible stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg.lapack import dpotrf, dpotrs


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class FactorizationError(ArithmeticError):
    """Cholesky factorization hit a non-positive pivot.

    ``pivot`` is the 0-based index of the first failing diagonal entry;
    callers may retry with a larger damping value.
    """

    def __init__(self, pivot: int, damping: float):
        self.pivot = pivot
        self.damping = damping
        super().__init__(
            f"matrix not positive definite at pivot {pivot} (damping={damping:g})"
        )


class EmptyDrawError(ValueError):
    """A random draw of zero elements was requested."""


def as_f64(x, name: str = "array") -> np.ndarray:
    """Return ``x`` as a contiguous float64 ndarray, rejecting non-finite entries."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product of two rank-2 arrays.

    Accumulation happens in float64 via BLAS (blocked/pairwise summation),
    which keeps long inner products well below the 1e-12 oracle tolerance
    used in the test suite.
    """
    a = as_f64(a, "a")
    b = as_f64(b, "b")
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def cholesky_solve(a, damping: float, b) -> np.ndarray:
    """Solve ``(a + damping*I) x = b`` for symmetric ``a`` via Cholesky.

    ``a`` is symmetrized first (cheap, and makes the factorization
    insensitive to 1e-16-level asymmetry from accumulated outer products).
    Raises :class:`FactorizationError` with the failing pivot index when the
    damped matrix is not positive definite.
    """
    a = as_f64(a, "a")
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected square matrix, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise DimensionError(f"rhs length {b.shape[0]} != matrix dim {a.shape[0]}")
    if damping < 0:
        raise ValueError(f"damping must be >= 0, got {damping}")

    m = 0.5 * (a + a.T)
    if damping:
        m = m + damping * np.eye(a.shape[0])
    c, info = dpotrf(m, lower=1, overwrite_a=1)
    if info > 0:
        raise FactorizationError(pivot=info - 1, damping=damping)
    if info < 0:
        raise ValueError(f"illegal value in argument {-info} of dpotrf")
    x, info = dpotrs(c, b, lower=1)
    if info != 0:
        raise ValueError(f"dpotrs failed with info={info}")
    return x


_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngState:
    """Immutable handle for a counter-based (Philox) random stream.

    Draws are pure functions of the state: calling :func:`draw_gaussian`
    twice with the same state returns the same vector. Sequential
    non-repeating randomness is obtained by deriving child states with
    :meth:`split` or :meth:`derive`, never by mutation.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def split(self, n: int) -> list["RngState"]:
        """Derive ``n`` statistically independent child states."""
        if n < 1:
            raise ValueError("split needs n >= 1")
        return [
            RngState(self.seed, _splitmix64(self.stream ^ ((i + 1) * _GOLDEN & _MASK64)))
            for i in range(n)
        ]

    def derive(self, label: str) -> "RngState":
        """Derive a child state named by ``label`` (stable across runs)."""
        h = 0
        for ch in label.encode("utf-8"):
            h = _splitmix64(h ^ ch)
        return RngState(self.seed, _splitmix64(self.stream ^ h))


def draw_gaussian(rng: RngState, n: int) -> np.ndarray:
    """Standard normal vector of length ``n``, deterministic in ``rng``."""
    if n < 1:
        raise EmptyDrawError("gaussian draw of zero elements")
    return rng.generator().standard_normal(n)


def draw_rademacher(rng: RngState, n: int) -> np.ndarray:
    """Vector of +-1 entries of length ``n``, deterministic in ``rng``."""
    if n < 1:
        raise EmptyDrawError("rademacher draw of zero elements")
    g = rng.generator()
    return g.integers(0, 2, size=n).astype(np.float64) * 2.0 - 1.0
