"""Shared numerics: the ellipse map, Cholesky factors and seeded Gaussian draws.

Gaussian variates come from numpy's ziggurat sampler
(``Generator.standard_normal``) on a PCG64 bit generator. A stream is
identified by ``(root_seed, stream_id)``; the pair is mixed by numpy's
``SeedSequence`` hash (``entropy=root_seed, spawn_key=(stream_id,)``), so
every stream is reproducible on its own and independent of scheduling.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import lapack, solve_triangular


class ContractError(ValueError):
    """An argument violates an operation's precondition."""


class CholeskyError(np.linalg.LinAlgError):
    """Raised when a covariance matrix is not positive definite."""

    def __init__(self, pivot: int):
        self.pivot = pivot
        super().__init__(f"matrix is not positive definite (pivot {pivot} failed)")


def ellipse_point(x: np.ndarray, w: np.ndarray, theta: float) -> np.ndarray:
    """Return ``cos(theta) * x + sin(theta) * w``."""
    if x.shape != w.shape:
        raise ContractError(f"dimension mismatch: {x.shape} vs {w.shape}")
    return math.cos(theta) * x + math.sin(theta) * w


class CovarianceFactor:
    """Lower-triangular ``L`` with ``C = L @ L.T``.

    Diagonal factors are kept as a vector so that the hot paths
    (``apply``, ``quad_inv``) avoid dense matrix work.
    """

    def __init__(self, lower: np.ndarray):
        lower = np.asarray(lower, dtype=float)
        if lower.ndim != 2 or lower.shape[0] != lower.shape[1]:
            raise ContractError("factor must be a square matrix")
        diag = np.diag(lower)
        if not np.all(diag > 0):
            raise ContractError("factor needs a strictly positive diagonal")
        self.lower = np.tril(lower)
        self.dim = lower.shape[0]
        self._diag = diag.copy() if np.count_nonzero(np.tril(lower, -1)) == 0 else None
        self._unit = self._diag is not None and bool(np.all(self._diag == 1.0))

    @classmethod
    def identity(cls, dim: int) -> "CovarianceFactor":
        return cls(np.eye(dim))

    @classmethod
    def scaled_identity(cls, dim: int, variance: float) -> "CovarianceFactor":
        return cls(math.sqrt(variance) * np.eye(dim))

    @property
    def is_diagonal(self) -> bool:
        return self._diag is not None

    @property
    def is_isotropic(self) -> bool:
        return self._diag is not None and bool(np.all(self._diag == self._diag[0]))

    def covariance(self) -> np.ndarray:
        return self.lower @ self.lower.T

    def scaled(self, variance_factor: float) -> "CovarianceFactor":
        """Factor of ``variance_factor * C``."""
        return CovarianceFactor(math.sqrt(variance_factor) * self.lower)

    def apply(self, z: np.ndarray) -> np.ndarray:
        if self._unit:
            return z
        if self._diag is not None:
            return self._diag * z
        return self.lower @ z

    def whiten(self, x: np.ndarray) -> np.ndarray:
        """Solve ``L u = x``."""
        if self._unit:
            return x
        if self._diag is not None:
            return x / self._diag
        return solve_triangular(self.lower, x, lower=True)

    def quad_inv(self, x: np.ndarray) -> float:
        """``x^T C^{-1} x`` via a triangular solve."""
        u = self.whiten(x)
        return float(u @ u)

    def __repr__(self) -> str:
        return f"CovarianceFactor(dim={self.dim}, diagonal={self.is_diagonal})"


def cholesky(cov: np.ndarray) -> CovarianceFactor:
    """Cholesky factor of a symmetric positive definite matrix.

    Raises :class:`CholeskyError` carrying the (0-based) index of the first
    pivot that is not positive.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1]:
        raise ContractError("covariance must be square")
    if not np.allclose(cov, cov.T, rtol=1e-12, atol=1e-14):
        raise ContractError("covariance must be symmetric")
    lower, info = lapack.dpotrf(cov, lower=1, clean=1)
    if info > 0:
        raise CholeskyError(info - 1)
    if info < 0:
        raise ContractError(f"invalid argument {-info} to dpotrf")
    return CovarianceFactor(lower)


class RngStream:
    """A seeded random stream owned by a single chain or task."""

    def __init__(self, root_seed: int, stream_id: int = 0):
        if not (0 <= root_seed < 2**64 and 0 <= stream_id < 2**64):
            raise ContractError("root_seed and stream_id must be unsigned 64-bit integers")
        self.root_seed = int(root_seed)
        self.stream_id = int(stream_id)
        seq = np.random.SeedSequence(entropy=self.root_seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def standard_normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        return self.generator.uniform(low, high)

    def uniform_open_left(self) -> float:
        """Uniform on (0, 1]; safe to take the log of."""
        return 1.0 - self.generator.random()

    def unit_vector(self, dim: int) -> np.ndarray:
        v = self.generator.standard_normal(dim)
        return v / math.sqrt(v @ v)

    def __repr__(self) -> str:
        return f"RngStream(root_seed={self.root_seed}, stream_id={self.stream_id})"


def sample_gaussian(factor: CovarianceFactor, rng: RngStream) -> np.ndarray:
    """Draw from N(0, C) as ``L @ z`` with ``z`` standard normal."""
    return factor.apply(rng.standard_normal(factor.dim))
