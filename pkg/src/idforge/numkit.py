"""Deterministic numerical kernels.

Everything here is pure and safe to share across threads. Dot products
and row norms go through ``np.einsum``, whose per-row reduction order
does not depend on how many rows sit in the block; that is what makes
the blocked scans bitwise-reproducible for any block size (BLAS gemv is
not stable that way). All in-memory math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DomainError,
    FactorizationError,
    InsufficientDataError,
    ShapeError,
)

DEFAULT_BLOCK_ROWS = 4096

_U64 = 2**64


@dataclass(frozen=True)
class RngState:
    """Seed plus stream id for a counter-based (Philox) generator.

    Identical (seed, stream) always reproduces the same sample sequence;
    distinct streams are statistically independent, which lets parallel
    workers draw reproducibly regardless of scheduling.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        for name, value in (("seed", self.seed), ("stream", self.stream)):
            if not 0 <= value < _U64:
                raise ConfigError(f"RngState.{name} must be an unsigned 64-bit int, got {value}")

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def derive(self, lane: int, index: int = 0) -> "RngState":
        """Child state for worker `index` in namespace `lane`.

        Distinct (lane, index) pairs map to distinct streams as long as
        index < 2**40 and lane < 2**24.
        """
        if not 0 <= lane < 2**24:
            raise ConfigError(f"lane must be in [0, 2**24), got {lane}")
        if not 0 <= index < 2**40:
            raise ConfigError(f"index must be in [0, 2**40), got {index}")
        return RngState(self.seed, self.stream ^ ((lane << 40) | index))


@dataclass(frozen=True)
class GaussianModel:
    """Mean vector plus lower-triangular Cholesky factor of a covariance.

    The zero factor is allowed (degenerate distribution); factors coming
    out of :func:`cholesky` always have a strictly positive diagonal.
    """

    mean: np.ndarray
    chol: np.ndarray

    def __post_init__(self):
        mean = as_vector(self.mean, name="mean")
        chol = np.ascontiguousarray(np.asarray(self.chol, dtype=np.float64))
        if chol.ndim != 2 or chol.shape[0] != chol.shape[1]:
            raise ShapeError(f"chol must be square, got shape {chol.shape}")
        if chol.shape[0] != mean.shape[0]:
            raise ShapeError(
                f"chol is {chol.shape[0]}x{chol.shape[0]} but mean has length {mean.shape[0]}"
            )
        if np.any(np.triu(chol, k=1) != 0.0):
            raise ShapeError("chol has nonzero entries above the diagonal")
        if np.any(np.diag(chol) < 0.0):
            raise DomainError("chol has negative diagonal entries")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "chol", chol)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def covariance(self) -> np.ndarray:
        return self.chol @ self.chol.T


def as_vector(v, *, name: str = "vector") -> np.ndarray:
    """Validate and return a finite 1-D float64 array."""
    arr = np.ascontiguousarray(np.asarray(v, dtype=np.float64))
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ShapeError(f"{name} must have positive length")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite entries")
    return arr


def as_matrix(m, *, name: str = "matrix") -> np.ndarray:
    """Validate and return a finite 2-D float64 array (C order)."""
    arr = np.ascontiguousarray(np.asarray(m, dtype=np.float64))
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[1] == 0:
        raise ShapeError(f"{name} must have positive width")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite entries")
    return arr


def vector_norm(v: np.ndarray) -> float:
    return float(np.sqrt(np.einsum("j,j->", v, v)))


def row_norms(m: np.ndarray) -> np.ndarray:
    """Euclidean norm of each row, bitwise-stable under row blocking."""
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clipped to [-1, 1].

    Raises DomainError for zero-norm inputs and ShapeError on length
    mismatch. Symmetric in its arguments.
    """
    a = as_vector(a, name="a")
    b = as_vector(b, name="b")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = vector_norm(a)
    nb = vector_norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine similarity undefined for zero vectors")
    sim = np.einsum("j,j->", a, b) / (na * nb)
    return float(min(1.0, max(-1.0, sim)))


def max_similarity_blocked(
    candidate,
    pool: np.ndarray,
    pool_norms: np.ndarray | None = None,
    block_rows: int = DEFAULT_BLOCK_ROWS,
):
    """Maximum cosine similarity of `candidate` against every pool row.

    Returns ``(max_sim, argmax_index)``; ``(-1.0, None)`` for an empty
    pool. Ties break to the lowest index. The scan visits rows in blocks
    of `block_rows`; the result is bitwise identical for every block
    size because each row's reduction is independent.
    """
    cand = as_vector(candidate, name="candidate")
    pool = np.asarray(pool, dtype=np.float64)
    if pool.ndim != 2:
        raise ShapeError(f"pool must be 2-D, got shape {pool.shape}")
    n = pool.shape[0]
    if n == 0:
        return -1.0, None
    if pool.shape[1] != cand.shape[0]:
        raise ShapeError(f"pool dim {pool.shape[1]} != candidate dim {cand.shape[0]}")
    cn = vector_norm(cand)
    if cn == 0.0:
        raise DomainError("candidate has zero norm")
    if pool_norms is None:
        pool_norms = row_norms(pool)
    if np.any(pool_norms == 0.0):
        raise DomainError("pool contains zero-norm rows")

    best = -np.inf
    best_i = 0
    for start in range(0, n, block_rows):
        stop = min(start + block_rows, n)
        sims = np.einsum("ij,j->i", pool[start:stop], cand)
        sims /= pool_norms[start:stop] * cn
        np.clip(sims, -1.0, 1.0, out=sims)
        i = int(np.argmax(sims))
        if sims[i] > best:
            best = float(sims[i])
            best_i = start + i
    return best, best_i


def covariance_of(data):
    """Column mean and unbiased (n-1) sample covariance of the rows."""
    data = as_matrix(data, name="data")
    n = data.shape[0]
    if n < 2:
        raise InsufficientDataError(f"covariance needs at least 2 rows, got {n}")
    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / (n - 1)
    cov = 0.5 * (cov + cov.T)  # exact symmetry for downstream factorization
    return mean, cov


def cholesky(cov, jitter: float = 0.0, max_retries: int = 3) -> np.ndarray:
    """Lower-triangular L with L @ L.T == cov + jitter * I.

    If factorization fails, the jitter escalates geometrically: starting
    at 1e-10 * trace/k when the request was 0, then x10 per retry, up to
    `max_retries` extra attempts. Raises FactorizationError when the
    ladder is exhausted.
    """
    cov = as_matrix(cov, name="cov")
    k = cov.shape[0]
    if cov.shape[1] != k:
        raise ShapeError(f"cov must be square, got shape {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=1e-8, atol=0.0):
        raise ShapeError("cov must be symmetric")
    if jitter < 0.0:
        raise ConfigError(f"jitter must be >= 0, got {jitter}")

    base = 1e-10 * float(np.trace(cov)) / k
    attempt = jitter
    for retry in range(max_retries + 1):
        try:
            if attempt == 0.0:
                return np.linalg.cholesky(cov)
            return np.linalg.cholesky(cov + attempt * np.eye(k))
        except np.linalg.LinAlgError:
            if attempt == 0.0:
                attempt = base
            else:
                attempt *= 10.0
            if attempt == 0.0:
                break  # zero trace: escalation cannot help
    raise FactorizationError(
        f"matrix not positive definite after jitter ladder (last jitter {attempt:g})"
    )


def mvn_sample(model: GaussianModel, count: int, rng) -> np.ndarray:
    """Draw `count` rows of mean + chol @ z with z standard normal.

    `rng` is an RngState (fresh generator, fully deterministic) or an
    np.random.Generator to consume from an existing stream.

    The product uses einsum rather than BLAS GEMM: GEMM rounding varies
    with the row-block shape, while einsum reduces each output element
    in a fixed order, so a stream of draws is bitwise identical no
    matter how it is split into batches. ~9x slower than GEMM, which is
    acceptable for a sampling front end; downstream scans stay on the
    fast path.
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    gen = rng.generator() if isinstance(rng, RngState) else rng
    z = gen.standard_normal((count, model.dim))
    return model.mean + np.einsum("ij,kj->ik", z, model.chol)
