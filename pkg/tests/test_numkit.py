import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idforge.errors import (
    ConfigError,
    DomainError,
    FactorizationError,
    InsufficientDataError,
    ShapeError,
)
from idforge.numkit import (
    GaussianModel,
    RngState,
    as_matrix,
    as_vector,
    cholesky,
    cosine_similarity,
    covariance_of,
    max_similarity_blocked,
    mvn_sample,
    row_norms,
)


# ---------------------------------------------------------------- RngState


def test_rng_state_validation():
    with pytest.raises(ConfigError):
        RngState(-1)
    with pytest.raises(ConfigError):
        RngState(1 << 64)
    with pytest.raises(ConfigError):
        RngState(0, stream=-5)


def test_derive_stream_arithmetic():
    # stream' = stream XOR ((lane << 40) | index); frozen by hand:
    # (3 << 40) | 7 = 3298534883335
    assert RngState(5, 0).derive(3, 7).stream == 3298534883335
    assert RngState(5, 0).derive(3, 7).seed == 5
    # deriving twice with the same coordinates is idempotent on inputs
    assert RngState(5, 0).derive(3, 7) == RngState(5, 0).derive(3, 7)


def test_derive_rejects_out_of_range():
    with pytest.raises(ConfigError):
        RngState(0).derive(1 << 24, 0)
    with pytest.raises(ConfigError):
        RngState(0).derive(0, 1 << 40)
    with pytest.raises(ConfigError):
        RngState(0).derive(-1, 0)


def test_generator_streams_disjoint_and_reproducible():
    a1 = RngState(9, 1).generator().standard_normal(8)
    a2 = RngState(9, 1).generator().standard_normal(8)
    b = RngState(9, 2).generator().standard_normal(8)
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, b)


def test_standard_normal_partition_invariance():
    """Draws must not depend on how a batch is split (counter-based bit
    stream, row-major fill) -- the sampler's batch independence rests on
    this."""
    whole = RngState(123, 7).generator().standard_normal((10, 4))
    gen = RngState(123, 7).generator()
    first = gen.standard_normal((3, 4))
    second = gen.standard_normal((7, 4))
    np.testing.assert_array_equal(whole, np.vstack([first, second]))


# ----------------------------------------------------------- conversions


def test_as_vector_rejects_bad_input():
    with pytest.raises(ShapeError):
        as_vector(np.zeros((2, 2)))
    with pytest.raises(DomainError):
        as_vector([1.0, np.nan])
    with pytest.raises(DomainError):
        as_matrix([[1.0, np.inf]])
    out = as_vector([1, 2, 3])
    assert out.dtype == np.float64 and out.flags["C_CONTIGUOUS"]


# ------------------------------------------------------------- cosine


def test_cosine_known_values():
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine_similarity([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1 / math.sqrt(2))
    assert cosine_similarity([1.0, 2.0], [-1.0, -2.0]) == pytest.approx(-1.0, abs=1e-15)


def test_cosine_stays_in_domain():
    rng = np.random.default_rng(3)
    for _ in range(20):
        v = rng.standard_normal(17) * 10
        s = cosine_similarity(v, v)
        assert -1.0 <= s <= 1.0  # clipped, never 1 + eps
        assert s == pytest.approx(1.0, abs=4e-15)


def test_cosine_errors():
    with pytest.raises(DomainError):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ShapeError):
        cosine_similarity([1.0], [1.0, 2.0])


# ------------------------------------------------- max_similarity_blocked


def _naive_max_similarity(rows, query):
    best, best_i = -1.0, None
    qn = np.linalg.norm(query)
    for i, row in enumerate(rows):
        s = float(np.dot(row, query) / (np.linalg.norm(row) * qn))
        if s > best or best_i is None:
            best, best_i = s, i
    return best, best_i


def test_max_similarity_empty():
    assert max_similarity_blocked(np.ones(4), np.empty((0, 4))) == (-1.0, None)


def test_max_similarity_tie_keeps_first():
    rows = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    value, index = max_similarity_blocked(np.array([3.0, 0.0]), rows)
    assert value == 1.0 and index == 0


@settings(deadline=None, max_examples=60)
@given(
    n=st.integers(1, 40),
    d=st.integers(1, 8),
    block=st.integers(1, 16),
    seed=st.integers(0, 2**16),
)
def test_max_similarity_matches_naive(n, d, block, seed):
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((n, d))
    rows[np.linalg.norm(rows, axis=1) == 0.0] = 1.0  # no zero rows
    query = rng.standard_normal(d)
    if np.linalg.norm(query) == 0.0:
        query[0] = 1.0
    got = max_similarity_blocked(query, rows, block_rows=block)
    want = _naive_max_similarity(rows, query)
    assert got[1] == want[1]
    assert got[0] == pytest.approx(want[0], abs=1e-12)


def test_max_similarity_block_size_invariant():
    rng = np.random.default_rng(11)
    rows = rng.standard_normal((100, 16))
    query = rng.standard_normal(16)
    results = {
        max_similarity_blocked(query, rows, block_rows=b) for b in (1, 7, 64, 4096)
    }
    assert len(results) == 1  # bitwise identical across blockings


# ----------------------------------------------------------- covariance


def test_covariance_matches_numpy():
    rng = np.random.default_rng(5)
    data = rng.standard_normal((40, 6))
    mean, cov = covariance_of(data)
    np.testing.assert_allclose(mean, data.mean(axis=0), rtol=1e-15)
    np.testing.assert_allclose(cov, np.cov(data.T, ddof=1), rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(cov, cov.T)  # exactly symmetric


def test_covariance_needs_two_rows():
    with pytest.raises(InsufficientDataError):
        covariance_of(np.ones((1, 3)))


# -------------------------------------------------------------- cholesky


def test_cholesky_matches_numpy_when_pd():
    rng = np.random.default_rng(8)
    a = rng.standard_normal((5, 5))
    cov = a @ a.T + 5.0 * np.eye(5)
    np.testing.assert_array_equal(cholesky(cov), np.linalg.cholesky(cov))


def test_cholesky_jitter_ladder_recovers_singular():
    cov = np.diag([1.0, 1.0, 0.0])  # PSD but singular
    low = cholesky(cov)
    rebuilt = low @ low.T
    np.testing.assert_allclose(rebuilt, cov, atol=1e-6)


def test_cholesky_explicit_jitter():
    cov = np.diag([2.0, 2.0])
    low = cholesky(cov, jitter=0.5)
    np.testing.assert_allclose(low @ low.T, cov + 0.5 * np.eye(2), rtol=1e-12)


def test_cholesky_rejects_bad_input():
    with pytest.raises(ShapeError):
        cholesky(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        cholesky(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ConfigError):
        cholesky(np.eye(2), jitter=-1.0)
    with pytest.raises(FactorizationError):
        cholesky(np.array([[1.0, 0.0], [0.0, -5.0]]))  # ladder cannot fix


# ------------------------------------------------------------ GaussianModel


def test_gaussian_model_validation():
    chol = np.array([[1.0, 0.0], [0.5, 2.0]])
    model = GaussianModel(mean=np.zeros(2), chol=chol)
    np.testing.assert_allclose(model.covariance(), chol @ chol.T)
    with pytest.raises(ShapeError):
        GaussianModel(mean=np.zeros(2), chol=np.array([[1.0, 3.0], [0.0, 1.0]]))
    with pytest.raises(DomainError):
        GaussianModel(mean=np.zeros(2), chol=np.array([[1.0, 0.0], [0.0, -1.0]]))


# ------------------------------------------------------------- mvn_sample


def test_mvn_sample_moments_and_determinism():
    mean = np.array([1.0, -2.0, 0.5])
    a = np.array([[2.0, 0.0, 0.0], [0.3, 1.0, 0.0], [-0.2, 0.1, 0.5]])
    model = GaussianModel(mean=mean, chol=a)
    draws = mvn_sample(model, 200_000, RngState(77))
    np.testing.assert_allclose(draws.mean(axis=0), mean, atol=0.02)
    np.testing.assert_allclose(np.cov(draws.T), model.covariance(), atol=0.05)
    again = mvn_sample(model, 200_000, RngState(77))
    np.testing.assert_array_equal(draws, again)


def test_mvn_sample_accepts_generator_and_validates_count():
    model = GaussianModel(mean=np.zeros(2), chol=np.eye(2))
    gen = RngState(1).generator()
    assert mvn_sample(model, 3, gen).shape == (3, 2)
    with pytest.raises(ConfigError):
        mvn_sample(model, 0, RngState(1))


def test_row_norms_matches_numpy():
    rng = np.random.default_rng(2)
    m = rng.standard_normal((10, 5))
    np.testing.assert_allclose(row_norms(m), np.linalg.norm(m, axis=1), rtol=1e-15)
