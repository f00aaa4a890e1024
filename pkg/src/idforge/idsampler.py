"""Rejection-filtered identity sampling.

Candidates stream from the latent Gaussian in draw order; each is kept
iff its cosine similarity to every previously kept vector is <= tau
(greedy, first-come). Batching is purely an accelerator: candidates are
scored against the pool with chunked matrix products, but admission
decisions run strictly sequentially in stream order, and any score
within ``RECHECK_MARGIN`` of tau is re-derived with the exact per-row
einsum kernel. Since the dense-product error is orders of magnitude
below that margin, the kept set is identical to the one-at-a-time
algorithm for every batch size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ExhaustionError, ShapeError
from .formats import read_idv, write_idv
from .numkit import RngState, as_vector, max_similarity_blocked, row_norms, vector_norm
from .pca import LatentGaussian, PcaModel, sample_feature_vectors

RECHECK_MARGIN = 1e-9  # dense-product scores this close to tau get an exact rescore
POOL_CHUNK_ROWS = 16384
_U64 = 2**64


@dataclass(frozen=True)
class SamplerConfig:
    """Target count, similarity ceiling, batching, and draw budget."""

    n: int
    tau: float = 0.3
    candidate_batch: int = 4096
    max_candidates: int | None = None  # None -> 20 * n
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        # tau == 0 is admitted so an impossible constraint surfaces as
        # exhaustion (only orthogonal candidates would ever pass).
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError(f"tau must be in [0, 1), got {self.tau}")
        if self.candidate_batch < 1:
            raise ConfigError(f"candidate_batch must be >= 1, got {self.candidate_batch}")
        if self.max_candidates is None:
            object.__setattr__(self, "max_candidates", 20 * self.n)
        if self.max_candidates < self.n:
            raise ConfigError(
                f"max_candidates ({self.max_candidates}) must be >= n ({self.n})"
            )
        if not 0 <= self.seed < _U64:
            raise ConfigError(f"seed must be an unsigned 64-bit int, got {self.seed}")


class IdentityPool:
    """Kept vectors in admission order, with cached norms and counters.

    Rows live contiguously in a geometrically grown buffer; ``vectors``
    and ``norms`` are read-only snapshot views over the admitted prefix,
    safe to hand to scan workers while admission continues.
    """

    def __init__(self, dim: int, tau: float | None = None):
        if dim < 1:
            raise ConfigError(f"dim must be >= 1, got {dim}")
        self.dim = dim
        self.tau = tau
        self.accepted = 0
        self.rejected = 0
        self._buf = np.empty((256, dim), dtype=np.float64)
        self._norm_buf = np.empty(256, dtype=np.float64)

    @property
    def vectors(self) -> np.ndarray:
        view = self._buf[: self.accepted]
        view.flags.writeable = False
        return view

    @property
    def norms(self) -> np.ndarray:
        view = self._norm_buf[: self.accepted]
        view.flags.writeable = False
        return view

    @property
    def rejection_rate(self) -> float:
        examined = self.accepted + self.rejected
        return self.rejected / examined if examined else 0.0

    def _reserve(self, extra: int):
        need = self.accepted + extra
        cap = self._buf.shape[0]
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        buf = np.empty((cap, self.dim), dtype=np.float64)
        buf[: self.accepted] = self._buf[: self.accepted]
        norms = np.empty(cap, dtype=np.float64)
        norms[: self.accepted] = self._norm_buf[: self.accepted]
        self._buf = buf
        self._norm_buf = norms

    def _append_rows(self, rows: np.ndarray, norms: np.ndarray):
        self._reserve(rows.shape[0])
        stop = self.accepted + rows.shape[0]
        self._buf[self.accepted : stop] = rows
        self._norm_buf[self.accepted : stop] = norms
        self.accepted = stop


def admit(pool: IdentityPool, candidate, tau: float) -> bool:
    """Keep `candidate` iff its max similarity to the pool is <= tau."""
    cand = as_vector(candidate, name="candidate")
    if cand.shape[0] != pool.dim:
        raise ShapeError(f"candidate dim {cand.shape[0]} != pool dim {pool.dim}")
    norm = vector_norm(cand)
    if norm == 0.0:
        raise DomainError("candidate has zero norm")
    best, _ = max_similarity_blocked(cand, pool.vectors, pool.norms)
    pool.tau = tau
    if best <= tau:
        pool._append_rows(cand.reshape(1, -1), np.array([norm]))
        return True
    pool.rejected += 1
    return False


def _admit_batch(pool: IdentityPool, cands: np.ndarray, tau: float, need: int) -> int:
    """Sequentially admit a batch; stops once `need` more rows are kept.

    Returns how many candidates were examined. Pool-prefix scores come
    from chunked dense products, intra-batch scores from one gram
    product; borderline scores are re-derived exactly.
    """
    b = cands.shape[0]
    cn = row_norms(cands)
    m0 = pool.accepted
    prefix = pool.vectors  # snapshot as of batch start
    prefix_norms = pool.norms

    zero = cn == 0.0
    safe_cn = np.where(zero, 1.0, cn)
    best_prefix = np.full(b, -np.inf)
    for start in range(0, m0, POOL_CHUNK_ROWS):
        stop = min(start + POOL_CHUNK_ROWS, m0)
        scores = cands @ prefix[start:stop].T
        scores /= safe_cn[:, None]
        scores /= prefix_norms[start:stop][None, :]
        best_prefix = np.maximum(best_prefix, scores.max(axis=1))
    gram = cands @ cands.T
    gram /= safe_cn[:, None]
    gram /= safe_cn[None, :]

    kept: list[int] = []
    taken = 0
    for j in range(b):
        if zero[j]:
            pool.rejected += 1
            continue
        best = best_prefix[j] if m0 else -np.inf
        if kept:
            best = max(best, gram[j, kept].max())
        if abs(best - tau) <= RECHECK_MARGIN:
            exact_prefix, _ = max_similarity_blocked(cands[j], prefix, prefix_norms)
            best = exact_prefix
            if kept:
                local, _ = max_similarity_blocked(cands[j], cands[kept], cn[kept])
                best = max(best, local)
        if best <= tau:
            kept.append(j)
            if len(kept) == need:
                taken = j + 1
                break
        else:
            pool.rejected += 1
    else:
        taken = b
    if kept:
        pool._append_rows(cands[kept], cn[kept])
    return taken


def sample_identity_vectors(
    cfg: SamplerConfig,
    model: PcaModel,
    lg: LatentGaussian,
    rng: RngState | None = None,
) -> IdentityPool:
    """Draw candidates until cfg.n are kept or the budget runs out.

    Deterministic for a fixed (seed, config): the candidate stream is a
    single counter-based RNG sequence, so results do not depend on
    worker count, and the kept set does not depend on candidate_batch.
    Raises ExhaustionError (carrying the partial pool and statistics)
    after max_candidates draws.
    """
    state = rng if rng is not None else RngState(cfg.seed)
    gen = state.generator()
    pool = IdentityPool(model.dim, tau=cfg.tau)
    drawn = 0
    while pool.accepted < cfg.n and drawn < cfg.max_candidates:
        batch = min(cfg.candidate_batch, cfg.max_candidates - drawn)
        cands = sample_feature_vectors(model, lg, batch, gen)
        drawn += batch
        _admit_batch(pool, cands, cfg.tau, cfg.n - pool.accepted)
    if pool.accepted < cfg.n:
        stats = pool_stats(pool, seed=cfg.seed)
        stats["drawn"] = drawn
        raise ExhaustionError(
            f"kept {pool.accepted}/{cfg.n} after examining {drawn} candidates "
            f"(max_candidates={cfg.max_candidates})",
            pool=pool,
            stats=stats,
        )
    return pool


def filter_existing(vectors, tau: float):
    """Greedy first-come filter over supplied rows.

    Returns (kept_indices, dropped_indices); the kept set is pairwise
    <= tau. Equivalent to feeding the rows through admission in order.
    """
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ShapeError(f"vectors must be a nonempty 2-D array, got shape {arr.shape}")
    if not 0.0 <= tau < 1.0:
        raise ConfigError(f"tau must be in [0, 1), got {tau}")
    pool = IdentityPool(arr.shape[1], tau=tau)
    kept, dropped = [], []
    for i in range(arr.shape[0]):
        if admit(pool, arr[i], tau):
            kept.append(i)
        else:
            dropped.append(i)
    return kept, dropped


def pool_stats(pool: IdentityPool, seed: int | None = None, wall_time_s: float | None = None):
    stats = {
        "accepted": pool.accepted,
        "rejected": pool.rejected,
        "rejection_rate": pool.rejection_rate,
        "tau": pool.tau,
    }
    if seed is not None:
        stats["seed"] = seed
    if wall_time_s is not None:
        stats["wall_time_s"] = wall_time_s
    return stats


def save_pool(path, pool: IdentityPool, seed: int | None = None, wall_time_s: float | None = None):
    """Write the pool as IDV1 plus a `<path>.stats.json` sidecar."""
    write_idv(path, pool.vectors)
    sidecar = f"{path}.stats.json"
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(pool_stats(pool, seed, wall_time_s), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_pool(path, tau: float | None = None) -> IdentityPool:
    """Load vectors saved by save_pool back into a pool (counters reset)."""
    vectors, _ = read_idv(path)
    pool = IdentityPool(vectors.shape[1], tau=tau)
    pool._append_rows(vectors, row_norms(vectors))
    return pool


def audit_pairwise(vectors: np.ndarray, tau: float, block: int = 4096):
    """Independent O(n^2) check: count pairs with similarity above tau.

    Full blocked gram scan, separate code path from admission. Returns
    (violations, max_offdiag_similarity).
    """
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"vectors must be 2-D, got shape {arr.shape}")
    n = arr.shape[0]
    if n < 2:
        return 0, -1.0
    norms = row_norms(arr)
    if np.any(norms == 0.0):
        raise DomainError("pool contains zero-norm rows")
    violations = 0
    worst = -1.0
    for i0 in range(0, n, block):
        i1 = min(i0 + block, n)
        for j0 in range(i0, n, block):
            j1 = min(j0 + block, n)
            scores = arr[i0:i1] @ arr[j0:j1].T
            scores /= norms[i0:i1][:, None]
            scores /= norms[j0:j1][None, :]
            if i0 == j0:
                iu = np.triu_indices(i1 - i0, k=1)
                vals = scores[iu]
            else:
                vals = scores.ravel()
            if vals.size:
                violations += int(np.count_nonzero(vals > tau))
                worst = max(worst, float(vals.max()))
    return violations, worst
