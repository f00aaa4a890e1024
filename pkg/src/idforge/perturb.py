"""Per-identity variant vectors via constrained Gaussian perturbation.

Each variant is the identity vector plus i.i.d. Gaussian noise whose
scale comes from a mixture of sigmas; every variant must stay within a
minimum cosine similarity of its identity vector. The constraint is
enforced by resampling a bounded number of times and then shrinking the
offending variant geometrically toward the identity vector.

Sigma convention: by default sigma is the per-dimension *variance*
(noise std = sqrt(sigma)); set ``sigma_is_std`` to treat it as the
standard deviation directly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ConstraintError, DomainError, ShapeError
from .formats import read_idv, write_idv
from .numkit import RngState, as_vector, cosine_similarity, vector_norm

DEFAULT_MIXTURE = ((0.3, 0.40), (0.5, 0.40), (0.7, 0.20))
DEFAULT_MAX_SHRINKS = 24


@dataclass(frozen=True)
class PerturbSpec:
    """Noise mixture, variants per identity, and similarity floor."""

    mixture: tuple = DEFAULT_MIXTURE
    images_per_id: int = 50
    s_min: float = 0.5
    max_resamples: int = 16
    shrink_factor: float = 0.5
    sigma_is_std: bool = False

    def __post_init__(self):
        mixture = tuple((float(s), float(f)) for s, f in self.mixture)
        if not mixture:
            raise ConfigError("mixture must have at least one (sigma, fraction) entry")
        for sigma, frac in mixture:
            if sigma < 0.0:
                raise ConfigError(f"sigma must be >= 0, got {sigma}")
            if frac < 0.0:
                raise ConfigError(f"fraction must be >= 0, got {frac}")
        total = sum(f for _, f in mixture)
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"mixture fractions must sum to 1, got {total}")
        if self.images_per_id < 1:
            raise ConfigError(f"images_per_id must be >= 1, got {self.images_per_id}")
        if not 0.0 <= self.s_min < 1.0:
            raise ConfigError(f"s_min must be in [0, 1), got {self.s_min}")
        if self.max_resamples < 0:
            raise ConfigError(f"max_resamples must be >= 0, got {self.max_resamples}")
        if not 0.0 < self.shrink_factor < 1.0:
            raise ConfigError(f"shrink_factor must be in (0, 1), got {self.shrink_factor}")
        object.__setattr__(self, "mixture", mixture)

    def counts(self) -> list[int]:
        """Variants per mixture entry: round-half-up of fraction*m, with
        the rounding remainder assigned to the largest-fraction entry."""
        m = self.images_per_id
        counts = [int(np.floor(f * m + 0.5)) for _, f in self.mixture]
        remainder = m - sum(counts)
        if remainder:
            idx = max(range(len(counts)), key=lambda i: (self.mixture[i][1], -i))
            counts[idx] += remainder
            if counts[idx] < 0:
                raise ConfigError("mixture rounding produced a negative count")
        return counts


@dataclass(frozen=True)
class PerturbedSet:
    """One identity's variants with their sigmas and similarities."""

    id_vector: np.ndarray
    variants: np.ndarray
    sigmas: np.ndarray
    similarities: np.ndarray

    def __post_init__(self):
        vid = as_vector(self.id_vector, name="id_vector")
        variants = np.ascontiguousarray(np.asarray(self.variants, dtype=np.float64))
        if variants.ndim != 2 or variants.shape[1] != vid.shape[0]:
            raise ShapeError(
                f"variants must be m x {vid.shape[0]}, got shape {variants.shape}"
            )
        sigmas = np.asarray(self.sigmas, dtype=np.float64)
        sims = np.asarray(self.similarities, dtype=np.float64)
        if sigmas.shape != (variants.shape[0],) or sims.shape != (variants.shape[0],):
            raise ShapeError("sigmas/similarities must have one entry per variant")
        object.__setattr__(self, "id_vector", vid)
        object.__setattr__(self, "variants", variants)
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "similarities", sims)

    @property
    def count(self) -> int:
        return self.variants.shape[0]


def enforce_min_similarity(
    v_id,
    v_pert,
    s_min: float,
    shrink_factor: float = 0.5,
    max_shrinks: int = DEFAULT_MAX_SHRINKS,
) -> np.ndarray:
    """Smallest geometric shrink of v_pert toward v_id meeting the floor.

    Returns v_id + gamma^i * (v_pert - v_id) for the smallest i >= 0
    with cosine >= s_min; the input comes back unchanged when i = 0.
    Raises ConstraintError once max_shrinks is exhausted.
    """
    vid = as_vector(v_id, name="v_id")
    pert = as_vector(v_pert, name="v_pert")
    if vid.shape[0] != pert.shape[0]:
        raise ShapeError(f"length mismatch: {vid.shape[0]} vs {pert.shape[0]}")
    if vector_norm(vid) == 0.0 or vector_norm(pert) == 0.0:
        raise DomainError("inputs must be nonzero")
    if not 0.0 <= s_min <= 1.0:
        raise ConfigError(f"s_min must be in [0, 1], got {s_min}")
    if not 0.0 < shrink_factor < 1.0:
        raise ConfigError(f"shrink_factor must be in (0, 1), got {shrink_factor}")
    if s_min == 0.0 or cosine_similarity(vid, pert) >= s_min:
        return pert
    delta = pert - vid
    gamma = shrink_factor
    for _ in range(max_shrinks):
        shrunk = vid + gamma * delta
        if vector_norm(shrunk) > 0.0 and cosine_similarity(vid, shrunk) >= s_min:
            return shrunk
        gamma *= shrink_factor
    raise ConstraintError(
        f"similarity floor {s_min} unreachable after {max_shrinks} shrinks"
    )


def perturb_identity(v_id, spec: PerturbSpec, rng: RngState) -> PerturbedSet:
    """Draw spec.images_per_id constrained variants of one identity.

    Variants are grouped by mixture entry in declaration order; inside a
    group each variant is drawn, resampled up to spec.max_resamples
    times if it misses the similarity floor, then shrunk as a last
    resort. Fully deterministic for a fixed RngState.
    """
    vid = as_vector(v_id, name="v_id")
    if vector_norm(vid) == 0.0:
        raise DomainError("v_id must be nonzero")
    gen = rng.generator() if isinstance(rng, RngState) else rng
    d = vid.shape[0]
    counts = spec.counts()
    total = spec.images_per_id
    variants = np.empty((total, d), dtype=np.float64)
    sigmas = np.empty(total, dtype=np.float64)
    sims = np.empty(total, dtype=np.float64)

    k = 0
    for (sigma, _), count in zip(spec.mixture, counts):
        std = sigma if spec.sigma_is_std else float(np.sqrt(sigma))
        for _ in range(count):
            if std == 0.0:
                variant = vid.copy()
                sim = 1.0
            else:
                variant, sim = _draw_variant(vid, std, spec, gen)
            variants[k] = variant
            sigmas[k] = sigma
            sims[k] = sim
            k += 1
    return PerturbedSet(id_vector=vid, variants=variants, sigmas=sigmas, similarities=sims)


def _draw_variant(vid, std, spec, gen):
    d = vid.shape[0]
    last = None
    for _ in range(spec.max_resamples + 1):
        candidate = vid + std * gen.standard_normal(d)
        if vector_norm(candidate) == 0.0:
            continue
        sim = cosine_similarity(vid, candidate)
        if sim >= spec.s_min:
            return candidate, sim
        last = candidate
    if last is None:  # every draw degenerated to the zero vector
        raise ConstraintError("perturbation produced only zero vectors")
    variant = enforce_min_similarity(vid, last, spec.s_min, spec.shrink_factor)
    return variant, cosine_similarity(vid, variant)


def interpolate_features(v_a, v_b, steps: int) -> np.ndarray:
    """Linear interpolation rows at t = i/(steps-1); endpoints exact."""
    a = as_vector(v_a, name="v_a")
    b = as_vector(v_b, name="v_b")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if steps < 2:
        raise ConfigError(f"steps must be >= 2, got {steps}")
    t = np.linspace(0.0, 1.0, steps).reshape(-1, 1)
    out = (1.0 - t) * a + t * b
    out[0] = a
    out[-1] = b
    return out


def sweep_dimensions(v, dims, values) -> np.ndarray:
    """One output row per value; row j is v with `dims` set to values[j]."""
    base = as_vector(v, name="v")
    dims = list(dims)
    d = base.shape[0]
    for dim in dims:
        if not 0 <= int(dim) < d:
            raise IndexError(f"dimension {dim} out of range [0, {d})")
    values = list(values)
    out = np.tile(base, (len(values), 1))
    for j, value in enumerate(values):
        if dims:
            out[j, dims] = float(value)
    return out


def save_perturbed_set(directory, index: int, pset: PerturbedSet, s_min: float | None = None):
    """Write `id_<index>.idv` (variants + exact metadata) and a JSON sidecar."""
    base = os.path.join(os.fspath(directory), f"id_{index}.idv")
    metadata = {
        "id_vector": np.ascontiguousarray(pset.id_vector, dtype="<f8").tobytes().hex(),
        "sigmas": pset.sigmas.tolist(),
        "similarities": pset.similarities.tolist(),
    }
    if s_min is not None:
        metadata["s_min"] = s_min
    write_idv(base, pset.variants, metadata)
    sidecar = os.path.join(os.fspath(directory), f"id_{index}.json")
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(
            {"index": index, "sigmas": pset.sigmas.tolist(),
             "similarities": pset.similarities.tolist(), "s_min": s_min},
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    return base


def load_perturbed_set(path) -> PerturbedSet:
    """Read a file written by save_perturbed_set (variants are float32 on disk)."""
    variants, metadata = read_idv(path)
    if not metadata or "id_vector" not in metadata:
        raise ShapeError(f"{path}: missing id_vector metadata")
    vid = np.frombuffer(bytes.fromhex(metadata["id_vector"]), dtype="<f8").astype(np.float64)
    return PerturbedSet(
        id_vector=vid,
        variants=variants,
        sigmas=np.asarray(metadata["sigmas"], dtype=np.float64),
        similarities=np.asarray(metadata["similarities"], dtype=np.float64),
    )
