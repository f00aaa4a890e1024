"""Dataset quality analytics over embedding collections.

Covers verification-style score distributions (genuine vs impostor
pairs and their equal error rate), intra-class outlier and inter-class
merge detection against identity centroids, separability counting over
identity vectors, and leakage measurement of synthetic identities
against a reference set. Every scan is exact; pair subsampling (for the
quadratic impostor space) is seeded and deterministic.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DomainError, InsufficientDataError, ShapeError
from .numkit import RngState, as_matrix, row_norms

GENUINE_PAIR_CAP = 1_000_000
HIST_BINS = 40


@dataclass(frozen=True)
class QaThresholds:
    outlier: float = 0.3
    merge: float = 0.7
    separability: float = 0.4
    leakage: float = 0.7

    def __post_init__(self):
        for name in ("outlier", "merge", "separability", "leakage"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} threshold must be in (0, 1), got {value}")


class DatasetEmbeddings:
    """Per-identity embedding matrices with normalized centroids.

    `centroids` may be supplied explicitly (e.g. the sampled identity
    vectors); otherwise each centroid is the normalized mean of that
    identity's embeddings.
    """

    def __init__(self, identities, centroids: dict | None = None):
        items = list(identities)
        if not items:
            raise DataError("dataset has no identities")
        labels = [label for label, _ in items]
        if len(set(labels)) != len(labels):
            raise DataError("identity labels must be unique")
        dim = None
        self.identities = []
        for label, rows in items:
            rows = as_matrix(rows, name=f"identity {label!r}")
            if rows.shape[0] < 1:
                raise DataError(f"identity {label!r} has no embeddings")
            if dim is None:
                dim = rows.shape[1]
            elif rows.shape[1] != dim:
                raise ShapeError(
                    f"identity {label!r} has dim {rows.shape[1]}, expected {dim}"
                )
            self.identities.append((label, rows))
        self.dim = dim
        self.centroids = {}
        for label, rows in self.identities:
            if centroids is not None and label in centroids:
                center = np.asarray(centroids[label], dtype=np.float64)
            else:
                center = rows.mean(axis=0)
            norm = float(np.sqrt(np.einsum("j,j->", center, center)))
            if norm == 0.0:
                raise DomainError(f"identity {label!r} has a zero-norm centroid")
            self.centroids[label] = center / norm

    @property
    def labels(self):
        return [label for label, _ in self.identities]

    @property
    def image_count(self) -> int:
        return sum(rows.shape[0] for _, rows in self.identities)


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    norms = row_norms(rows)
    if np.any(norms == 0.0):
        raise DomainError("embeddings contain zero-norm rows")
    return rows / norms[:, None]


def genuine_impostor_scores(
    ds: DatasetEmbeddings,
    impostor_sample: int = 100_000,
    rng: RngState | None = None,
    genuine_cap: int = GENUINE_PAIR_CAP,
):
    """Same-identity pair scores (full enumeration, capped) and a seeded
    uniform sample of cross-identity pair scores."""
    if len(ds.identities) < 2:
        raise InsufficientDataError("need at least 2 identities for impostor pairs")
    if not any(rows.shape[0] >= 2 for _, rows in ds.identities):
        raise InsufficientDataError("need an identity with >= 2 embeddings for genuine pairs")
    if impostor_sample < 1:
        raise ConfigError(f"impostor_sample must be >= 1, got {impostor_sample}")
    state = rng if rng is not None else RngState(0)
    gen = state.generator() if isinstance(state, RngState) else state

    genuine_parts = []
    for _, rows in ds.identities:
        m = rows.shape[0]
        if m < 2:
            continue
        unit = _unit_rows(rows)
        gram = unit @ unit.T
        iu = np.triu_indices(m, k=1)
        genuine_parts.append(np.clip(gram[iu], -1.0, 1.0))
    genuine = np.concatenate(genuine_parts)
    if genuine.shape[0] > genuine_cap:
        pick = gen.choice(genuine.shape[0], size=genuine_cap, replace=False)
        genuine = genuine[np.sort(pick)]

    flat = np.vstack([rows for _, rows in ds.identities])
    unit_all = _unit_rows(flat)
    owner = np.concatenate(
        [np.full(rows.shape[0], i) for i, (_, rows) in enumerate(ds.identities)]
    )
    n = flat.shape[0]
    impostor = np.empty(impostor_sample, dtype=np.float64)
    filled = 0
    while filled < impostor_sample:
        draw = max(impostor_sample - filled, 64)
        a = gen.integers(0, n, size=draw)
        b = gen.integers(0, n, size=draw)
        keep = owner[a] != owner[b]
        a, b = a[keep], b[keep]
        take = min(a.shape[0], impostor_sample - filled)
        scores = np.einsum("ij,ij->i", unit_all[a[:take]], unit_all[b[:take]])
        impostor[filled : filled + take] = np.clip(scores, -1.0, 1.0)
        filled += take
    return genuine, impostor


def equal_error_rate(genuine, impostor):
    """Threshold sweep over midpoints of the merged sorted score multiset.

    Accept iff score >= t. Returns (eer, threshold) at the point
    minimizing |FAR - FRR| (ties -> lowest threshold), with eer the
    average of FAR and FRR there.
    """
    gen = np.sort(np.asarray(genuine, dtype=np.float64))
    imp = np.sort(np.asarray(impostor, dtype=np.float64))
    if gen.size == 0 or imp.size == 0:
        raise DataError("both score sets must be nonempty")
    merged = np.sort(np.concatenate([gen, imp]))
    thresholds = 0.5 * (merged[:-1] + merged[1:])
    far = 1.0 - np.searchsorted(imp, thresholds, side="left") / imp.size
    frr = np.searchsorted(gen, thresholds, side="left") / gen.size
    best = int(np.argmin(np.abs(far - frr)))
    return float(0.5 * (far[best] + frr[best])), float(thresholds[best])


def intra_class_outlier_rate(ds: DatasetEmbeddings, outlier_threshold: float) -> float:
    """Fraction of embeddings whose cosine to their centroid is below the threshold."""
    total = 0
    outliers = 0
    for label, rows in ds.identities:
        unit = _unit_rows(rows)
        sims = unit @ ds.centroids[label]
        outliers += int(np.count_nonzero(sims < outlier_threshold))
        total += rows.shape[0]
    if total == 0:
        raise DataError("dataset has no embeddings")
    return outliers / total


def inter_class_merge_pairs(ds: DatasetEmbeddings, merge_threshold: float):
    """Centroid pairs with similarity strictly above the threshold,
    sorted by descending similarity (label order breaks ties)."""
    if len(ds.identities) < 2:
        raise InsufficientDataError("need at least 2 identities")
    labels = ds.labels
    centers = np.vstack([ds.centroids[label] for label in labels])
    gram = np.clip(centers @ centers.T, -1.0, 1.0)
    pairs = []
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            sim = float(gram[i, j])
            if sim > merge_threshold:
                pairs.append((labels[i], labels[j], sim))
    pairs.sort(key=lambda p: (-p[2], str(p[0]), str(p[1])))
    return pairs


def separability_count(id_vectors, threshold: float, block: int = 4096) -> int:
    """How many rows have max similarity to every other row below the threshold."""
    arr = as_matrix(id_vectors, name="id_vectors")
    n = arr.shape[0]
    if n == 1:
        return 1
    norms = row_norms(arr)
    if np.any(norms == 0.0):
        raise DomainError("id_vectors contain zero-norm rows")
    best = np.full(n, -np.inf)
    for i0 in range(0, n, block):
        i1 = min(i0 + block, n)
        for j0 in range(0, n, block):
            j1 = min(j0 + block, n)
            scores = arr[i0:i1] @ arr[j0:j1].T
            scores /= norms[i0:i1][:, None]
            scores /= norms[j0:j1][None, :]
            if i0 == j0:
                np.fill_diagonal(scores, -np.inf)
            best[i0:i1] = np.maximum(best[i0:i1], scores.max(axis=1))
    return int(np.count_nonzero(best < threshold))


def identity_leakage_rate(synthetic, reference, threshold: float, block: int = 4096):
    """Fraction of synthetic rows whose max similarity into the reference
    set strictly exceeds the threshold; also returns those row indices."""
    syn = as_matrix(synthetic, name="synthetic")
    ref = as_matrix(reference, name="reference")
    if syn.shape[1] != ref.shape[1]:
        raise ShapeError(f"dim mismatch: synthetic {syn.shape[1]} vs reference {ref.shape[1]}")
    syn_norms = row_norms(syn)
    ref_norms = row_norms(ref)
    if np.any(syn_norms == 0.0) or np.any(ref_norms == 0.0):
        raise DomainError("inputs contain zero-norm rows")
    best = np.full(syn.shape[0], -np.inf)
    for i0 in range(0, syn.shape[0], block):
        i1 = min(i0 + block, syn.shape[0])
        for j0 in range(0, ref.shape[0], block):
            j1 = min(j0 + block, ref.shape[0])
            scores = syn[i0:i1] @ ref[j0:j1].T
            scores /= syn_norms[i0:i1][:, None]
            scores /= ref_norms[j0:j1][None, :]
            best[i0:i1] = np.maximum(best[i0:i1], scores.max(axis=1))
    offending = np.nonzero(best > threshold)[0]
    return offending.size / syn.shape[0], offending.tolist()


@dataclass
class QaReport:
    """Aggregated audit results; serializes losslessly to/from JSON."""

    eer: float
    eer_threshold: float
    genuine_count: int
    impostor_count: int
    hist_edges: list = field(default_factory=list)
    genuine_hist: list = field(default_factory=list)
    impostor_hist: list = field(default_factory=list)
    outlier_rate: float = 0.0
    merge_pairs: list = field(default_factory=list)
    separability_count: int = 0
    identity_count: int = 0
    image_count: int = 0
    leakage_rate: float | None = None
    leakage_indices: list = field(default_factory=list)
    thresholds: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "QaReport":
        raw = json.loads(text)
        raw["merge_pairs"] = [list(p) for p in raw.get("merge_pairs", [])]
        return cls(**raw)


def compute_report(
    ds: DatasetEmbeddings,
    thresholds: QaThresholds | None = None,
    id_vectors=None,
    reference=None,
    impostor_sample: int = 100_000,
    rng: RngState | None = None,
    hist_bins: int = HIST_BINS,
) -> QaReport:
    """Run the full audit battery and assemble a report.

    Separability runs over `id_vectors` when given (the sampled
    identity vectors), falling back to the centroids; leakage runs only
    when a reference matrix is supplied.
    """
    thresholds = thresholds or QaThresholds()
    genuine, impostor = genuine_impostor_scores(ds, impostor_sample, rng)
    eer, eer_threshold = equal_error_rate(genuine, impostor)
    edges = np.linspace(-1.0, 1.0, hist_bins + 1)
    genuine_hist, _ = np.histogram(genuine, bins=edges)
    impostor_hist, _ = np.histogram(impostor, bins=edges)
    if id_vectors is None:
        id_vectors = np.vstack([ds.centroids[label] for label in ds.labels])
    sep = separability_count(id_vectors, thresholds.separability)
    leak_rate = None
    leak_idx: list = []
    if reference is not None:
        leak_rate, leak_idx = identity_leakage_rate(id_vectors, reference, thresholds.leakage)
    merge = [[a, b, sim] for a, b, sim in inter_class_merge_pairs(ds, thresholds.merge)]
    return QaReport(
        eer=eer,
        eer_threshold=eer_threshold,
        genuine_count=int(genuine.size),
        impostor_count=int(impostor.size),
        hist_edges=edges.tolist(),
        genuine_hist=genuine_hist.tolist(),
        impostor_hist=impostor_hist.tolist(),
        outlier_rate=intra_class_outlier_rate(ds, thresholds.outlier),
        merge_pairs=merge,
        separability_count=sep,
        identity_count=len(ds.identities),
        image_count=ds.image_count,
        leakage_rate=leak_rate,
        leakage_indices=leak_idx,
        thresholds=asdict(thresholds),
    )
