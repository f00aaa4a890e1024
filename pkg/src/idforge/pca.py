"""Principal-component latent space over feature vectors.

Fit is by SVD of the centered data (numerically sturdier than an
eigendecomposition of the covariance). Components carry a deterministic
sign: the largest-magnitude entry of each one is positive, so refitting
or reloading yields the same basis bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InsufficientDataError, RankError, ShapeError
from .formats import read_model, write_model
from .numkit import GaussianModel, as_matrix, as_vector, cholesky, covariance_of, mvn_sample

PCA_TAG = "PCA1"
LGM_TAG = "LGM1"


@dataclass(frozen=True)
class PcaModel:
    """Data mean (d,), orthonormal components (k x d), explained variances (k,)."""

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    def __post_init__(self):
        mean = as_vector(self.mean, name="mean")
        comps = as_matrix(self.components, name="components")
        ev = as_vector(self.explained_variance, name="explained_variance")
        if comps.shape[1] != mean.shape[0]:
            raise ShapeError(
                f"components are {comps.shape[1]}-dimensional but mean has length {mean.shape[0]}"
            )
        if ev.shape[0] != comps.shape[0]:
            raise ShapeError(f"{comps.shape[0]} components but {ev.shape[0]} variances")
        if np.any(ev < 0.0):
            raise ShapeError("explained_variance must be nonnegative")
        if np.any(np.diff(ev) > 0.0):
            raise ShapeError("explained_variance must be non-increasing")
        gram = comps @ comps.T
        if not np.allclose(gram, np.eye(comps.shape[0]), atol=1e-8):
            raise ShapeError("components are not orthonormal (tolerance 1e-8)")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "explained_variance", ev)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def rank(self) -> int:
        return self.components.shape[0]

    def save(self, path):
        write_model(
            path,
            PCA_TAG,
            {
                "mean": self.mean,
                "components": self.components,
                "explained_variance": self.explained_variance,
            },
        )

    @classmethod
    def load(cls, path) -> "PcaModel":
        arrays, _ = read_model(path, PCA_TAG)
        return cls(arrays["mean"], arrays["components"], arrays["explained_variance"])


@dataclass(frozen=True)
class LatentGaussian:
    """Gaussian over the latent space plus the number of fitting rows."""

    gaussian: GaussianModel
    source_count: int

    def __post_init__(self):
        if not isinstance(self.gaussian, GaussianModel):
            raise ShapeError("gaussian must be a GaussianModel")
        if self.source_count < 2:
            raise ConfigError(f"source_count must be >= 2, got {self.source_count}")

    @property
    def rank(self) -> int:
        return self.gaussian.dim

    def save(self, path):
        write_model(
            path,
            LGM_TAG,
            {"mean": self.gaussian.mean, "chol": self.gaussian.chol},
            extra={"source_count": self.source_count},
        )

    @classmethod
    def load(cls, path) -> "LatentGaussian":
        arrays, extra = read_model(path, LGM_TAG)
        return cls(GaussianModel(arrays["mean"], arrays["chol"]), int(extra["source_count"]))


def _rows_like(x, width: int, *, name: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr.reshape(1, -1)
    arr = as_matrix(arr, name=name)
    if arr.shape[1] != width:
        raise ShapeError(f"{name} has dim {arr.shape[1]}, model expects {width}")
    return arr, squeeze


def pca_fit(data, k: int) -> PcaModel:
    """Fit a rank-k model to data rows (n, d).

    k must lie in [1, min(n-1, d)] (ConfigError otherwise). Data whose
    numerical rank is below k (zero-variance directions) raises
    RankError carrying the achievable rank.
    """
    data = as_matrix(data, name="data")
    n, d = data.shape
    if n < 2:
        raise InsufficientDataError(f"PCA needs at least 2 rows, got {n}")
    limit = min(n - 1, d)
    if not 1 <= k <= limit:
        raise ConfigError(f"k must be in [1, {limit}] for {n}x{d} data, got {k}")
    mean = data.mean(axis=0)
    centered = data - mean
    # Covariance eigenvalues are s^2/(n-1); rows of vt are eigenvectors.
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = s[0] * max(n, d) * np.finfo(np.float64).eps
    achievable = int(np.count_nonzero(s > tol))
    if achievable < k:
        raise RankError(
            f"data supports rank {achievable}, requested {k}", achievable_rank=achievable
        )
    comps = vt[:k].copy()
    ev = (s[:k] ** 2) / (n - 1)
    flip = comps[np.arange(k), np.argmax(np.abs(comps), axis=1)] < 0.0
    comps[flip] *= -1.0
    return PcaModel(mean=mean, components=comps, explained_variance=ev)


def pca_transform(model: PcaModel, v) -> np.ndarray:
    """Full-space vector(s) -> latent coefficients: components @ (v - mean).

    einsum keeps the reduction order independent of the row count, so
    transforming rows one at a time or all at once is bitwise identical
    (see numkit.mvn_sample for the BLAS-batching rationale).
    """
    arr, squeeze = _rows_like(v, model.dim, name="v")
    out = np.einsum("ij,kj->ik", arr - model.mean, model.components)
    return out[0] if squeeze else out


def pca_inverse(model: PcaModel, z) -> np.ndarray:
    """Latent coefficients -> full-space vector(s): mean + components.T @ z."""
    arr, squeeze = _rows_like(z, model.rank, name="z")
    out = np.einsum("ij,jk->ik", arr, model.components) + model.mean
    return out[0] if squeeze else out


def latent_gaussian_fit(model: PcaModel, data, jitter: float = 0.0) -> LatentGaussian:
    """Gaussian over pca_transform of every data row (n >= 2)."""
    data = as_matrix(data, name="data")
    latent = pca_transform(model, data)
    mean, cov = covariance_of(latent)  # raises InsufficientDataError for n < 2
    chol = cholesky(cov, jitter=jitter)
    return LatentGaussian(GaussianModel(mean, chol), source_count=data.shape[0])


def sample_feature_vectors(model: PcaModel, lg: LatentGaussian, count: int, rng) -> np.ndarray:
    """Draw latent MVN samples and map them back to full space."""
    if lg.rank != model.rank:
        raise ShapeError(f"latent rank {lg.rank} != model rank {model.rank}")
    latent = mvn_sample(lg.gaussian, count, rng)  # validates count
    return pca_inverse(model, latent)
