"""idforge: synthetic identity-vector dataset engine.

Samples well-separated identity vectors from a PCA latent Gaussian,
expands each into similarity-constrained variants, optionally steers
variants toward pose/quality targets by gradient descent through a
differentiable generator, renders images, and audits the result.
"""

__version__ = "0.1.0"

from .attrop import (
    AttrOpConfig,
    AttrOpTrace,
    Evaluator,
    attrop_adjust,
    attrop_loss,
    finite_difference_gradient,
)
from .corpus import synthetic_face_corpus
from .errors import (
    BridgeError,
    ConfigError,
    DataError,
    ExhaustionError,
    IdforgeError,
    NumericError,
    UsageError,
)
from .formats import read_idv, read_image, write_idv, write_image
from .genbridge import (
    BridgeConfig,
    Image,
    ToyGenerator,
    bridge_generate,
    make_surrogate_evaluators,
    make_toy_generator,
    toy_embed,
    toy_generate,
)
from .idsampler import (
    IdentityPool,
    SamplerConfig,
    admit,
    filter_existing,
    load_pool,
    sample_identity_vectors,
    save_pool,
)
from .numkit import GaussianModel, RngState, cosine_similarity, max_similarity_blocked
from .pca import (
    LatentGaussian,
    PcaModel,
    latent_gaussian_fit,
    pca_fit,
    pca_inverse,
    pca_transform,
    sample_feature_vectors,
)
from .perturb import (
    PerturbSpec,
    PerturbedSet,
    enforce_min_similarity,
    interpolate_features,
    perturb_identity,
    sweep_dimensions,
)
from .pipeline import DatasetManifest, PipelineConfig, run_pipeline
from .qa import (
    DatasetEmbeddings,
    QaReport,
    QaThresholds,
    compute_report,
    equal_error_rate,
    genuine_impostor_scores,
    identity_leakage_rate,
)

__all__ = [name for name in dir() if not name.startswith("_")]
