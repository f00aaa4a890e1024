"""Vector-to-image generation: analytic toy pair and subprocess bridge.

The toy generator maps a direction on the feature sphere through a
fixed orthonormal frame into pixel space (and back), so end-to-end
optimization and QA tests run with exact, dependency-free gradients.
Real neural generators/embedders attach through a file-based subprocess
contract instead: the engine writes a vector batch, invokes an adapter
command with ``--in <file> --out <dir>``, and collects images or an
embedding file, never reordering or dropping batch elements.
"""

from __future__ import annotations

import os
import shlex
import subprocess
import threading
from dataclasses import dataclass

import numpy as np

from .attrop import Evaluator
from .errors import (
    BridgeExitError,
    BridgeFormatError,
    BridgeIncompleteError,
    BridgeTimeoutError,
    ConfigError,
    DataError,
    DomainError,
    FormatError,
    ShapeError,
)
from .formats import read_idv, read_image, write_idv
from .numkit import RngState, as_vector, cosine_similarity, vector_norm

TIMEOUT_ENV = "IDFORGE_BRIDGE_TIMEOUT"
DEFAULT_TOY_SEED = 0x7071
_work_dir_locks: dict = {}
_locks_guard = threading.Lock()


@dataclass(frozen=True)
class Image:
    """Float pixels in [0, 1]; HxW grayscale or HxWx3 RGB, row-major."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.pixels, dtype=np.float64))
        if arr.ndim == 2:
            pass
        elif arr.ndim == 3 and arr.shape[2] == 3:
            pass
        else:
            raise ShapeError(f"pixels must be HxW or HxWx3, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"image dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DomainError("pixels contain non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise DomainError("pixels must lie in [0, 1] (clamp before constructing)")
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3


@dataclass(frozen=True)
class ToyGenerator:
    """Orthonormal frame W (p x d, p = height*width >= d) with gain beta.

    generate: pixels = clamp(0.5 + beta * W @ (v/|v|)); embed inverts it
    exactly on unclamped pixels. beta = 4 puts per-pixel excursions at
    rms 4/sqrt(p) ~ 0.17, so clamping is rare but nonzero and the
    clamp-mask gradient path stays exercised.
    """

    W: np.ndarray
    beta: float
    height: int
    width: int

    def __post_init__(self):
        W = np.ascontiguousarray(np.asarray(self.W, dtype=np.float64))
        if W.ndim != 2:
            raise ShapeError(f"W must be 2-D, got shape {W.shape}")
        p, d = W.shape
        if self.height < 1 or self.width < 1 or self.height * self.width != p:
            raise ShapeError(f"height*width must equal {p}, got {self.height}x{self.width}")
        if p < d:
            raise ShapeError(f"W needs at least as many pixels as dims ({p} < {d})")
        gram = W.T @ W
        if not np.allclose(gram, np.eye(d), atol=1e-8):
            raise ShapeError("W columns are not orthonormal (tolerance 1e-8)")
        if self.beta < 0.0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        object.__setattr__(self, "W", W)

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    def generate(self, v) -> Image:
        return toy_generate(self, v)

    def embed(self, image: Image) -> np.ndarray:
        return toy_embed(self, image)

    def vjp(self, v, image_cotangent) -> np.ndarray:
        return toy_vjp(self, v, image_cotangent)

    def embed_vjp(self, image: Image, cotangent) -> np.ndarray:
        return toy_embed_vjp(self, image, cotangent)


def make_toy_generator(
    height: int = 24,
    width: int = 24,
    dim: int = 512,
    beta: float = 4.0,
    rng: RngState | None = None,
) -> ToyGenerator:
    """Deterministic toy generator: QR of a seeded Gaussian matrix."""
    p = height * width
    if p < dim:
        raise ConfigError(f"height*width ({p}) must be >= dim ({dim})")
    state = rng if rng is not None else RngState(DEFAULT_TOY_SEED)
    gen = state.generator()
    raw = gen.standard_normal((p, dim))
    q, r = np.linalg.qr(raw, mode="reduced")
    signs = np.sign(np.diag(r))
    signs[signs == 0.0] = 1.0
    q = q * signs  # fix the QR sign ambiguity so the frame is reproducible
    return ToyGenerator(W=q, beta=beta, height=height, width=width)


def toy_generate(gen: ToyGenerator, v) -> Image:
    """clamp(0.5 + beta * W v_hat) reshaped to the generator's frame."""
    vec = as_vector(v, name="v")
    if vec.shape[0] != gen.dim:
        raise ShapeError(f"v has dim {vec.shape[0]}, generator expects {gen.dim}")
    norm = vector_norm(vec)
    if norm == 0.0:
        raise DomainError("v must be nonzero")
    raw = 0.5 + gen.beta * (gen.W @ (vec / norm))
    return Image(np.clip(raw, 0.0, 1.0).reshape(gen.height, gen.width))


def toy_embed_raw(gen: ToyGenerator, image: Image) -> np.ndarray:
    """Unnormalized embedding pre-image W^T (pixels - 0.5) / beta."""
    if image.channels != 1 or image.height != gen.height or image.width != gen.width:
        raise ShapeError(
            f"image is {image.height}x{image.width}x{image.channels}, "
            f"generator expects {gen.height}x{gen.width}x1"
        )
    if gen.beta == 0.0:
        raise DomainError("beta = 0 generator is not invertible")
    flat = (image.pixels.ravel() - 0.5) / gen.beta
    return gen.W.T @ flat


def toy_embed(gen: ToyGenerator, image: Image) -> np.ndarray:
    """Normalized embedding; raises for images with no directional content."""
    pre = toy_embed_raw(gen, image)
    norm = vector_norm(pre)
    if norm == 0.0:
        raise DomainError("image embeds to the zero vector")
    return pre / norm


def toy_vjp(gen: ToyGenerator, v, image_cotangent) -> np.ndarray:
    """Exact vector-Jacobian product of toy_generate at v.

    Chains the pixel cotangent through the clamp mask, the frame, and
    the input normalization; clamped pixels contribute nothing.
    """
    vec = as_vector(v, name="v")
    if vec.shape[0] != gen.dim:
        raise ShapeError(f"v has dim {vec.shape[0]}, generator expects {gen.dim}")
    norm = vector_norm(vec)
    if norm == 0.0:
        raise DomainError("v must be nonzero")
    cot = np.asarray(image_cotangent, dtype=np.float64)
    if cot.shape != (gen.height, gen.width):
        raise ShapeError(f"cotangent shape {cot.shape} != ({gen.height}, {gen.width})")
    unit = vec / norm
    raw = 0.5 + gen.beta * (gen.W @ unit)
    mask = (raw > 0.0) & (raw < 1.0)
    masked = np.where(mask, cot.ravel(), 0.0)
    u_bar = gen.beta * (gen.W.T @ masked)
    # normalization pullback: (I - u u^T) / |v|
    return (u_bar - np.einsum("j,j->", u_bar, unit) * unit) / norm


def toy_embed_vjp(gen: ToyGenerator, image: Image, cotangent) -> np.ndarray:
    """Exact VJP of toy_embed at image; returns a pixel-shaped array."""
    cot = as_vector(cotangent, name="cotangent")
    if cot.shape[0] != gen.dim:
        raise ShapeError(f"cotangent has dim {cot.shape[0]}, expected {gen.dim}")
    pre = toy_embed_raw(gen, image)
    norm = vector_norm(pre)
    if norm == 0.0:
        raise DomainError("image embeds to the zero vector")
    unit = pre / norm
    pre_bar = (cot - np.einsum("j,j->", cot, unit) * unit) / norm
    return (gen.W @ pre_bar).reshape(gen.height, gen.width) / gen.beta


def make_surrogate_evaluators(
    gen: ToyGenerator,
    pose_axis=None,
    pose_gain: float = 90.0,
    q0: float = 19.0,
    q1: float = 8.0,
):
    """Analytic pose/quality/identity evaluators over the toy pair.

    pose = pose_gain * <axis, embed(image)> degrees; quality = q0 + q1 *
    |embedding pre-image| (so an unclamped image scores q0 + q1); the
    identity evaluator is the embedder itself with its VJP.
    """
    if pose_axis is None:
        axis = np.zeros(gen.dim)
        axis[0] = 1.0
    else:
        axis = as_vector(pose_axis, name="pose_axis")
        n = vector_norm(axis)
        if n == 0.0:
            raise DomainError("pose_axis must be nonzero")
        axis = axis / n
        if axis.shape[0] != gen.dim:
            raise ShapeError(f"pose_axis has dim {axis.shape[0]}, expected {gen.dim}")

    def pose_value(image):
        return pose_gain * float(np.einsum("j,j->", axis, toy_embed(gen, image)))

    def pose_grad(image):
        return toy_embed_vjp(gen, image, pose_gain * axis)

    def quality_value(image):
        return q0 + q1 * vector_norm(toy_embed_raw(gen, image))

    def quality_grad(image):
        pre = toy_embed_raw(gen, image)
        norm = vector_norm(pre)
        if norm == 0.0:
            return np.zeros((gen.height, gen.width))
        return (gen.W @ (q1 * pre / norm)).reshape(gen.height, gen.width) / gen.beta

    def identity_value(image):
        return toy_embed(gen, image)

    def identity_vjp(image, cotangent):
        return toy_embed_vjp(gen, image, cotangent)

    return [
        Evaluator(kind="pose", value=pose_value, image_gradient=pose_grad, differentiable=True),
        Evaluator(
            kind="quality", value=quality_value, image_gradient=quality_grad, differentiable=True
        ),
        Evaluator(
            kind="identity", value=identity_value, image_gradient=identity_vjp, differentiable=True
        ),
    ]


# --- subprocess bridge -------------------------------------------------------


@dataclass(frozen=True)
class BridgeConfig:
    """Adapter command, working directory, batching, timeout, and mode."""

    command: str
    work_dir: str
    batch_size: int = 256
    timeout_seconds: float = 120.0
    mode: str = "images"

    def __post_init__(self):
        if not self.command or not self.command.strip():
            raise ConfigError("command must be nonempty")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.timeout_seconds <= 0:
            raise ConfigError(f"timeout_seconds must be > 0, got {self.timeout_seconds}")
        if self.mode not in ("images", "embeddings"):
            raise ConfigError(f"mode must be images|embeddings, got {self.mode!r}")


def _effective_timeout(cfg: BridgeConfig) -> float:
    override = os.environ.get(TIMEOUT_ENV)
    if override:
        try:
            value = float(override)
        except ValueError as exc:
            raise ConfigError(f"{TIMEOUT_ENV} must be numeric, got {override!r}") from exc
        if value <= 0:
            raise ConfigError(f"{TIMEOUT_ENV} must be > 0, got {value}")
        return value
    return cfg.timeout_seconds


def _work_dir_lock(work_dir: str) -> threading.Lock:
    key = os.path.abspath(work_dir)
    with _locks_guard:
        return _work_dir_locks.setdefault(key, threading.Lock())


def _run_adapter(cfg: BridgeConfig, in_file: str, out_dir: str):
    args = shlex.split(cfg.command) + ["--in", in_file, "--out", out_dir]
    try:
        proc = subprocess.run(
            args,
            capture_output=True,
            timeout=_effective_timeout(cfg),
            text=True,
        )
    except subprocess.TimeoutExpired as exc:
        raise BridgeTimeoutError(
            f"adapter timed out after {_effective_timeout(cfg)}s: {args[0]}"
        ) from exc
    except FileNotFoundError as exc:
        raise BridgeExitError(f"adapter command not found: {args[0]}") from exc
    if proc.returncode != 0:
        raise BridgeExitError(
            f"adapter exited {proc.returncode}",
            returncode=proc.returncode,
            stderr=proc.stderr or "",
        )


def _collect_images(out_dir: str, count: int):
    images = []
    for k in range(count):
        pgm = os.path.join(out_dir, f"img_{k}.pgm")
        ppm = os.path.join(out_dir, f"img_{k}.ppm")
        path = pgm if os.path.exists(pgm) else ppm if os.path.exists(ppm) else None
        if path is None:
            raise BridgeIncompleteError(
                f"adapter produced no image for row {k}", missing_index=k
            )
        try:
            images.append(Image(read_image(path)))
        except (FormatError, ShapeError, DomainError) as exc:
            raise BridgeFormatError(f"{path}: {exc}") from exc
    return images


def _collect_embeddings(out_dir: str, count: int) -> np.ndarray:
    path = os.path.join(out_dir, "out.idv")
    if not os.path.exists(path):
        raise BridgeIncompleteError("adapter produced no out.idv", missing_index=0)
    try:
        vectors, _ = read_idv(path)
    except FormatError as exc:
        raise BridgeFormatError(f"{path}: {exc}") from exc
    if vectors.shape[0] != count:
        raise BridgeIncompleteError(
            f"adapter returned {vectors.shape[0]} rows for a {count}-row batch",
            missing_index=min(vectors.shape[0], count - 1),
        )
    return vectors


def bridge_generate(cfg: BridgeConfig, vectors):
    """Push vectors through the adapter in batches.

    Returns a list of Images (images mode) or an embedding matrix with
    one row per input (embeddings mode); order always matches input.
    """
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ShapeError(f"vectors must be a nonempty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("vectors contain non-finite entries")
    os.makedirs(cfg.work_dir, exist_ok=True)
    results: list = []
    embedding_chunks: list = []
    with _work_dir_lock(cfg.work_dir):
        for b, start in enumerate(range(0, arr.shape[0], cfg.batch_size)):
            stop = min(start + cfg.batch_size, arr.shape[0])
            batch = arr[start:stop]
            in_file = os.path.join(cfg.work_dir, f"in_{b}.idv")
            out_dir = os.path.join(cfg.work_dir, f"out_{b}")
            os.makedirs(out_dir, exist_ok=True)
            write_idv(in_file, batch)
            _run_adapter(cfg, in_file, out_dir)
            if cfg.mode == "images":
                results.extend(_collect_images(out_dir, batch.shape[0]))
            else:
                embedding_chunks.append(_collect_embeddings(out_dir, batch.shape[0]))
    if cfg.mode == "images":
        return results
    dims = {chunk.shape[1] for chunk in embedding_chunks}
    if len(dims) > 1:
        raise BridgeFormatError(f"adapter batches disagree on embedding dim: {sorted(dims)}")
    return np.vstack(embedding_chunks)


# --- fidelity metrics --------------------------------------------------------


def reconstruction_mse(rec: Image, gt: Image) -> float:
    """Mean squared pixel difference between two same-shape images."""
    if rec.pixels.shape != gt.pixels.shape:
        raise ShapeError(f"shape mismatch: {rec.pixels.shape} vs {gt.pixels.shape}")
    diff = rec.pixels - gt.pixels
    return float(np.mean(diff * diff))


def identity_similarity_loss(emb_rec, emb_gt) -> float:
    """1 - cosine similarity between two embeddings."""
    return 1.0 - cosine_similarity(emb_rec, emb_gt)
