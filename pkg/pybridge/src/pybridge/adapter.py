"""One-shot batch serving: load a model, apply it to an IDV1 batch.

Models
------
``echo``
    Embeddings mode returns the input rows unchanged (the contract-test
    model: output is bitwise the input file).  Images mode renders each
    row deterministically by tiling the vector across a 24x24 grid and
    squashing through tanh.

``<path>``
    An IDV1 file of linear weights W with shape (k, d); inputs of dim d
    map to y = x @ W.T.  Embeddings mode writes y.  Images mode
    additionally requires JSON metadata {"height": H, "width": W} with
    k == H*W and renders clip(0.5 + y, 0, 1).  This is where a real
    embedder or generator would sit; anything that can be exported to
    a weight matrix serves unchanged.

Exit status contract: 0 success, 3 malformed/unusable input (including
an empty batch), 4 model or device failure.  Diagnostics go to stderr.
"""

import os
import sys
from dataclasses import dataclass

import numpy as np

from pybridge.wire import WireError, read_idv, write_idv, write_pgm

RENDER_SIDE = 24  # builtin renderer output is RENDER_SIDE x RENDER_SIDE

EXIT_OK = 0
EXIT_INPUT = 3
EXIT_MODEL = 4


class ModelLoadError(Exception):
    """Model weights or device could not be made ready."""


class InputError(Exception):
    """The input batch cannot be served."""


@dataclass(frozen=True)
class AdapterConfig:
    model: str = "echo"
    device: str = "cpu"
    batch_size: int = 64
    mode: str = "embeddings"

    def __post_init__(self):
        if self.mode not in ("embeddings", "images"):
            raise ValueError(f"mode must be embeddings|images, got {self.mode!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.model:
            raise ValueError("model must be nonempty")


class _EchoModel:
    """Identity embedder / deterministic tiled renderer."""

    def embed(self, rows):
        return rows

    def render(self, row):
        tiled = np.resize(row.astype(np.float64), RENDER_SIDE * RENDER_SIDE)
        levels = 0.5 + 0.5 * np.tanh(tiled)
        return np.rint(255.0 * levels).astype(np.uint8).reshape(
            RENDER_SIDE, RENDER_SIDE
        )


class _LinearModel:
    """Weights from an IDV1 file: y = x @ W.T, optional image shape."""

    def __init__(self, weights, height=None, width=None):
        self.weights = weights
        self.height = height
        self.width = width

    def embed(self, rows):
        if rows.shape[1] != self.weights.shape[1]:
            raise InputError(
                f"model expects dim {self.weights.shape[1]}, "
                f"batch has dim {rows.shape[1]}"
            )
        # einsum keeps each output row's reduction order fixed regardless
        # of how many rows are in the chunk, so batch_size cannot change
        # the written bytes.
        return np.einsum("nd,kd->nk", rows, self.weights)

    def render(self, row):
        y = self.embed(row[None, :])[0]
        levels = np.clip(0.5 + y.astype(np.float64), 0.0, 1.0)
        return np.rint(255.0 * levels).astype(np.uint8).reshape(
            self.height, self.width
        )


def load_model(config: AdapterConfig):
    """Resolve config.model to a servable object.

    Any failure here is a model failure (exit 4): unknown device,
    missing or unparsable weights, weight/metadata mismatch.
    """
    if config.device != "cpu":
        raise ModelLoadError(f"device {config.device!r} is not available")
    if config.model == "echo":
        return _EchoModel()
    if not os.path.exists(config.model):
        raise ModelLoadError(f"model weights not found: {config.model}")
    try:
        weights, meta_bytes = read_idv(config.model)
    except WireError as exc:
        raise ModelLoadError(f"cannot load weights: {exc}") from exc
    if not np.all(np.isfinite(weights)):
        raise ModelLoadError(f"weights contain non-finite values: {config.model}")
    height = width = None
    if config.mode == "images":
        import json

        try:
            meta = json.loads(meta_bytes.decode("utf-8")) if meta_bytes else {}
        except ValueError as exc:
            raise ModelLoadError(f"weights metadata is not JSON: {exc}") from exc
        height, width = meta.get("height"), meta.get("width")
        if not (isinstance(height, int) and isinstance(width, int)
                and height > 0 and width > 0):
            raise ModelLoadError(
                "images mode needs integer height/width metadata in the weights file"
            )
        if weights.shape[0] != height * width:
            raise ModelLoadError(
                f"weights have {weights.shape[0]} output rows but "
                f"height*width = {height * width}"
            )
    return _LinearModel(weights, height, width)


def _serve(in_file, out_dir, config, model):
    try:
        rows, metadata = read_idv(in_file)
    except FileNotFoundError as exc:
        raise InputError(f"input not found: {in_file}") from exc
    except WireError as exc:
        raise InputError(str(exc)) from exc
    if rows.shape[0] == 0:
        raise InputError(f"{in_file}: batch contains no rows")
    if not np.all(np.isfinite(rows)):
        raise InputError(f"{in_file}: batch contains non-finite values")

    os.makedirs(out_dir, exist_ok=True)
    if config.mode == "embeddings":
        chunks = [
            model.embed(rows[i:i + config.batch_size])
            for i in range(0, rows.shape[0], config.batch_size)
        ]
        out = np.vstack(chunks) if len(chunks) > 1 else chunks[0]
        write_idv(os.path.join(out_dir, "out.idv"), out, metadata=metadata)
    else:
        for k in range(rows.shape[0]):
            write_pgm(os.path.join(out_dir, f"img_{k}.pgm"), model.render(rows[k]))


def serve_batch(in_file, out_dir, config: AdapterConfig) -> int:
    """Serve one batch; returns the process exit status."""
    try:
        model = load_model(config)
    except ModelLoadError as exc:
        print(f"pybridge: model failure: {exc}", file=sys.stderr)
        return EXIT_MODEL
    try:
        _serve(in_file, out_dir, config, model)
    except InputError as exc:
        print(f"pybridge: bad input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK
