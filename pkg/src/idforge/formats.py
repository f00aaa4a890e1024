"""On-disk formats: IDV1 vector batches, PGM/PPM images, model files.

IDV1 layout (little-endian throughout):

    bytes 0..4   magic b"IDV1"
    u32          count
    u32          dim
    count*dim    float32 payload, row-major
    [u32 + json] optional metadata: byte length then UTF-8 JSON object

Vectors are float64 in memory and float32 on disk; metadata rides along
unchanged. Writers go through a same-directory temp file + rename so a
crash never leaves a truncated artifact behind.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import DataError, FormatError, ShapeError

IDV_MAGIC = b"IDV1"
_HEADER = struct.Struct("<4sII")
_U32 = struct.Struct("<I")

MAX_IDV_ELEMENTS = 1 << 31  # refuse absurd headers before allocating


def atomic_write_bytes(path, payload: bytes):
    """Write via a same-directory temp file + rename; never leaves a
    truncated file at `path`."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_idv(path, vectors, metadata: dict | None = None):
    """Serialize a float batch to an IDV1 file (atomically)."""
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"vectors must be 2-D, got shape {arr.shape}")
    if arr.shape[1] == 0:
        raise ShapeError("vector dim must be positive")
    if not np.all(np.isfinite(arr)):
        raise DataError("vectors contain non-finite entries")
    count, dim = arr.shape
    parts = [_HEADER.pack(IDV_MAGIC, count, dim)]
    parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if metadata is not None:
        if not isinstance(metadata, dict):
            raise FormatError("metadata must be a JSON object (dict)")
        blob = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts.append(_U32.pack(len(blob)))
        parts.append(blob)
    atomic_write_bytes(path, b"".join(parts))


def read_idv(path):
    """Read an IDV1 file; returns (float64 array of shape (count, dim), metadata|None)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, count, dim = _HEADER.unpack_from(raw, 0)
    if magic != IDV_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {IDV_MAGIC!r}")
    if dim == 0:
        raise FormatError(f"{path}: zero dim")
    if count * dim > MAX_IDV_ELEMENTS:
        raise FormatError(f"{path}: implausible size {count}x{dim}")
    need = _HEADER.size + 4 * count * dim
    if len(raw) < need:
        raise FormatError(f"{path}: payload truncated ({len(raw)} < {need} bytes)")
    payload = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=_HEADER.size)
    vectors = payload.reshape(count, dim).astype(np.float64)
    metadata = None
    off = need
    if len(raw) > off:
        if len(raw) < off + 4:
            raise FormatError(f"{path}: truncated metadata length")
        (mlen,) = _U32.unpack_from(raw, off)
        off += 4
        if len(raw) < off + mlen:
            raise FormatError(f"{path}: truncated metadata ({len(raw) - off} < {mlen} bytes)")
        try:
            metadata = json.loads(raw[off : off + mlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: metadata is not valid JSON: {exc}") from exc
        if not isinstance(metadata, dict):
            raise FormatError(f"{path}: metadata must be a JSON object")
        if len(raw) > off + mlen:
            raise FormatError(f"{path}: {len(raw) - off - mlen} trailing bytes")
    return vectors, metadata


# --- netpbm images ---------------------------------------------------------
#
# Grayscale batches go to binary PGM (P5), RGB to binary PPM (P6), both
# maxval 255. Pixels live in [0, 1] in memory; quantization rounds
# half-to-even via np.rint, matching the rest of the float pipeline.


def write_image(path, pixels):
    """Write [0,1] float pixels as P5 (2-D input) or P6 (H x W x 3)."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ShapeError(f"pixels must be HxW or HxWx3, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ShapeError(f"image has empty dimension: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("pixels contain non-finite entries")
    quant = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = b"%s\n%d %d\n255\n" % (magic, arr.shape[1], arr.shape[0])
    atomic_write_bytes(path, header + quant.tobytes())


def _parse_pnm_tokens(raw: bytes, path, count: int):
    """Pull `count` whitespace/comment-separated ASCII tokens after the magic."""
    tokens = []
    i = 2  # past magic
    while len(tokens) < count:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i] not in (0x0A, 0x0D):
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i : i + 1].isspace():
            i += 1
        if start == i:
            raise FormatError(f"{path}: truncated header")
        tokens.append(raw[start:i])
    if i >= len(raw) or not raw[i : i + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after header")
    return tokens, i + 1


def read_image(path):
    """Read a binary PGM/PPM file back to [0,1] float64 pixels."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 2 or raw[:1] != b"P" or raw[1:2] not in (b"5", b"6"):
        raise FormatError(f"{path}: not a binary PGM/PPM file")
    channels = 1 if raw[1:2] == b"5" else 3
    tokens, off = _parse_pnm_tokens(raw, path, 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric header field") from exc
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval} (need 255)")
    need = width * height * channels
    data = raw[off : off + need]
    if len(data) < need:
        raise FormatError(f"{path}: pixel data truncated ({len(data)} < {need} bytes)")
    if len(raw) > off + need:
        raise FormatError(f"{path}: {len(raw) - off - need} trailing bytes")
    pixels = np.frombuffer(data, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 1:
        return pixels.reshape(height, width)
    return pixels.reshape(height, width, 3)


# --- model files -----------------------------------------------------------
#
# Models reuse the IDV1 container; the float32 payload is an informative
# preview while the authoritative float64 arrays travel in the JSON
# metadata, so a save/load round trip is bitwise exact.


def _pack_f64(arr: np.ndarray) -> dict:
    return {
        "shape": list(arr.shape),
        "data": np.ascontiguousarray(arr, dtype="<f8").tobytes().hex(),
    }


def _unpack_f64(obj, path, name) -> np.ndarray:
    try:
        flat = np.frombuffer(bytes.fromhex(obj["data"]), dtype="<f8")
        return flat.reshape(obj["shape"]).astype(np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad {name} field in model metadata: {exc}") from exc


def write_model(path, kind: str, arrays: dict, extra: dict | None = None):
    """Persist named float64 arrays under a model `kind` tag."""
    metadata = {
        "model": kind,
        "arrays": {name: _pack_f64(np.asarray(a, dtype=np.float64)) for name, a in arrays.items()},
    }
    if extra:
        metadata["extra"] = extra
    first = next(iter(arrays.values()))
    preview = np.asarray(first, dtype=np.float64)
    preview = preview.reshape(1, -1) if preview.ndim == 1 else preview
    write_idv(path, preview, metadata)


def read_model(path, kind: str):
    """Load arrays written by :func:`write_model`; checks the kind tag."""
    _, metadata = read_idv(path)
    if metadata is None or "model" not in metadata:
        raise FormatError(f"{path}: not a model file (no metadata)")
    if metadata["model"] != kind:
        raise FormatError(f"{path}: model kind {metadata['model']!r}, expected {kind!r}")
    raw = metadata.get("arrays")
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: model metadata missing arrays")
    arrays = {name: _unpack_f64(obj, path, name) for name, obj in raw.items()}
    return arrays, metadata.get("extra") or {}
