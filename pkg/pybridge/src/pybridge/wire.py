"""Minimal IDV1 and PGM codecs.

IDV1 layout: magic ``IDV1``, little-endian u32 count, u32 dim, then
count*dim little-endian IEEE-754 binary32 values, then optionally a
u32 length followed by that many bytes of JSON metadata.  Nothing may
follow the metadata block.

This module deliberately does not import the engine; the two sides of
the bridge share only the bytes on disk.
"""

import json
import struct

import numpy as np

MAGIC = b"IDV1"
_HEADER = struct.Struct("<4sII")


class WireError(Exception):
    """Raised when a file does not parse as IDV1."""


def read_idv(path):
    """Parse an IDV1 file.

    Returns ``(vectors, metadata_bytes)`` where vectors is a float32
    array of shape (count, dim) and metadata_bytes is the raw JSON
    block or None.  Payload bytes are preserved exactly (no cast), so
    write_idv(read_idv(p)) reproduces p byte for byte.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise WireError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, count, dim = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise WireError(f"{path}: bad magic {magic!r}")
    if dim == 0:
        raise WireError(f"{path}: dim must be >= 1")
    payload_len = count * dim * 4
    end = _HEADER.size + payload_len
    if len(blob) < end:
        raise WireError(
            f"{path}: payload truncated, need {payload_len} bytes, "
            f"have {len(blob) - _HEADER.size}"
        )
    vectors = np.frombuffer(
        blob, dtype="<f4", count=count * dim, offset=_HEADER.size
    ).reshape(count, dim)
    metadata = None
    if len(blob) > end:
        if len(blob) < end + 4:
            raise WireError(f"{path}: truncated metadata length")
        (meta_len,) = struct.unpack_from("<I", blob, end)
        meta_end = end + 4 + meta_len
        if len(blob) < meta_end:
            raise WireError(f"{path}: metadata truncated")
        if len(blob) > meta_end:
            raise WireError(f"{path}: {len(blob) - meta_end} trailing bytes")
        metadata = blob[end + 4:meta_end]
    return vectors.copy(), metadata


def write_idv(path, vectors, metadata=None):
    """Write float32 vectors as IDV1.

    metadata may be None, raw bytes (written verbatim), or a dict
    (serialized as compact JSON).
    """
    arr = np.ascontiguousarray(vectors, dtype="<f4")
    if arr.ndim != 2:
        raise WireError(f"vectors must be 2-D, got shape {arr.shape}")
    if arr.shape[1] == 0:
        raise WireError("dim must be >= 1")
    if isinstance(metadata, dict):
        metadata = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())
        if metadata is not None:
            fh.write(struct.pack("<I", len(metadata)))
            fh.write(metadata)


def write_pgm(path, pixels):
    """Write a 2-D uint8 array as a binary PGM (P5, maxval 255)."""
    arr = np.asarray(pixels)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise WireError(
            f"pixels must be a 2-D uint8 array, got {arr.dtype} {arr.shape}"
        )
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())
