"""Reference adapter for the idforge generator bridge.

A one-shot batch worker: the engine writes a batch of vectors as an IDV1
file, invokes this package's CLI with ``--in <file> --out <dir>``, and
collects either ``out.idv`` (embeddings mode) or ``img_<k>.pgm`` files,
one per input row (images mode).  Stateless per invocation; the caller's
output mode must match the mode this adapter is configured with.
"""

from pybridge.adapter import AdapterConfig, ModelLoadError, serve_batch
from pybridge.wire import WireError, read_idv, write_idv, write_pgm

__all__ = [
    "AdapterConfig",
    "ModelLoadError",
    "serve_batch",
    "WireError",
    "read_idv",
    "write_idv",
    "write_pgm",
]
