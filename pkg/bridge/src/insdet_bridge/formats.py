"""Writers for the engine's dataset files.

The bridge talks to the detection engine only through its documented
external formats, so the binary layout is reimplemented here instead of
imported: 16-byte header (magic "IDOW", uint16 version 1, uint16 reserved 0,
uint32 rows, uint32 dim, little-endian) followed by rows x dim float32
values, row-major.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import BridgeError

_HEADER = struct.Struct("<4sHHII")


def _atomic_write_bytes(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_embeddings(matrix: np.ndarray, path: Path) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise BridgeError("BadShape", f"embedding matrix must be 2-D, got {matrix.shape}")
    if matrix.size and not np.all(np.isfinite(matrix)):
        raise BridgeError("NonFinite", "refusing to write non-finite embeddings")
    n, q = matrix.shape
    _atomic_write_bytes(path, _HEADER.pack(b"IDOW", 1, 0, n, q) + matrix.tobytes())


def write_manifest(doc: dict, path: Path) -> None:
    _atomic_write_bytes(path, (json.dumps(doc, indent=2) + "\n").encode("utf-8"))
