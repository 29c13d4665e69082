"""Writer for the EMB1 embedding file contract.

EMB1 layout (little-endian):
    bytes 0-7   magic ASCII "CLETEMB\\0"
    u32         version (= 1)
    u8          dtype   (= 0, 32-bit float)
    u32         dim
    u64         count
    then `count` records of: u64 id, u32 label_id, dim * f32

Label names travel in a UTF-8 JSON sidecar mapping decimal label-id
strings to class names. This module implements the shared contract from
the format description; the retrieval engine owns the canonical reader.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import JobValidationError

EMB_MAGIC = b"CLETEMB\0"
EMB_VERSION = 1
EMB_DTYPE_F32 = 0
_HEADER = struct.Struct("<8sIBIQ")

NORM_TOL = 1e-5


def write_atomic(path: str | Path, data: bytes) -> None:
    """Write via temp file + rename so failures never leave partial output."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json_atomic(path: str | Path, obj) -> None:
    write_atomic(path, (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8"))


def write_emb1(path: str | Path, ids, labels, vectors) -> None:
    """Validate and serialize one embedding collection.

    ids must be unique, vectors unit-norm float32 rows; serialization is
    deterministic (same inputs -> identical bytes).
    """
    ids = np.asarray(ids, dtype=np.uint64)
    labels = np.asarray(labels, dtype=np.uint32)
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[0] != len(ids) or len(labels) != len(ids):
        raise JobValidationError(
            f"shape mismatch: {len(ids)} ids, {len(labels)} labels, "
            f"vector array {vectors.shape}"
        )
    count, dim = vectors.shape
    if dim <= 0:
        raise JobValidationError("embedding dim must be positive")
    if len(np.unique(ids)) != count:
        raise JobValidationError("duplicate ids in export")
    if count:
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        worst = float(np.abs(norms - 1.0).max())
        if worst > NORM_TOL:
            raise JobValidationError(
                f"vectors are not unit-norm (max |norm-1| = {worst:.3g})"
            )
    header = _HEADER.pack(EMB_MAGIC, EMB_VERSION, EMB_DTYPE_F32, dim, count)
    rec = np.dtype([("id", "<u8"), ("label", "<u4"), ("vec", "<f4", (dim,))])
    records = np.zeros(count, dtype=rec)
    records["id"] = ids
    records["label"] = labels
    records["vec"] = vectors
    write_atomic(path, header + records.tobytes())


def write_label_names(names: dict[int, str], path: str | Path) -> None:
    write_json_atomic(path, {str(k): v for k, v in names.items()})
