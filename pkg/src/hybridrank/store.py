"""EMB1 embedding file format, dual-space databases, and query bundles.

EMB1 layout (little-endian):
    bytes 0-7   magic ASCII "CLETEMB\\0"
    u32         version (= 1)
    u8          dtype   (= 0, 32-bit float)
    u32         dim
    u64         count
    then `count` records of: u64 id, u32 label_id, dim * f32

The 25-byte header is followed by a packed record array, so serialization
is deterministic: writing the same set twice yields identical bytes.

Label names travel in a UTF-8 JSON sidecar mapping decimal label-id
strings to class names.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

EMB_MAGIC = b"CLETEMB\0"
EMB_VERSION = 1
EMB_DTYPE_F32 = 0
_HEADER = struct.Struct("<8sIBIQ")

NORM_TOL = 1e-5


def write_atomic(path: str | Path, data: bytes) -> None:
    """Write bytes via a temp file + rename so failures never leave partial output."""
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
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    write_atomic(path, text.encode("utf-8"))


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("label", "<u4"), ("vec", "<f4", (dim,))])


@dataclass
class EmbeddingSet:
    """A fixed-dimension collection of float32 vectors with ids and labels."""

    dim: int
    ids: np.ndarray        # (count,) uint64
    labels: np.ndarray     # (count,) uint32
    vectors: np.ndarray    # (count, dim) float32

    @property
    def count(self) -> int:
        return len(self.ids)

    def validate(self) -> None:
        if self.dim <= 0:
            raise ValidationError(f"dim must be positive, got {self.dim}")
        if self.vectors.shape != (self.count, self.dim):
            raise ValidationError(
                f"vector array shape {self.vectors.shape} does not match "
                f"count={self.count}, dim={self.dim}"
            )
        if len(np.unique(self.ids)) != self.count:
            raise ValidationError("duplicate ids in embedding set")
        if self.count:
            norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
            worst = float(np.abs(norms - 1.0).max())
            if worst > NORM_TOL:
                raise ValidationError(
                    f"vectors are not unit-norm (max |norm-1| = {worst:.3g})"
                )

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.vectors, other.vectors)
        )


def normalize_rows(vectors: np.ndarray) -> np.ndarray:
    """Scale rows to unit norm (float32 out); rows already within tolerance
    are passed through untouched so normalized data round-trips bit-exactly."""
    vecs = np.asarray(vectors, dtype=np.float32)
    if vecs.size == 0:
        return vecs.copy()
    norms = np.linalg.norm(vecs.astype(np.float64), axis=1)
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise ValidationError(f"zero-norm vector at row {bad} cannot be normalized")
    out = vecs.copy()
    off = np.abs(norms - 1.0) > NORM_TOL
    if np.any(off):
        out[off] = (vecs[off].astype(np.float64) / norms[off, None]).astype(np.float32)
    return out


def make_embedding_set(
    dim: int,
    ids,
    labels,
    vectors,
    renormalize: bool = True,
) -> EmbeddingSet:
    ids = np.asarray(ids, dtype=np.uint64)
    labels = np.asarray(labels, dtype=np.uint32)
    vectors = np.asarray(vectors, dtype=np.float32).reshape(len(ids), dim)
    if renormalize:
        vectors = normalize_rows(vectors)
    out = EmbeddingSet(dim=dim, ids=ids, labels=labels, vectors=vectors)
    out.validate()
    return out


def write_embedding_set(emb: EmbeddingSet, path: str | Path) -> None:
    emb.validate()
    if emb.dim > 0xFFFFFFFF:
        raise FormatError("dim overflows the u32 header field")
    header = _HEADER.pack(EMB_MAGIC, EMB_VERSION, EMB_DTYPE_F32, emb.dim, emb.count)
    records = np.zeros(emb.count, dtype=_record_dtype(emb.dim))
    records["id"] = emb.ids
    records["label"] = emb.labels
    records["vec"] = emb.vectors
    write_atomic(path, header + records.tobytes())


def read_embedding_set(path: str | Path, renormalize: bool = True) -> EmbeddingSet:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the 25-byte EMB1 header")
    magic, version, dtype, dim, count = _HEADER.unpack_from(data)
    if magic != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != EMB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != EMB_DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    if dim == 0:
        raise FormatError(f"{path}: dim must be positive")
    rec = _record_dtype(dim)
    payload = data[_HEADER.size:]
    if len(payload) != count * rec.itemsize:
        raise FormatError(
            f"{path}: truncated payload ({len(payload)} bytes, "
            f"expected {count * rec.itemsize})"
        )
    records = np.frombuffer(payload, dtype=rec)
    ids = records["id"].copy()
    labels = records["label"].copy()
    vectors = records["vec"].copy().reshape(count, dim)
    if len(np.unique(ids)) != count:
        raise FormatError(f"{path}: duplicate ids")
    if renormalize:
        vectors = normalize_rows(vectors)
    out = EmbeddingSet(dim=dim, ids=ids, labels=labels, vectors=vectors)
    if renormalize:
        out.validate()
    return out


def write_label_names(names: dict[int, str], path: str | Path) -> None:
    write_json_atomic(path, {str(k): v for k, v in names.items()})


def read_label_names(path: str | Path) -> dict[int, str]:
    raw = json.loads(Path(path).read_text("utf-8"))
    return {int(k): str(v) for k, v in raw.items()}


@dataclass
class DualSpaceDatabase:
    """One corpus held in two spaces, id-aligned row by row."""

    vlm_space: EmbeddingSet
    vm_space: EmbeddingSet
    label_names: dict[int, str] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return self.vlm_space.count

    def validate(self) -> None:
        self.vlm_space.validate()
        self.vm_space.validate()
        if not np.array_equal(self.vlm_space.ids, self.vm_space.ids):
            raise ValidationError("vlm/vm id sequences differ")
        if not np.array_equal(self.vlm_space.labels, self.vm_space.labels):
            raise ValidationError("vlm/vm labels differ")
        missing = set(np.unique(self.vlm_space.labels).tolist()) - set(self.label_names)
        if missing:
            raise ValidationError(f"labels without a name entry: {sorted(missing)}")


def assemble_database(
    vlm: EmbeddingSet, vm: EmbeddingSet, names: dict[int, str]
) -> DualSpaceDatabase:
    """Align vm onto vlm's id order and validate the pairing."""
    if set(vlm.ids.tolist()) != set(vm.ids.tolist()):
        raise ValidationError("id mismatch between vlm and vm spaces")
    pos = {int(i): j for j, i in enumerate(vm.ids)}
    perm = np.array([pos[int(i)] for i in vlm.ids], dtype=np.int64)
    vm_aligned = EmbeddingSet(
        dim=vm.dim,
        ids=vm.ids[perm].copy(),
        labels=vm.labels[perm].copy(),
        vectors=vm.vectors[perm].copy(),
    )
    for j in range(vlm.count):
        if vlm.labels[j] != vm_aligned.labels[j]:
            raise ValidationError(
                f"label disagreement for id {int(vlm.ids[j])}: "
                f"{int(vlm.labels[j])} vs {int(vm_aligned.labels[j])}"
            )
    db = DualSpaceDatabase(vlm_space=vlm, vm_space=vm_aligned, label_names=dict(names))
    db.validate()
    return db


def load_database(vlm_path, vm_path, names_path, renormalize: bool = True) -> DualSpaceDatabase:
    return assemble_database(
        read_embedding_set(vlm_path, renormalize),
        read_embedding_set(vm_path, renormalize),
        read_label_names(names_path),
    )


@dataclass
class QueryBundle:
    """One retrieval query: a text embedding plus k generated image-query embeddings."""

    query_id: int
    text_embedding: np.ndarray          # (d_c,) float32, unit norm
    image_queries: np.ndarray           # (k, d_i) float32, unit norm rows
    generator_tags: np.ndarray          # (k,) int32
    label: int | None = None

    @property
    def k(self) -> int:
        return len(self.image_queries)

    def restrict(self, max_k: int | None = None, generators=None) -> "QueryBundle":
        """Sub-select image queries: keep at most max_k per generator, and only
        the named generator tags. Order within a generator is preserved."""
        keep = []
        per_gen: dict[int, int] = {}
        for i, tag in enumerate(self.generator_tags):
            tag = int(tag)
            if generators is not None and tag not in generators:
                continue
            if max_k is not None and per_gen.get(tag, 0) >= max_k:
                continue
            per_gen[tag] = per_gen.get(tag, 0) + 1
            keep.append(i)
        idx = np.array(keep, dtype=np.int64)
        return QueryBundle(
            query_id=self.query_id,
            text_embedding=self.text_embedding,
            image_queries=self.image_queries[idx].reshape(len(idx), self.image_queries.shape[1]),
            generator_tags=self.generator_tags[idx],
            label=self.label,
        )


def write_query_bundles(bundles: list[QueryBundle], out_dir: str | Path, stem: str) -> Path:
    """Persist bundles as two EMB1 files plus a JSON manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not bundles:
        raise ValidationError("cannot write an empty bundle list")
    d_c = len(bundles[0].text_embedding)
    d_i = bundles[0].image_queries.shape[1]

    text = make_embedding_set(
        d_c,
        [b.query_id for b in bundles],
        [0 if b.label is None else b.label for b in bundles],
        np.stack([b.text_embedding for b in bundles]),
    )
    rows: list[np.ndarray] = []
    entries = []
    for b in bundles:
        start = sum(len(r) for r in rows)
        rows.append(b.image_queries)
        entries.append(
            {
                "query_id": int(b.query_id),
                "label": None if b.label is None else int(b.label),
                "image_rows": list(range(start, start + b.k)),
                "generator_tags": [int(t) for t in b.generator_tags],
            }
        )
    all_imgs = np.concatenate(rows) if rows else np.zeros((0, d_i), np.float32)
    labels = np.concatenate(
        [np.full(b.k, 0 if b.label is None else b.label, np.uint32) for b in bundles]
    ) if len(all_imgs) else np.zeros(0, np.uint32)
    images = make_embedding_set(d_i, np.arange(len(all_imgs)), labels, all_imgs)

    text_path = out_dir / f"{stem}_text.emb"
    img_path = out_dir / f"{stem}_images.emb"
    write_embedding_set(text, text_path)
    write_embedding_set(images, img_path)
    manifest = {
        "format": "hybridrank-bundles-v1",
        "text": text_path.name,
        "images": img_path.name,
        "queries": entries,
    }
    manifest_path = out_dir / f"{stem}.json"
    write_json_atomic(manifest_path, manifest)
    return manifest_path


def read_query_bundles(manifest_path: str | Path) -> list[QueryBundle]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text("utf-8"))
    if manifest.get("format") != "hybridrank-bundles-v1":
        raise FormatError(f"{manifest_path}: not a bundle manifest")
    base = manifest_path.parent
    text = read_embedding_set(base / manifest["text"])
    images = read_embedding_set(base / manifest["images"])
    text_row = {int(i): j for j, i in enumerate(text.ids)}
    bundles = []
    for q in manifest["queries"]:
        qid = int(q["query_id"])
        if qid not in text_row:
            raise FormatError(f"query id {qid} missing from text embedding file")
        rows = np.array(q["image_rows"], dtype=np.int64)
        tags = np.array(q["generator_tags"], dtype=np.int32)
        if len(rows) != len(tags):
            raise FormatError(f"query id {qid}: image_rows / generator_tags length mismatch")
        bundles.append(
            QueryBundle(
                query_id=qid,
                text_embedding=text.vectors[text_row[qid]],
                image_queries=images.vectors[rows].reshape(len(rows), images.dim),
                generator_tags=tags,
                label=None if q["label"] is None else int(q["label"]),
            )
        )
    return bundles
