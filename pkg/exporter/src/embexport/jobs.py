"""Export jobs: text queries, image embeddings, query-image generation,
and the class-overlap filter.

All outputs are deterministic given fixed backend versions; every
embedding file follows the EMB1 contract and every manifest pins the
backend name/version it was produced with.
"""
from __future__ import annotations

import string
from dataclasses import dataclass, field
from pathlib import Path
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .backends import ImageEncoder, ImageGenerator, TextEncoder
from .emb1 import write_atomic, write_emb1, write_json_atomic, write_label_names
from .errors import BackendUnavailableError, JobValidationError

IMAGE_EXTENSIONS = {".ppm", ".png", ".jpg", ".jpeg", ".bmp", ".webp"}


def read_class_list(path: str | Path) -> list[str]:
    """Class-list text file: one entry per line, blank lines ignored."""
    entries = [line.strip() for line in Path(path).read_text("utf-8").splitlines()]
    entries = [e for e in entries if e]
    if not entries:
        raise JobValidationError(f"{path}: empty class list")
    return entries


def validate_prompt_template(template: str) -> None:
    """The template must contain exactly one placeholder for the class text."""
    try:
        fields = [f for _, f, _, _ in string.Formatter().parse(template) if f is not None]
    except ValueError as exc:
        raise JobValidationError(f"malformed prompt template: {exc}") from exc
    if len(fields) != 1:
        raise JobValidationError(
            f"prompt template must contain exactly one placeholder, found {len(fields)}: "
            f"{template!r}"
        )


def render_prompt(template: str, class_text: str) -> str:
    validate_prompt_template(template)
    fields = [f for _, f, _, _ in string.Formatter().parse(template) if f is not None]
    if fields[0] == "":
        return template.format(class_text)
    return template.format(**{fields[0]: class_text})


@dataclass
class ExportJob:
    """Everything needed to export one dataset.

    Either `image_dir` (folder of images, labels from parent directory)
    or `class_texts` (query/class names) describes the data; encoders and
    generators are pluggable backends.
    """

    class_texts: list[str] = field(default_factory=list)
    image_dir: Path | None = None
    prompt_template: str = "A photo of a {}"
    text_encoder: TextEncoder | None = None
    vlm_image_encoder: ImageEncoder | None = None
    vm_image_encoder: ImageEncoder | None = None
    generators: list[ImageGenerator] = field(default_factory=list)
    images_per_class: int = 1
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: Path = Path(".")

    def validate(self) -> None:
        validate_prompt_template(self.prompt_template)
        if self.images_per_class < 1:
            raise JobValidationError("images_per_class must be >= 1")
        if len(self.seeds) != self.images_per_class:
            raise JobValidationError(
                f"need one seed per image: {len(self.seeds)} seeds for "
                f"k={self.images_per_class}"
            )
        if len(set(self.seeds)) != len(self.seeds):
            raise JobValidationError("seeds must be unique")


def export_text_queries(
    class_texts: list[str],
    encoder: TextEncoder,
    template: str,
    out_path: str | Path,
    names_path: str | Path | None = None,
) -> Path:
    """Encode one prompt per class into a single EMB1 file.

    Record ids and label ids are the class's position in the input list,
    so re-runs with the same inputs produce identical files.
    """
    if not class_texts:
        raise JobValidationError("empty class list")
    validate_prompt_template(template)
    vectors = np.stack([
        encoder.encode_text(render_prompt(template, text)) for text in class_texts
    ])
    ids = np.arange(len(class_texts), dtype=np.uint64)
    write_emb1(out_path, ids, ids.astype(np.uint32), vectors)
    if names_path is not None:
        write_label_names({i: t for i, t in enumerate(class_texts)}, names_path)
    return Path(out_path)


def _scan_image_dir(image_dir: Path) -> list[Path]:
    files = sorted(
        p for p in image_dir.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )
    if not files:
        raise JobValidationError(f"{image_dir}: no images found")
    return files


def export_image_embeddings(
    image_dir: str | Path,
    vlm_encoder: ImageEncoder,
    vm_encoder: ImageEncoder,
    out_vlm: str | Path,
    out_vm: str | Path,
    names_path: str | Path | None = None,
    workers: int = 1,
) -> tuple[Path, Path]:
    """Encode a folder of images into paired VLM-space / VM-space EMB1 files.

    Files are scanned in sorted order and written in a single pass, so the
    two outputs share an identical id sequence. The class of an image is
    its parent directory name; label ids are assigned by sorted class name.
    Encoding may parallelize across images (order-preserving); output
    writing is single-threaded per file.
    """
    image_dir = Path(image_dir)
    files = _scan_image_dir(image_dir)
    class_names = sorted({p.parent.name for p in files})
    label_of = {name: i for i, name in enumerate(class_names)}

    payloads = [p.read_bytes() for p in files]

    def encode(data: bytes) -> tuple[np.ndarray, np.ndarray]:
        return vlm_encoder.encode_image_bytes(data), vm_encoder.encode_image_bytes(data)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(encode, payloads))
    else:
        pairs = [encode(d) for d in payloads]

    ids = np.arange(len(files), dtype=np.uint64)
    labels = np.array([label_of[p.parent.name] for p in files], dtype=np.uint32)
    write_emb1(out_vlm, ids, labels, np.stack([v for v, _ in pairs]))
    write_emb1(out_vm, ids, labels, np.stack([v for _, v in pairs]))
    if names_path is not None:
        write_label_names({i: n for n, i in label_of.items()}, names_path)
    return Path(out_vlm), Path(out_vm)


def generate_query_images(
    class_texts: list[str],
    generators: list[ImageGenerator],
    k: int,
    seeds: list[int],
    out_dir: str | Path,
    template: str = "A photo of a {}",
) -> Path:
    """Generate k images per class per generator; returns the manifest path.

    Filenames encode (class index, generator name, seed). All images are
    rendered in memory before any file is written, so a backend failure
    never leaves partial output.
    """
    if not class_texts:
        raise JobValidationError("empty class list")
    if k < 1:
        raise JobValidationError("k must be >= 1")
    if len(seeds) != k:
        raise JobValidationError(f"need one seed per image: {len(seeds)} seeds for k={k}")
    if len(set(seeds)) != len(seeds):
        raise JobValidationError("seeds must be unique")
    if not generators:
        raise JobValidationError("no generators given")
    validate_prompt_template(template)
    for gen in generators:
        if not gen.available():
            raise BackendUnavailableError(f"generator {gen.name} is unavailable")

    rendered: list[tuple[str, bytes]] = []
    entries = []
    for ci, text in enumerate(class_texts):
        prompt = render_prompt(template, text)
        for gen in generators:
            for seed in seeds:
                fname = f"class{ci:04d}__{gen.name}__seed{seed}.ppm"
                rendered.append((fname, gen.generate(prompt, seed)))
                entries.append({
                    "class_index": ci,
                    "class_text": text,
                    "generator": gen.name,
                    "seed": seed,
                    "file": fname,
                })

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for fname, data in rendered:
        write_atomic(out_dir / fname, data)
    manifest = {
        "classes": list(class_texts),
        "generators": [{"name": g.name, "version": g.version} for g in generators],
        "images_per_class_per_generator": k,
        "seeds": list(seeds),
        "prompt_template": template,
        "files": entries,
    }
    manifest_path = out_dir / "generation_manifest.json"
    write_json_atomic(manifest_path, manifest)
    return manifest_path


def filter_overlapping_classes(
    train_classes: list[str],
    benchmark_class_lists: list[list[str]],
    encoder: TextEncoder,
) -> tuple[list[str], list[dict]]:
    """Remove, for each benchmark class, its nearest train class by text cosine.

    The nearest neighbor is removed regardless of how low the best cosine
    is. Returns (survivors in original order, removal log with one entry
    per unique removed train class).
    """
    if not train_classes:
        raise JobValidationError("empty train class list")
    train_vecs = np.stack([
        encoder.encode_text(c) for c in train_classes
    ]).astype(np.float64)

    removed: dict[int, dict] = {}
    for bench in benchmark_class_lists:
        for bclass in bench:
            q = encoder.encode_text(bclass).astype(np.float64)
            cosines = train_vecs @ q
            nearest = int(np.argmax(cosines))
            if nearest not in removed:
                removed[nearest] = {
                    "train_class": train_classes[nearest],
                    "train_index": nearest,
                    "benchmark_class": bclass,
                    "cosine": float(cosines[nearest]),
                }
    survivors = [c for i, c in enumerate(train_classes) if i not in removed]
    log = [removed[i] for i in sorted(removed)]
    return survivors, log
