"""Deterministic synthetic dual-space embedding worlds.

Geometry per class c:
  * a unit VM-space prototype p_c, drawn independently per class, and a
    VLM-space prototype q_c drawn near a shared family center -- classes in
    the same family are confusable through text but remain well separated
    in VM space, which is exactly the regime where image queries add value;
  * a per-class linear map W_c from VM to VLM space that collapses toward
    q_c (a rank-one term outer(q_c, p_c) plus a small random residual), so
    a generated image pushed through it lands near the class VLM prototype;
  * "real" database images: normalize(p_c + noise_real * eps) in VM space,
    with an independently-noised VLM twin around q_c (real photographs are
    encoded well in both spaces);
  * "generated" images for generator g: normalize(core + b_g + noise_syn *
    eps), where b_g is a fixed per-generator style offset of norm
    gen_bias_strength. With probability failure_rate the generation fails:
    core is a random direction instead of p_c and the style offset is
    amplified by failure_bias_scale (failed generations collapse toward the
    generator's signature look). The shared per-generator style makes
    same-generator synthetic pairs more similar than synthetic-to-real
    pairs, the discrepancy the clamped-positive trick compensates for;
  * the text embedding: normalize(q_c + gap_strength * o) with o one global
    unit offset shared by all classes (a shared-direction modality gap).

Classes are split disjointly into train and eval (zero-shot: evaluation
classes never seen during training). Everything is a pure function of the
config, seed included.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .store import (
    DualSpaceDatabase,
    QueryBundle,
    make_embedding_set,
    normalize_rows,
    write_atomic,
    write_embedding_set,
    write_json_atomic,
    write_label_names,
    write_query_bundles,
)
from .training import ClassEntry, TrainStore


@dataclass
class SynthConfig:
    num_classes: int = 60
    d_c: int = 32
    d_i: int = 32
    db_items_per_class: int = 40
    images_per_class_per_generator: int = 10
    num_generators: int = 3
    noise_real: float = 0.35
    noise_syn: float = 0.35
    gap_strength: float = 0.8
    gen_bias_strength: float = 0.4
    train_fraction: float = 0.7
    seed: int = 0
    # class-family structure: q_c is drawn family_spread-close to one of
    # ceil(num_classes / family_size) shared VLM-space family centers
    family_size: int = 4
    family_spread: float = 0.2
    # residual scale of the VM->VLM class map beyond its rank-one core
    map_residual: float = 0.3
    # fraction of generated images that miss their class, and how much the
    # generator style offset is amplified for those failures
    failure_rate: float = 0.45
    failure_bias_scale: float = 2.5
    # noise scale factor for the VLM twin of database images, relative to
    # noise_real
    db_vlm_noise_scale: float = 0.55

    def validate(self) -> None:
        if self.d_c < 2 or self.d_i < 2:
            raise ValidationError("dimensions must be >= 2")
        if not (0.0 < self.train_fraction < 1.0):
            raise ValidationError("train_fraction must be in (0,1)")
        if min(self.noise_real, self.noise_syn, self.gap_strength,
               self.gen_bias_strength, self.family_spread, self.map_residual,
               self.failure_bias_scale, self.db_vlm_noise_scale) < 0:
            raise ValidationError("noise / offset strengths must be >= 0")
        if self.family_size < 1:
            raise ValidationError("family_size must be >= 1")
        if not (0.0 <= self.failure_rate < 1.0):
            raise ValidationError("failure_rate must be in [0,1)")
        if self.num_classes < 2 or self.num_generators < 1:
            raise ValidationError("need >= 2 classes and >= 1 generator")
        if self.db_items_per_class < 1 or self.images_per_class_per_generator < 1:
            raise ValidationError("per-class item counts must be >= 1")


@dataclass
class SynthWorld:
    config: SynthConfig
    database: DualSpaceDatabase
    train_store: TrainStore
    eval_bundles: list[QueryBundle]
    train_class_ids: list[int]
    eval_class_ids: list[int]
    class_names: dict[int, str]
    # per-class generated image banks for all classes, kept for the
    # similarity-distribution measurement: class id -> (vm vectors, tags)
    generated: dict[int, tuple[np.ndarray, np.ndarray]]


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValidationError("degenerate zero vector during world generation")
    return v / n


def generate_world(config: SynthConfig) -> SynthWorld:
    config.validate()
    rng = np.random.default_rng(config.seed)
    C, d_c, d_i = config.num_classes, config.d_c, config.d_i

    gap_dir = _unit(rng.standard_normal(d_c))
    gen_bias = np.stack([
        _unit(rng.standard_normal(d_i)) * config.gen_bias_strength
        for _ in range(config.num_generators)
    ])
    n_families = (C + config.family_size - 1) // config.family_size
    family_centers = [_unit(rng.standard_normal(d_c)) for _ in range(n_families)]

    class_names = {c: f"class_{c:03d}" for c in range(C)}
    split = rng.permutation(C)
    n_train = int(round(config.train_fraction * C))
    n_train = min(max(n_train, 1), C - 1)
    train_ids = sorted(int(c) for c in split[:n_train])
    eval_ids = sorted(int(c) for c in split[n_train:])

    db_vm_rows, db_vlm_rows, db_labels = [], [], []
    texts = np.zeros((C, d_c))
    train_entries: dict[int, ClassEntry] = {}
    generated: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    bundles: list[QueryBundle] = []

    for c in range(C):
        proto = _unit(rng.standard_normal(d_i))
        vlm_proto = _unit(
            family_centers[c // config.family_size]
            + config.family_spread * rng.standard_normal(d_c)
        )
        texts[c] = _unit(vlm_proto + config.gap_strength * gap_dir)
        residual = rng.standard_normal((d_c, d_i)) / np.sqrt(d_i)
        cmap = np.outer(vlm_proto, proto) + config.map_residual * residual

        for _ in range(config.db_items_per_class):
            vm = _unit(proto + config.noise_real * rng.standard_normal(d_i))
            # real images are encoded well in both spaces: the VLM twin gets
            # independent noise around the VLM prototype rather than the
            # doubly-degraded push-through used for generated images
            vlm = _unit(vlm_proto + config.db_vlm_noise_scale * config.noise_real
                        * rng.standard_normal(d_c))
            db_vm_rows.append(vm)
            db_vlm_rows.append(vlm)
            db_labels.append(c)

        g_vm, g_vlm, g_tags = [], [], []
        for g in range(config.num_generators):
            for _ in range(config.images_per_class_per_generator):
                if rng.random() < config.failure_rate:
                    core = _unit(rng.standard_normal(d_i))
                    style = config.failure_bias_scale * gen_bias[g]
                else:
                    core = proto
                    style = gen_bias[g]
                vm = _unit(core + style + config.noise_syn * rng.standard_normal(d_i))
                vlm = _unit(cmap @ vm
                            + config.noise_syn * rng.standard_normal(d_c) / np.sqrt(d_c))
                g_vm.append(vm)
                g_vlm.append(vlm)
                g_tags.append(g)
        g_vm = np.array(g_vm, dtype=np.float64)
        g_vlm = np.array(g_vlm, dtype=np.float64)
        g_tags = np.array(g_tags, dtype=np.int32)
        generated[c] = (g_vm.astype(np.float32), g_tags)

        if c in set(train_ids):
            train_entries[c] = ClassEntry(
                class_id=c,
                text_embedding=texts[c].astype(np.float32),
                image_vm=g_vm.astype(np.float32),
                image_vlm=g_vlm.astype(np.float32),
                generator_tags=g_tags,
            )
        else:
            bundles.append(
                QueryBundle(
                    query_id=c,
                    text_embedding=texts[c].astype(np.float32),
                    image_queries=normalize_rows(g_vm.astype(np.float32)),
                    generator_tags=g_tags,
                    label=c,
                )
            )

    n_db = len(db_labels)
    db = DualSpaceDatabase(
        vlm_space=make_embedding_set(d_c, np.arange(n_db), db_labels, np.array(db_vlm_rows)),
        vm_space=make_embedding_set(d_i, np.arange(n_db), db_labels, np.array(db_vm_rows)),
        label_names=class_names,
    )
    db.validate()
    store = TrainStore(classes=[train_entries[c] for c in train_ids])
    store.validate()
    return SynthWorld(
        config=config,
        database=db,
        train_store=store,
        eval_bundles=bundles,
        train_class_ids=train_ids,
        eval_class_ids=eval_ids,
        class_names=class_names,
        generated=generated,
    )


def measure_similarity_distributions(
    world: SynthWorld, bins: int = 40
) -> dict:
    """Same-class cosine histograms: generated-vs-real-db ("syn2real") and
    generated-vs-generated within the same generator ("syn2syn", self-pairs
    excluded; the shared per-generator bias cancels only within a generator).
    """
    db_labels = world.database.vm_space.labels
    db_vecs = world.database.vm_space.vectors.astype(np.float64)
    syn2real, syn2syn = [], []
    for c, (g_vm, g_tags) in sorted(world.generated.items()):
        g64 = normalize_rows(g_vm).astype(np.float64)
        real = db_vecs[db_labels == np.uint32(c)]
        if len(real):
            syn2real.append((g64 @ real.T).ravel())
        for g in np.unique(g_tags):
            sub = g64[g_tags == g]
            dots = sub @ sub.T
            iu = np.triu_indices(len(sub), k=1)
            syn2syn.append(dots[iu])
    # unit norms are only guaranteed to 1e-5, so cosines can poke above 1;
    # clip so every pair lands inside the histogram range
    syn2real = np.clip(np.concatenate(syn2real), -1.0, 1.0)
    syn2syn = np.clip(np.concatenate(syn2syn), -1.0, 1.0)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    h_real, _ = np.histogram(syn2real, bins=edges)
    h_syn, _ = np.histogram(syn2syn, bins=edges)
    return {
        "bin_edges": edges,
        "syn2real_hist": h_real,
        "syn2syn_hist": h_syn,
        "syn2real_count": len(syn2real),
        "syn2syn_count": len(syn2syn),
        "syn2real_mean": float(syn2real.mean()),
        "syn2syn_mean": float(syn2syn.mean()),
    }


def write_similarity_csv(measurement: dict, path: str | Path) -> None:
    lines = ["bin_left,bin_right,syn2real,syn2syn"]
    edges = measurement["bin_edges"]
    for i in range(len(edges) - 1):
        lines.append(
            f"{edges[i]!r},{edges[i + 1]!r},"
            f"{int(measurement['syn2real_hist'][i])},{int(measurement['syn2syn_hist'][i])}"
        )
    write_atomic(path, ("\n".join(lines) + "\n").encode("utf-8"))


def write_world(world: SynthWorld, out_dir: str | Path) -> Path:
    """Persist a world: EMB1 files, label sidecar, bundle manifest, train
    store files, and a JSON world manifest tying everything together."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    write_embedding_set(world.database.vlm_space, out / "db_vlm.emb")
    write_embedding_set(world.database.vm_space, out / "db_vm.emb")
    write_label_names(world.class_names, out / "labels.json")

    store = world.train_store
    n_img = sum(len(c.image_vm) for c in store.classes)
    text = make_embedding_set(
        store.d_c,
        [c.class_id for c in store.classes],
        [c.class_id for c in store.classes],
        np.stack([c.text_embedding for c in store.classes]),
    )
    img_ids = np.arange(n_img, dtype=np.uint64)
    img_labels = np.concatenate([
        np.full(len(c.image_vm), c.class_id, np.uint32) for c in store.classes
    ])
    vm = make_embedding_set(
        store.d_i, img_ids, img_labels,
        np.concatenate([c.image_vm for c in store.classes]),
    )
    vlm = make_embedding_set(
        store.d_c, img_ids, img_labels,
        np.concatenate([c.image_vlm for c in store.classes]),
    )
    tags = np.concatenate([c.generator_tags for c in store.classes])
    write_embedding_set(text, out / "train_text.emb")
    write_embedding_set(vm, out / "train_images_vm.emb")
    write_embedding_set(vlm, out / "train_images_vlm.emb")
    write_json_atomic(out / "train_tags.json", [int(t) for t in tags])

    bundle_manifest = write_query_bundles(world.eval_bundles, out, "queries")

    manifest = {
        "format": "hybridrank-world-v1",
        "config": asdict(world.config),
        "db": {"vlm": "db_vlm.emb", "vm": "db_vm.emb", "labels": "labels.json"},
        "train": {
            "text": "train_text.emb",
            "images_vm": "train_images_vm.emb",
            "images_vlm": "train_images_vlm.emb",
            "tags": "train_tags.json",
        },
        "queries": bundle_manifest.name,
        "train_class_ids": world.train_class_ids,
        "eval_class_ids": world.eval_class_ids,
    }
    path = out / "world_manifest.json"
    write_json_atomic(path, manifest)
    return path


def load_train_store(manifest_path: str | Path) -> TrainStore:
    """Rebuild a TrainStore from the files referenced by a world manifest."""
    from .store import read_embedding_set  # local import to avoid cycle noise

    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text("utf-8"))
    if manifest.get("format") != "hybridrank-world-v1":
        raise ValidationError(f"{manifest_path}: not a world manifest")
    base = manifest_path.parent
    t = manifest["train"]
    text = read_embedding_set(base / t["text"])
    vm = read_embedding_set(base / t["images_vm"])
    vlm = read_embedding_set(base / t["images_vlm"])
    tags = np.array(json.loads((base / t["tags"]).read_text("utf-8")), dtype=np.int32)
    if not np.array_equal(vm.ids, vlm.ids) or not np.array_equal(vm.labels, vlm.labels):
        raise ValidationError("train image vm/vlm files are not aligned")
    if len(tags) != vm.count:
        raise ValidationError("generator tag list length mismatch")
    classes = []
    for row, cid in enumerate(text.ids):
        cid = int(cid)
        mask = vm.labels == np.uint32(cid)
        classes.append(ClassEntry(
            class_id=cid,
            text_embedding=text.vectors[row],
            image_vm=vm.vectors[mask],
            image_vlm=vlm.vectors[mask],
            generator_tags=tags[mask],
        ))
    store = TrainStore(classes=classes)
    store.validate()
    return store
