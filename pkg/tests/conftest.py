import numpy as np
import pytest

from hybridrank.store import (
    DualSpaceDatabase,
    QueryBundle,
    make_embedding_set,
)


def unit(v):
    return v / np.linalg.norm(v)


def random_unit_rows(rng, n, d):
    return np.stack([unit(rng.standard_normal(d)) for _ in range(n)])


def tiny_db(rng, n_classes=4, per_class=5, d_c=6, d_i=8):
    """A small random dual-space database with class labels 0..n_classes-1."""
    n = n_classes * per_class
    labels = np.repeat(np.arange(n_classes), per_class)
    vlm = make_embedding_set(d_c, np.arange(n), labels, random_unit_rows(rng, n, d_c))
    vm = make_embedding_set(d_i, np.arange(n), labels, random_unit_rows(rng, n, d_i))
    db = DualSpaceDatabase(vlm, vm, {c: f"c{c}" for c in range(n_classes)})
    db.validate()
    return db


def tiny_bundle(rng, label, d_c=6, d_i=8, k=3, query_id=0):
    tags = np.zeros(k, np.int32)
    return QueryBundle(
        query_id=query_id,
        text_embedding=random_unit_rows(rng, 1, d_c)[0].astype(np.float32),
        image_queries=random_unit_rows(rng, k, d_i).astype(np.float32),
        generator_tags=tags,
        label=label,
    )


@pytest.fixture(scope="session")
def acceptance_world():
    from hybridrank.synthworld import SynthConfig, generate_world

    return generate_world(SynthConfig(seed=0))


@pytest.fixture(scope="session")
def acceptance_training(acceptance_world):
    """Default 2000-step training on the acceptance world, timed once."""
    import time

    from hybridrank.training import TrainConfig, train

    t0 = time.monotonic()
    params, log = train(acceptance_world.train_store, TrainConfig(seed=0))
    return params, log, time.monotonic() - t0
