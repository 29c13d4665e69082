import numpy as np
import pytest

from conftest import random_unit_rows
from hybridrank.aggregator import AggregatorParams, init_params, sigmoid
from hybridrank.errors import ValidationError
from hybridrank.training import (
    ClassEntry,
    TrainBatch,
    TrainConfig,
    TrainStore,
    batch_loss_and_grads,
    build_batch,
    contrastive_loss,
    mine_negative,
    train,
)


def _store(rng, n_classes=8, per_gen=4, n_gens=2, d_c=6, d_i=8):
    classes = []
    for c in range(n_classes):
        n = per_gen * n_gens
        classes.append(ClassEntry(
            class_id=c,
            text_embedding=random_unit_rows(rng, 1, d_c)[0].astype(np.float32),
            image_vm=random_unit_rows(rng, n, d_i).astype(np.float32),
            image_vlm=random_unit_rows(rng, n, d_c).astype(np.float32),
            generator_tags=np.repeat(np.arange(n_gens), per_gen).astype(np.int32),
        ))
    store = TrainStore(classes)
    store.validate()
    return store


def _batch(rng, M=4, N=3, d_c=6, d_i=8):
    return TrainBatch(
        class_ids=np.arange(M),
        text=random_unit_rows(rng, M, d_c),
        images=np.stack([random_unit_rows(rng, N, d_i) for _ in range(M)]),
        pos_vm=random_unit_rows(rng, M, d_i),
        pos_vlm=random_unit_rows(rng, M, d_c),
    )


# --------------------------------------------------------------- build_batch

def test_build_batch_deterministic():
    rng_a = np.random.default_rng(0)
    rng_b = np.random.default_rng(0)
    store = _store(np.random.default_rng(1))
    cfg = TrainConfig(M=4, N=3)
    a = build_batch(store, cfg, rng_a)
    b = build_batch(store, cfg, rng_b)
    assert np.array_equal(a.class_ids, b.class_ids)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.pos_vm, b.pos_vm)


def test_build_batch_exhaustive_when_M_equals_classes():
    store = _store(np.random.default_rng(2), n_classes=5)
    batch = build_batch(store, TrainConfig(M=5, N=2), np.random.default_rng(0))
    assert sorted(batch.class_ids.tolist()) == [0, 1, 2, 3, 4]


def test_build_batch_single_generator_restriction():
    store = _store(np.random.default_rng(3), per_gen=5, n_gens=3)
    cfg = TrainConfig(M=4, N=3, dual_generator=False)
    batch = build_batch(store, cfg, np.random.default_rng(0))
    for i, cid in enumerate(batch.class_ids):
        entry = store.classes[[c.class_id for c in store.classes].index(cid)]
        gen0 = entry.image_vm[entry.generator_tags == entry.generator_tags.min()]
        for img in batch.images[i]:
            assert any(np.allclose(img, g) for g in gen0)


def test_build_batch_pool_too_small():
    store = _store(np.random.default_rng(4), per_gen=2, n_gens=1)
    with pytest.raises(ValidationError, match="pool"):
        build_batch(store, TrainConfig(M=2, N=5), np.random.default_rng(0))


def test_build_batch_not_enough_classes():
    store = _store(np.random.default_rng(5), n_classes=3)
    with pytest.raises(ValidationError, match="classes"):
        build_batch(store, TrainConfig(M=4, N=2), np.random.default_rng(0))


# ------------------------------------------------------------------- mining

def test_mine_negative_two_entries():
    rng = np.random.default_rng(6)
    batch = _batch(rng, M=2)
    params = init_params(8, 1, 0)
    neg = mine_negative(batch, params)
    assert list(neg) == [1, 0]


def test_mine_negative_matches_exhaustive_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        M = int(rng.integers(2, 7))
        batch = _batch(rng, M=M)
        params = AggregatorParams(
            rng.standard_normal((2, 8, 8)).astype(np.float32) * 0.3,
            float(rng.standard_normal()),
        )
        got = mine_negative(batch, params)
        lam = sigmoid(params.lambda_logit)
        from hybridrank.training import _aggregate_batch

        agg, _ = _aggregate_batch(batch, params, True)
        for i in range(M):
            best, best_s = None, -np.inf
            for j in range(M):
                if j == i:
                    continue
                s = (1 - lam) * float(batch.text[i] @ batch.pos_vlm[j]) \
                    + lam * float(agg[i] @ batch.pos_vm[j])
                if s > best_s:
                    best, best_s = j, s
            assert got[i] == best


def test_mine_negative_static_is_frozen():
    rng = np.random.default_rng(8)
    batch = _batch(rng, M=5)
    snapshot = init_params(8, 2, 0)
    first = mine_negative(batch, snapshot)
    for _ in range(3):
        assert np.array_equal(mine_negative(batch, snapshot), first)


# --------------------------------------------------------------------- loss

def test_loss_symmetric_point():
    loss, _, _ = contrastive_loss(0.3, 0.3, 1.0)
    assert np.isclose(loss, np.log(2.0))


def test_loss_reference_value():
    loss, _, _ = contrastive_loss(1.0, 0.0, 1.0)
    assert abs(loss - 0.31326168751822286) < 1e-12


def test_loss_stable_for_large_margin():
    loss, _, _ = contrastive_loss(50.0, 0.0, 1.0)
    assert 0.0 < loss < 1e-20


def test_loss_rejects_bad_tau():
    with pytest.raises(ValidationError, match="tau"):
        contrastive_loss(0.0, 0.0, 0.0)


# ------------------------------------------------------------ batch gradients

def test_frozen_everything_gives_zero_grads():
    rng = np.random.default_rng(9)
    batch = _batch(rng)
    params = init_params(8, 2, 0)
    batch.negatives = mine_negative(batch, params)
    cfg = TrainConfig(M=4, N=3, lambda_trainable=False, freeze_projections=True)
    grads = batch_loss_and_grads(batch, params, cfg)
    assert np.isfinite(grads.loss)
    assert not grads.grad_projections.any()
    assert grads.grad_lambda_logit == 0.0


def test_clamped_positive_substitution():
    rng = np.random.default_rng(10)
    d_i, d_c = 4, 4
    pos = np.zeros(d_i); pos[0] = 1.0
    batch = TrainBatch(
        class_ids=np.array([0, 1]),
        text=np.stack([np.eye(d_c)[1], np.eye(d_c)[2]]),
        images=np.stack([np.stack([pos]), np.stack([np.eye(d_i)[1]])]),
        pos_vm=np.stack([pos, np.eye(d_i)[2]]),
        pos_vlm=np.stack([np.eye(d_c)[3], np.eye(d_c)[0]]),
        negatives=np.array([1, 0]),
    )
    params = init_params(d_i, 1, 0, noise_std=0.0)
    params.lambda_logit = float(rng.standard_normal())
    cfg = TrainConfig(M=2, N=1, tau=1.0, clamp_positive=True)
    grads = batch_loss_and_grads(batch, params, cfg)
    # entry 0: s_i_pos = 1 (query == positive), c_pos clamped to 1, and both
    # negative terms are 0 by orthogonality -> s_pos = 1, s_neg = 0
    lam = params.mixing_weight
    s_pos = (1 - lam) * 1.0 + lam * 1.0
    assert np.isclose(s_pos, 1.0)
    expected0 = contrastive_loss(1.0, 0.0, 1.0)[0]
    # entry 1's terms are all zero too except s_neg via pos_vm[0]
    assert np.isfinite(grads.loss) and grads.loss > 0.5 * expected0


def test_batch_grads_match_finite_differences():
    rng = np.random.default_rng(11)
    batch = _batch(rng, M=4, N=3, d_i=8)
    params = AggregatorParams(
        rng.standard_normal((2, 8, 8)) * 0.4, float(rng.standard_normal())
    )
    batch.negatives = mine_negative(batch, params)
    cfg = TrainConfig(M=4, N=3)
    grads = batch_loss_and_grads(batch, params, cfg)

    def loss_at(proj, logit):
        p = AggregatorParams(proj, logit)
        return batch_loss_and_grads(batch, p, cfg).loss

    step = 1e-4
    num = np.zeros_like(grads.grad_projections)
    for idx in np.ndindex(num.shape):
        hi = params.projections.copy(); hi[idx] += step
        lo = params.projections.copy(); lo[idx] -= step
        num[idx] = (loss_at(hi, params.lambda_logit) - loss_at(lo, params.lambda_logit)) / (2 * step)
    num_lam = (
        loss_at(params.projections, params.lambda_logit + step)
        - loss_at(params.projections, params.lambda_logit - step)
    ) / (2 * step)

    scale = max(np.abs(num).max(), abs(num_lam), 1e-8)
    assert np.abs(grads.grad_projections - num).max() / scale <= 1e-4
    assert abs(grads.grad_lambda_logit - num_lam) / scale <= 1e-4


def test_missing_negatives_rejected():
    rng = np.random.default_rng(12)
    batch = _batch(rng)
    with pytest.raises(ValidationError, match="negatives"):
        batch_loss_and_grads(batch, init_params(8, 1, 0), TrainConfig(M=4, N=3))


# --------------------------------------------------------------------- train

def test_train_same_seed_bitwise_checkpoints(tmp_path):
    store = _store(np.random.default_rng(13))
    cfg = TrainConfig(M=4, N=3, steps=20)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    train(store, cfg, checkpoint_path=p1)
    train(store, cfg, checkpoint_path=p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_train_zero_learning_rate_keeps_init():
    store = _store(np.random.default_rng(14))
    cfg = TrainConfig(M=4, N=3, steps=10, learning_rate=0.0)
    params, _ = train(store, cfg)
    ref = init_params(store.d_i, cfg.num_layers, cfg.seed)
    assert np.array_equal(params.projections, ref.projections)
    assert params.lambda_logit == 0.0


def test_train_log_records_every_step():
    store = _store(np.random.default_rng(15))
    cfg = TrainConfig(M=4, N=3, steps=7)
    _, log = train(store, cfg)
    assert [r["step"] for r in log.records] == list(range(7))
    for r in log.records:
        assert np.isfinite(r["loss"]) and 0.0 < r["lambda"] < 1.0


def test_train_lambda_moves_on_acceptance_world(acceptance_world):
    cfg = TrainConfig(seed=0, steps=100)
    params, _ = train(acceptance_world.train_store, cfg)
    assert abs(params.mixing_weight - 0.5) > 0.01


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(M=1).validate()
    with pytest.raises(ValidationError):
        TrainConfig(N=0).validate()
    with pytest.raises(ValidationError):
        TrainConfig(tau=-1.0).validate()
    with pytest.raises(ValidationError):
        TrainConfig(mining_mode="magic").validate()
