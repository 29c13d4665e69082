"""Contrastive training of the aggregator and the mixing weight.

Batches hold M distinct classes; each contributes a text query, N image
queries, and one held-out positive image. The negative for a class is the
hardest other-class positive under the hybrid similarity (dynamic mining
re-scores every step; static mining scores with the initial parameter
snapshot). Loss is InfoNCE over one positive / one negative pair,
log(1 + exp((s_neg - s_pos) / tau)).

Two deliberate asymmetries from the loss definition:
  * clamp_positive fixes the positive's cross-modal term to 1 (training
    runs on generated images whose text similarity under-estimates the
    real-image one); the negative's cross-modal term is always the true
    dot product, otherwise lambda -> 0 would trivially minimize the loss.
  * Encoders are frozen, so gradients only flow through the aggregator
    (intra-modal term) and the lambda logit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregator import (
    AggregatorParams,
    aggregate_backward,
    aggregate_forward,
    init_params,
    save_params,
    sigmoid,
)
from .errors import TrainingDivergedError, ValidationError
from .store import write_atomic


@dataclass
class ClassEntry:
    """One training class: its text embedding and a dual-space image pool."""

    class_id: int
    text_embedding: np.ndarray    # (d_c,) float32
    image_vm: np.ndarray          # (n, d_i) float32
    image_vlm: np.ndarray         # (n, d_c) float32
    generator_tags: np.ndarray    # (n,) int32


@dataclass
class TrainStore:
    classes: list[ClassEntry]

    @property
    def d_c(self) -> int:
        return len(self.classes[0].text_embedding)

    @property
    def d_i(self) -> int:
        return self.classes[0].image_vm.shape[1]

    def validate(self) -> None:
        if not self.classes:
            raise ValidationError("empty train store")
        seen = set()
        for c in self.classes:
            if c.class_id in seen:
                raise ValidationError(f"duplicate class id {c.class_id}")
            seen.add(c.class_id)
            n = len(c.image_vm)
            if len(c.image_vlm) != n or len(c.generator_tags) != n:
                raise ValidationError(f"class {c.class_id}: pool arrays disagree in length")


@dataclass
class TrainConfig:
    M: int = 32
    N: int = 5
    tau: float = 0.1
    steps: int = 2000
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    num_layers: int = 2
    mining_mode: str = "dynamic"          # or "static"
    dual_generator: bool = True
    repeat_inputs: bool = True
    clamp_positive: bool = True
    lambda_trainable: bool = True
    freeze_projections: bool = False      # test hook
    init_noise_std: float | None = None   # test hook; None = 0.01/sqrt(d_i)

    def validate(self) -> None:
        if self.M < 2:
            raise ValidationError("M must be >= 2 (negatives come from other classes)")
        if self.N < 1:
            raise ValidationError("N must be >= 1")
        if self.tau <= 0:
            raise ValidationError("tau must be positive")
        if self.mining_mode not in ("dynamic", "static"):
            raise ValidationError(f"unknown mining mode {self.mining_mode!r}")


@dataclass
class TrainBatch:
    class_ids: np.ndarray         # (M,)
    text: np.ndarray              # (M, d_c) float64
    images: np.ndarray            # (M, N, d_i) float64 query images
    pos_vm: np.ndarray            # (M, d_i) float64
    pos_vlm: np.ndarray           # (M, d_c) float64
    negatives: np.ndarray | None = None   # (M,) index into batch entries

    @property
    def M(self) -> int:
        return len(self.class_ids)


def build_batch(store: TrainStore, config: TrainConfig, rng: np.random.Generator) -> TrainBatch:
    """Sample M classes, then N+1 pool images per class (last is the positive).

    With dual_generator off, sampling is restricted to each class's lowest
    generator tag. Deterministic given the generator state.
    """
    config.validate()
    if len(store.classes) < config.M:
        raise ValidationError(
            f"store has {len(store.classes)} classes, batch needs M={config.M}"
        )
    order = rng.permutation(len(store.classes))[: config.M]
    ids, texts, imgs, pvm, pvlm = [], [], [], [], []
    for ci in order:
        c = store.classes[ci]
        if config.dual_generator:
            pool = np.arange(len(c.image_vm))
        else:
            pool = np.flatnonzero(c.generator_tags == c.generator_tags.min())
        if len(pool) < config.N + 1:
            raise ValidationError(
                f"class {c.class_id}: pool of {len(pool)} images < N+1={config.N + 1}"
            )
        pick = pool[rng.permutation(len(pool))[: config.N + 1]]
        ids.append(c.class_id)
        texts.append(c.text_embedding.astype(np.float64))
        imgs.append(c.image_vm[pick[:-1]].astype(np.float64))
        pvm.append(c.image_vm[pick[-1]].astype(np.float64))
        pvlm.append(c.image_vlm[pick[-1]].astype(np.float64))
    return TrainBatch(
        class_ids=np.array(ids),
        text=np.stack(texts),
        images=np.stack(imgs),
        pos_vm=np.stack(pvm),
        pos_vlm=np.stack(pvlm),
    )


def _aggregate_batch(batch: TrainBatch, params: AggregatorParams, repeat_inputs: bool):
    outs, caches = [], []
    for i in range(batch.M):
        out, cache = aggregate_forward(params, batch.images[i], repeat_inputs=repeat_inputs)
        outs.append(out)
        caches.append(cache)
    return np.stack(outs), caches


def mine_negative(
    batch: TrainBatch,
    params: AggregatorParams,
    repeat_inputs: bool = True,
    aggregated: np.ndarray | None = None,
) -> np.ndarray:
    """For each entry, the other-class positive with the highest hybrid
    similarity under the given params; ties go to the smallest index.
    Mining always uses true (unclamped) cross-modal scores."""
    if batch.M < 2:
        raise ValidationError("mining needs M >= 2")
    if aggregated is None:
        aggregated, _ = _aggregate_batch(batch, params, repeat_inputs)
    lam = sigmoid(params.lambda_logit)
    cross = batch.text @ batch.pos_vlm.T       # (M, M): text_i . vlm(pos_j)
    intra = aggregated @ batch.pos_vm.T        # (M, M): agg_i . vm(pos_j)
    hybrid = (1.0 - lam) * cross + lam * intra
    np.fill_diagonal(hybrid, -np.inf)
    return np.argmax(hybrid, axis=1)           # first max = smallest index on ties


def contrastive_loss(s_pos: float, s_neg: float, tau: float) -> tuple[float, float, float]:
    """log(1 + exp((s_neg - s_pos)/tau)) in stable form, with exact partials."""
    if tau <= 0:
        raise ValidationError("tau must be positive")
    u = (s_neg - s_pos) / tau
    loss = float(np.logaddexp(0.0, u))
    sig = sigmoid(u)
    return loss, -sig / tau, sig / tau


@dataclass
class BatchGrads:
    loss: float
    grad_projections: np.ndarray    # (L, d_i, d_i) float64
    grad_lambda_logit: float


def batch_loss_and_grads(
    batch: TrainBatch,
    params: AggregatorParams,
    config: TrainConfig,
    aggregated: np.ndarray | None = None,
    caches=None,
) -> BatchGrads:
    """Mean loss over the batch plus exact gradients for the projections and
    the lambda logit. Embeddings are constants; only the intra-modal path
    and lambda carry gradients."""
    if batch.negatives is None:
        raise ValidationError("batch has no mined negatives")
    if aggregated is None or caches is None:
        aggregated, caches = _aggregate_batch(batch, params, config.repeat_inputs)

    lam = sigmoid(params.lambda_logit)
    M = batch.M
    total_loss = 0.0
    grad_proj = np.zeros_like(params.projections, dtype=np.float64)
    dlam_total = 0.0

    for i in range(M):
        j = int(batch.negatives[i])
        if j == i:
            raise ValidationError("negative index equals own index")
        s_i_pos = float(aggregated[i] @ batch.pos_vm[i])
        c_pos = 1.0 if config.clamp_positive else float(batch.text[i] @ batch.pos_vlm[i])
        s_c_neg = float(batch.text[i] @ batch.pos_vlm[j])
        s_i_neg = float(aggregated[i] @ batch.pos_vm[j])
        s_pos = (1.0 - lam) * c_pos + lam * s_i_pos
        s_neg = (1.0 - lam) * s_c_neg + lam * s_i_neg

        loss, dpos, dneg = contrastive_loss(s_pos, s_neg, config.tau)
        total_loss += loss
        dlam_total += dpos * (s_i_pos - c_pos) + dneg * (s_i_neg - s_c_neg)

        g_agg = (dpos * lam) * batch.pos_vm[i] + (dneg * lam) * batch.pos_vm[j]
        gp, _ = aggregate_backward(params, caches[i], g_agg)
        grad_proj += gp

    grad_proj /= M
    dlam = dlam_total / M
    dlogit = dlam * lam * (1.0 - lam) if config.lambda_trainable else 0.0
    if config.freeze_projections:
        grad_proj[:] = 0.0
    return BatchGrads(
        loss=total_loss / M,
        grad_projections=grad_proj,
        grad_lambda_logit=dlogit,
    )


class Adam:
    """Plain deterministic Adam over a list of float arrays (plus scalars)."""

    def __init__(self, shapes, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(s, dtype=np.float64) for s in shapes]
        self.v = [np.zeros(s, dtype=np.float64) for s in shapes]

    def step(self, grads):
        self.t += 1
        updates = []
        for i, g in enumerate(grads):
            g = np.asarray(g, dtype=np.float64)
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            m_hat = self.m[i] / (1 - self.b1 ** self.t)
            v_hat = self.v[i] / (1 - self.b2 ** self.t)
            updates.append(self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return updates


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)

    def add(self, step: int, loss: float, lam: float, grad_norm: float) -> None:
        self.records.append(
            {"step": step, "loss": loss, "lambda": lam, "grad_norm": grad_norm}
        )

    def write_jsonl(self, path: str | Path) -> None:
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        write_atomic(path, ("\n".join(lines) + "\n").encode("utf-8"))


def train(
    store: TrainStore,
    config: TrainConfig,
    checkpoint_path: str | Path | None = None,
) -> tuple[AggregatorParams, TrainingLog]:
    """Full loop: build batch -> mine negative -> loss/grads -> Adam step.

    Deterministic given config.seed. Projections stay on the float32 grid
    after every update so the final checkpoint round-trips bitwise.
    """
    store.validate()
    config.validate()
    params = init_params(store.d_i, config.num_layers, config.seed,
                         noise_std=config.init_noise_std)
    static_snapshot = params.copy() if config.mining_mode == "static" else None
    rng = np.random.default_rng(config.seed)
    opt = Adam(
        [params.projections.shape, ()],
        lr=config.learning_rate, betas=config.adam_betas, eps=config.adam_eps,
    )
    log = TrainingLog()

    for step in range(config.steps):
        batch = build_batch(store, config, rng)
        aggregated, caches = _aggregate_batch(batch, params, config.repeat_inputs)
        if config.mining_mode == "dynamic":
            batch.negatives = mine_negative(
                batch, params, config.repeat_inputs, aggregated=aggregated
            )
        else:
            batch.negatives = mine_negative(batch, static_snapshot, config.repeat_inputs)
        grads = batch_loss_and_grads(batch, params, config, aggregated, caches)
        if not np.isfinite(grads.loss):
            raise TrainingDivergedError(
                f"non-finite loss {grads.loss} at step {step} "
                f"(lambda={sigmoid(params.lambda_logit):.4f})"
            )
        du = opt.step([grads.grad_projections, grads.grad_lambda_logit])
        params.projections = (
            params.projections.astype(np.float64) - du[0]
        ).astype(np.float32)
        if config.lambda_trainable:
            params.lambda_logit = float(params.lambda_logit - du[1])
        gnorm = float(np.sqrt(
            (grads.grad_projections ** 2).sum() + grads.grad_lambda_logit ** 2
        ))
        log.add(step, float(grads.loss), sigmoid(params.lambda_logit), gnorm)

    if checkpoint_path is not None:
        save_params(params, checkpoint_path)
    return params, log
