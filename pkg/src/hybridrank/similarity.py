"""Cross-modal, intra-modal, and hybrid scoring plus deterministic ranking.

Scores are float64 per database item, computed with a fixed sequential
reduction (see _kernels) so results are identical across backends, worker
counts, and database shardings. Ranking sorts by descending score with
ties broken by ascending database index.
"""
from __future__ import annotations

import numpy as np

from . import _kernels
from .aggregator import AggregatorParams, aggregate_forward, mean_pool, sigmoid
from .errors import ValidationError
from .store import DualSpaceDatabase, QueryBundle

MODES = ("text_only", "image_only_mean", "image_only_agg", "hybrid_mean", "ours")


def cross_modal_scores(text_embedding: np.ndarray, db: DualSpaceDatabase) -> np.ndarray:
    """values[j] = dot(vlm_space[j], text)."""
    q = np.asarray(text_embedding, dtype=np.float64)
    if q.shape != (db.vlm_space.dim,):
        raise ValidationError(
            f"text dim {q.shape} does not match database vlm dim {db.vlm_space.dim}"
        )
    return _kernels.dot_scores(db.vlm_space.vectors, q)


def intra_modal_scores(aggregated_query: np.ndarray, db: DualSpaceDatabase) -> np.ndarray:
    """values[j] = dot(vm_space[j], aggregated query); the query may be non-unit."""
    q = np.asarray(aggregated_query, dtype=np.float64)
    if q.shape != (db.vm_space.dim,):
        raise ValidationError(
            f"query dim {q.shape} does not match database vm dim {db.vm_space.dim}"
        )
    return _kernels.dot_scores(db.vm_space.vectors, q)


def hybrid_scores(lam: float, cross: np.ndarray, intra: np.ndarray) -> np.ndarray:
    if not (0.0 <= lam <= 1.0):
        raise ValidationError(f"lambda must be in [0,1], got {lam}")
    if cross.shape != intra.shape:
        raise ValidationError("cross/intra score length mismatch")
    if lam == 0.0:
        return cross.copy()
    if lam == 1.0:
        return intra.copy()
    return (1.0 - lam) * cross + lam * intra


def rank(scores: np.ndarray, top_k: int | None = None) -> np.ndarray:
    """Indices by descending score, ties by ascending index; top_k truncates."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.isnan(scores).any():
        raise ValidationError("NaN in scores")
    order = np.argsort(-scores, kind="stable")
    if top_k is not None:
        order = order[:top_k]
    return order


def score_query(
    bundle: QueryBundle,
    db: DualSpaceDatabase,
    params: AggregatorParams | None,
    mode: str,
    repeat_inputs: bool = True,
    lambda_override: float | None = None,
    renormalize_output: bool = False,
) -> np.ndarray:
    """Dispatch one query through the requested scoring mode.

    lambda_override pins the mixing weight (evaluation hook for the lambda=0
    and lambda=1 endpoints); otherwise "ours" uses sigmoid(params.lambda_logit)
    and "hybrid_mean" uses 0.5.
    """
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "text_only":
        return cross_modal_scores(bundle.text_embedding, db)

    if bundle.k < 1:
        raise ValidationError(f"mode {mode!r} needs at least one image query")

    if mode in ("image_only_mean", "hybrid_mean"):
        agg = mean_pool(bundle.image_queries)
    else:
        if params is None:
            raise ValidationError(f"mode {mode!r} needs aggregator params")
        agg, _ = aggregate_forward(
            params, bundle.image_queries, repeat_inputs=repeat_inputs,
            renormalize_output=renormalize_output,
        )

    intra = intra_modal_scores(agg, db)
    if mode in ("image_only_mean", "image_only_agg"):
        return intra
    cross = cross_modal_scores(bundle.text_embedding, db)
    if lambda_override is not None:
        lam = lambda_override
    elif mode == "hybrid_mean":
        lam = 0.5
    else:
        lam = sigmoid(params.lambda_logit)
    return hybrid_scores(lam, cross, intra)
