"""Retrieval metrics (AP, mAP, P@K, R@K) and the evaluation harness.

Relevance is class membership: a database item is relevant to a query iff
it carries the query's label. AP is the uninterpolated sum of precisions
at relevant ranks divided by the number of relevant items. Queries whose
class has no database items are skipped (AP undefined) and listed in the
report rather than averaged.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregator import AggregatorParams
from .errors import ValidationError
from .similarity import MODES, rank, score_query
from .store import DualSpaceDatabase, QueryBundle, write_atomic


def average_precision(ranking: np.ndarray, relevant: np.ndarray) -> float:
    """relevant is a boolean mask over database indices; ranking is full-length."""
    rel = np.asarray(relevant, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        raise ValidationError("average precision undefined for an empty relevant set")
    hits = rel[ranking]
    ranks = np.flatnonzero(hits) + 1
    # sequential accumulation: any straightforward from-definition
    # reimplementation produces bit-identical values
    total = 0.0
    for i, r in enumerate(ranks, start=1):
        total += i / int(r)
    return total / n_rel


def precision_at_k(ranking: np.ndarray, relevant: np.ndarray, k: int) -> float:
    if k < 1:
        raise ValidationError("K must be >= 1")
    top = ranking[:k]
    return float(np.asarray(relevant, bool)[top].sum() / min(k, len(ranking)))


def recall_at_k(ranking: np.ndarray, relevant: np.ndarray, k: int) -> float:
    if k < 1:
        raise ValidationError("K must be >= 1")
    rel = np.asarray(relevant, bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        raise ValidationError("recall undefined for an empty relevant set")
    return float(rel[ranking[:k]].sum() / n_rel)


@dataclass
class ModeResult:
    mode: str
    query_ids: list[int]
    ap: list[float]
    p_at: dict[int, float]
    r_at: dict[int, float]

    @property
    def map(self) -> float:
        return float(np.mean(self.ap)) if self.ap else float("nan")


@dataclass
class EvalReport:
    modes: dict[str, ModeResult]
    skipped_queries: list[int]
    config: dict
    checkpoint_hash: str
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "modes": {
                m: {
                    "query_ids": r.query_ids,
                    "ap_per_query": r.ap,
                    "map": r.map,
                    "precision_at": {str(k): v for k, v in r.p_at.items()},
                    "recall_at": {str(k): v for k, v in r.r_at.items()},
                }
                for m, r in self.modes.items()
            },
            "skipped_queries": self.skipped_queries,
            "config": self.config,
            "checkpoint_hash": self.checkpoint_hash,
            "seed": self.seed,
        }


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _eval_one(bundle: QueryBundle, db, params, modes, k_list, repeat_inputs, lambda_overrides):
    rel = db.vlm_space.labels == np.uint32(bundle.label)
    out = {}
    for mode in modes:
        scores = score_query(
            bundle, db, params, mode, repeat_inputs=repeat_inputs,
            lambda_override=lambda_overrides.get(mode),
        )
        order = rank(scores)
        out[mode] = (
            average_precision(order, rel),
            {k: precision_at_k(order, rel, k) for k in k_list},
            {k: recall_at_k(order, rel, k) for k in k_list},
        )
    return out


def evaluate(
    db: DualSpaceDatabase,
    bundles: list[QueryBundle],
    params: AggregatorParams | None,
    modes: list[str],
    k_list: list[int],
    repeat_inputs: bool = True,
    workers: int = 1,
    config: dict | None = None,
    checkpoint_hash: str = "",
    seed: int | None = None,
    lambda_overrides: dict[str, float] | None = None,
) -> EvalReport:
    """Score every bundle under every mode on identical inputs (paired deltas).

    workers only parallelizes across queries; per-query work is pure, and
    aggregation is an ordered reduction, so results do not depend on it.
    """
    for m in modes:
        if m not in MODES:
            raise ValidationError(f"unknown mode {m!r}")
    if db.count == 0:
        raise ValidationError("empty database")
    lambda_overrides = lambda_overrides or {}

    present = set(np.unique(db.vlm_space.labels).tolist())
    active, skipped = [], []
    for b in bundles:
        if b.label is None:
            raise ValidationError(f"query {b.query_id} has no ground-truth label")
        (active if int(b.label) in present else skipped).append(b)

    def work(b):
        return _eval_one(b, db, params, modes, k_list, repeat_inputs, lambda_overrides)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(work, active))
    else:
        rows = [work(b) for b in active]

    results = {}
    for mode in modes:
        aps = [r[mode][0] for r in rows]
        p_at = {k: float(np.mean([r[mode][1][k] for r in rows])) if rows else float("nan")
                for k in k_list}
        r_at = {k: float(np.mean([r[mode][2][k] for r in rows])) if rows else float("nan")
                for k in k_list}
        results[mode] = ModeResult(
            mode=mode,
            query_ids=[int(b.query_id) for b in active],
            ap=aps,
            p_at=p_at,
            r_at=r_at,
        )
    return EvalReport(
        modes=results,
        skipped_queries=[int(b.query_id) for b in skipped],
        config=config or {},
        checkpoint_hash=checkpoint_hash,
        seed=seed,
    )


def report_csv_rows(report: EvalReport) -> list[tuple[str, str, str]]:
    rows = []
    for mode in sorted(report.modes):
        r = report.modes[mode]
        rows.append((mode, "map", repr(r.map)))
        for k in sorted(r.p_at):
            rows.append((mode, f"precision_at_{k}", repr(r.p_at[k])))
        for k in sorted(r.r_at):
            rows.append((mode, f"recall_at_{k}", repr(r.r_at[k])))
    return rows


def write_report(report: EvalReport, path: str | Path, fmt: str = "json") -> None:
    if fmt == "json":
        text = json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "metric", "value"])
        for row in report_csv_rows(report):
            w.writerow(row)
        text = buf.getvalue()
    else:
        raise ValidationError(f"unknown report format {fmt!r}")
    write_atomic(path, text.encode("utf-8"))


def write_per_query_csv(report: EvalReport, path: str | Path) -> None:
    """Plot-ready long-format CSV: one row per (mode, query) with its AP."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "query_id", "ap"])
    for mode in sorted(report.modes):
        r = report.modes[mode]
        for qid, ap in zip(r.query_ids, r.ap):
            w.writerow([mode, qid, repr(ap)])
    write_atomic(path, buf.getvalue().encode("utf-8"))
