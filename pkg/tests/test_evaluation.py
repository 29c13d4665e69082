import json

import numpy as np
import pytest

from conftest import tiny_bundle, tiny_db
from hybridrank.aggregator import init_params
from hybridrank.errors import ValidationError
from hybridrank.evaluation import (
    average_precision,
    evaluate,
    precision_at_k,
    recall_at_k,
    write_per_query_csv,
    write_report,
)
from hybridrank.similarity import rank
from hybridrank.store import QueryBundle


def _oracle_ap(ranking, relevant):
    n_rel = sum(bool(relevant[i]) for i in range(len(relevant)))
    hits, total = 0, 0.0
    for pos, idx in enumerate(ranking, start=1):
        if relevant[idx]:
            hits += 1
            total += hits / pos
    return total / n_rel


def test_ap_perfect_ranking():
    ranking = np.array([2, 0, 1, 3])
    relevant = np.array([True, False, True, False])
    assert average_precision(ranking, relevant) == 1.0


def test_ap_two_relevant_example():
    # relevant at ranks 1 and 3 of 3
    ranking = np.array([0, 1, 2])
    relevant = np.array([True, False, True])
    assert abs(average_precision(ranking, relevant) - 5.0 / 6.0) < 1e-9


def test_ap_matches_definition_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(2, 50))
        relevant = rng.random(n) < 0.4
        if not relevant.any():
            relevant[int(rng.integers(n))] = True
        ranking = rng.permutation(n)
        assert average_precision(ranking, relevant) == _oracle_ap(ranking, relevant)


def test_ap_invariant_to_score_rescaling():
    rng = np.random.default_rng(1)
    scores = rng.standard_normal(20)
    relevant = rng.random(20) < 0.3
    relevant[0] = True
    base = average_precision(rank(scores), relevant)
    for factor in (0.001, 7.0, 1e6):
        assert average_precision(rank(scores * factor), relevant) == base


def test_ap_empty_relevant_rejected():
    with pytest.raises(ValidationError):
        average_precision(np.array([0, 1]), np.array([False, False]))


def test_p_and_r_at_k_examples():
    ranking = np.array([0, 1, 2, 3])
    relevant = np.array([True, True, False, False])
    assert precision_at_k(ranking, relevant, 2) == 1.0
    assert recall_at_k(ranking, relevant, 2) == 1.0
    assert precision_at_k(ranking[::-1], relevant, 2) == 0.0
    assert recall_at_k(ranking[::-1], relevant, 2) == 0.0


def test_p_and_r_match_definition_oracle():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(2, 50))
        relevant = rng.random(n) < 0.5
        if not relevant.any():
            relevant[0] = True
        ranking = rng.permutation(n)
        k = int(rng.integers(1, n + 1))
        want_p = sum(bool(relevant[i]) for i in ranking[:k]) / min(k, n)
        want_r = sum(bool(relevant[i]) for i in ranking[:k]) / relevant.sum()
        assert precision_at_k(ranking, relevant, k) == want_p
        assert recall_at_k(ranking, relevant, k) == want_r


# ----------------------------------------------------------------- evaluate

def test_evaluate_all_relevant_gives_ap_one():
    rng = np.random.default_rng(3)
    db = tiny_db(rng, n_classes=1, per_class=8)
    bundles = [tiny_bundle(rng, label=0, query_id=i) for i in range(3)]
    params = init_params(db.vm_space.dim, 2, 0)
    report = evaluate(db, bundles, params,
                      ["text_only", "image_only_mean", "image_only_agg",
                       "hybrid_mean", "ours"], [4])
    for mode, result in report.modes.items():
        assert result.map == 1.0


def test_evaluate_endpoint_override_matches_text_only():
    rng = np.random.default_rng(4)
    db = tiny_db(rng)
    bundles = [tiny_bundle(rng, label=i % 4, query_id=i) for i in range(6)]
    params = init_params(db.vm_space.dim, 2, 0)
    report = evaluate(db, bundles, params, ["text_only", "ours"], [5],
                      lambda_overrides={"ours": 0.0})
    assert report.modes["ours"].ap == report.modes["text_only"].ap


def test_evaluate_skips_unknown_classes():
    rng = np.random.default_rng(5)
    db = tiny_db(rng, n_classes=3)
    bundles = [tiny_bundle(rng, label=1, query_id=0),
               tiny_bundle(rng, label=9, query_id=7)]
    report = evaluate(db, bundles, None, ["text_only"], [3])
    assert report.skipped_queries == [7]
    assert report.modes["text_only"].query_ids == [0]


def test_evaluate_rejects_missing_label():
    rng = np.random.default_rng(6)
    db = tiny_db(rng)
    b = tiny_bundle(rng, label=0)
    b.label = None
    with pytest.raises(ValidationError, match="label"):
        evaluate(db, [b], None, ["text_only"], [3])


def test_evaluate_worker_count_does_not_change_results(tmp_path):
    rng = np.random.default_rng(7)
    db = tiny_db(rng, n_classes=5, per_class=6)
    bundles = [tiny_bundle(rng, label=i % 5, query_id=i) for i in range(10)]
    params = init_params(db.vm_space.dim, 2, 0)
    serial = evaluate(db, bundles, params, ["ours", "hybrid_mean"], [5], workers=1)
    threaded = evaluate(db, bundles, params, ["ours", "hybrid_mean"], [5], workers=4)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    write_report(serial, p1)
    write_report(threaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_real_image_query_variant_supported():
    # swapping generated image queries for held-out real class images is just
    # a different bundle set; the report carries the variant label in config
    rng = np.random.default_rng(8)
    db = tiny_db(rng, n_classes=3, per_class=6)
    real = []
    for i in range(3):
        rows = db.vm_space.vectors[db.vm_space.labels == np.uint32(i)][:2]
        real.append(QueryBundle(
            query_id=i,
            text_embedding=tiny_bundle(rng, label=i).text_embedding,
            image_queries=rows.copy(),
            generator_tags=np.zeros(2, np.int32),
            label=i,
        ))
    report = evaluate(db, real, None, ["image_only_mean"], [3],
                      config={"variant": "real-image-queries"})
    assert report.config["variant"] == "real-image-queries"
    assert report.modes["image_only_mean"].map > 0.0


# ------------------------------------------------------------------ reports

def test_report_json_round_trip_and_csv_agree(tmp_path):
    rng = np.random.default_rng(9)
    db = tiny_db(rng)
    bundles = [tiny_bundle(rng, label=i % 4, query_id=i) for i in range(4)]
    report = evaluate(db, bundles, None, ["text_only", "hybrid_mean"], [3, 5])

    jpath, cpath = tmp_path / "r.json", tmp_path / "r.csv"
    write_report(report, jpath, "json")
    write_report(report, cpath, "csv")
    data = json.loads(jpath.read_text())
    assert data["modes"]["text_only"]["map"] == report.modes["text_only"].map

    lines = cpath.read_text().strip().split("\n")
    assert lines[0] == "mode,metric,value"
    values = {(m, k): float(v) for m, k, v in
              (line.split(",") for line in lines[1:])}
    assert values[("text_only", "map")] == report.modes["text_only"].map
    assert values[("hybrid_mean", "precision_at_3")] == report.modes["hybrid_mean"].p_at[3]


def test_report_writes_are_deterministic(tmp_path):
    rng = np.random.default_rng(10)
    db = tiny_db(rng)
    bundles = [tiny_bundle(rng, label=0, query_id=0)]
    report = evaluate(db, bundles, None, ["text_only"], [3])
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    write_report(report, p1)
    write_report(report, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_per_query_csv(tmp_path):
    rng = np.random.default_rng(11)
    db = tiny_db(rng)
    bundles = [tiny_bundle(rng, label=i % 4, query_id=i) for i in range(3)]
    report = evaluate(db, bundles, None, ["text_only"], [3])
    path = tmp_path / "pq.csv"
    write_per_query_csv(report, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "mode,query_id,ap"
    assert len(lines) == 1 + 3


def test_unknown_mode_rejected():
    rng = np.random.default_rng(12)
    db = tiny_db(rng)
    with pytest.raises(ValidationError, match="mode"):
        evaluate(db, [], None, ["bogus"], [3])
