"""Command line entry point: gen-synth, train, eval, query, export-report.

Conventions:
  * exit 0 success, 1 usage error, 2 data/validation error;
  * --config JSON files mirror the flag names (dashes -> underscores), with
    explicit flags taking precedence;
  * every run writes one JSON manifest recording the resolved config, input
    hashes, seed, and artifact paths;
  * all outputs are written atomically (temp file + rename);
  * HYBRIDRANK_THREADS overrides the worker count, which never changes
    results, only wall-clock time.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .aggregator import load_params
from .errors import HybridRankError, ValidationError
from .evaluation import evaluate, file_sha256, write_per_query_csv, write_report
from .similarity import MODES, rank, score_query
from .store import (
    load_database,
    read_query_bundles,
    write_atomic,
    write_json_atomic,
)
from .synthworld import (
    SynthConfig,
    SynthWorld,
    generate_world,
    load_train_store,
    measure_similarity_distributions,
    write_similarity_csv,
    write_world,
)
from .training import TrainConfig, train


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; the contract is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _apply_config_file(args: argparse.Namespace, parser_defaults: dict) -> None:
    """Merge --config JSON under explicit flags: file value wins over the
    built-in default, an explicitly passed flag wins over the file."""
    if not getattr(args, "config", None):
        return
    cfg = json.loads(Path(args.config).read_text("utf-8"))
    for key, value in cfg.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ValidationError(f"config file key {key!r} matches no flag")
        if getattr(args, attr) == parser_defaults.get(attr):
            setattr(args, attr, value)


def _write_manifest(path: Path, subcommand: str, config: dict,
                    inputs: dict[str, str], seed, artifacts: dict[str, str]) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "input_hashes": {k: file_sha256(v) for k, v in inputs.items()},
        "input_paths": {k: str(v) for k, v in inputs.items()},
        "seed": seed,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "tool_version": __version__,
    }
    write_json_atomic(path, manifest)


def _resolve_db(db_path: str):
    """Accept either a world manifest or a bare {vlm, vm, labels} JSON."""
    p = Path(db_path)
    spec = json.loads(p.read_text("utf-8"))
    entry = spec["db"] if spec.get("format") == "hybridrank-world-v1" else spec
    base = p.parent
    db = load_database(base / entry["vlm"], base / entry["vm"], base / entry["labels"])
    queries = None
    if spec.get("format") == "hybridrank-world-v1":
        queries = base / spec["queries"]
    return db, queries


def _workers(args) -> int:
    env = os.environ.get("HYBRIDRANK_THREADS")
    if env:
        return max(1, int(env))
    return max(1, getattr(args, "workers", 1))


# ---------------------------------------------------------------- gen-synth

def _cmd_gen_synth(args) -> int:
    cfg = SynthConfig(
        num_classes=args.num_classes,
        d_c=args.d_c,
        d_i=args.d_i,
        db_items_per_class=args.db_items_per_class,
        images_per_class_per_generator=args.images_per_class_per_generator,
        num_generators=args.num_generators,
        noise_real=args.noise_real,
        noise_syn=args.noise_syn,
        gap_strength=args.gap_strength,
        gen_bias_strength=args.gen_bias_strength,
        train_fraction=args.train_fraction,
        seed=args.seed,
        family_size=args.family_size,
        family_spread=args.family_spread,
        map_residual=args.map_residual,
        failure_rate=args.failure_rate,
        failure_bias_scale=args.failure_bias_scale,
        db_vlm_noise_scale=args.db_vlm_noise_scale,
    )
    world = generate_world(cfg)
    out = Path(args.out)
    manifest_path = write_world(world, out)
    measurement = measure_similarity_distributions(world)
    write_similarity_csv(measurement, out / "similarity_hist.csv")
    _write_manifest(
        out / "run_manifest.json", "gen-synth", cfg.__dict__, {}, cfg.seed,
        {"world_manifest": manifest_path, "similarity_hist": out / "similarity_hist.csv"},
    )
    print(f"world written to {out} "
          f"({len(world.train_class_ids)} train / {len(world.eval_class_ids)} eval classes)")
    return 0


# -------------------------------------------------------------------- train

def _cmd_train(args) -> int:
    cfg = TrainConfig(
        M=args.m, N=args.n, tau=args.tau, steps=args.steps,
        learning_rate=args.learning_rate, adam_betas=(args.beta1, args.beta2),
        seed=args.seed, num_layers=args.num_layers, mining_mode=args.mining_mode,
        dual_generator=args.dual_generator, repeat_inputs=args.repeat_inputs,
        clamp_positive=args.clamp_positive, lambda_trainable=args.lambda_trainable,
    )
    store = load_train_store(args.world)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(out.suffix + ".log.jsonl")
    params, log = train(store, cfg, checkpoint_path=out)
    log.write_jsonl(log_path)
    cfg_dict = dict(cfg.__dict__)
    cfg_dict["adam_betas"] = list(cfg.adam_betas)
    _write_manifest(
        out.with_suffix(out.suffix + ".manifest.json"), "train", cfg_dict,
        {"world": args.world}, cfg.seed, {"checkpoint": out, "log": log_path},
    )
    final = log.records[-1] if log.records else {}
    print(f"checkpoint written to {out} "
          f"(final loss {final.get('loss', float('nan')):.4f}, "
          f"lambda {final.get('lambda', float('nan')):.4f})")
    return 0


# --------------------------------------------------------------------- eval

def _parse_modes(text: str) -> list[str]:
    modes = [m.strip() for m in text.split(",") if m.strip()]
    for m in modes:
        if m not in MODES:
            raise ValidationError(f"unknown mode {m!r}; expected one of {MODES}")
    return modes


def _load_bundles(args, default_queries) -> list:
    qpath = args.queries or default_queries
    if qpath is None:
        raise ValidationError("no --queries given and the database is not a world manifest")
    bundles = read_query_bundles(qpath)
    if args.max_k is not None or args.generators:
        gens = None
        if args.generators:
            gens = {int(g) for g in args.generators.split(",")}
        bundles = [b.restrict(max_k=args.max_k, generators=gens) for b in bundles]
    return bundles, str(qpath)


def _cmd_eval(args) -> int:
    db, default_queries = _resolve_db(args.db)
    bundles, qpath = _load_bundles(args, default_queries)
    params = None
    ckpt_hash = ""
    if args.checkpoint:
        params = load_params(args.checkpoint)
        if params.d_i != db.vm_space.dim:
            raise ValidationError(
                f"checkpoint d_i={params.d_i} does not match database vm dim "
                f"{db.vm_space.dim}"
            )
        ckpt_hash = file_sha256(args.checkpoint)
    modes = _parse_modes(args.modes)
    if params is None and any(m in ("image_only_agg", "ours") for m in modes):
        raise ValidationError("modes using the learned aggregator need --checkpoint")
    k_list = [int(k) for k in args.k_list.split(",") if k.strip()]
    cfg = {
        "modes": modes, "k_list": k_list, "max_k": args.max_k,
        "generators": args.generators, "repeat_inputs": args.repeat_inputs,
    }
    report = evaluate(
        db, bundles, params, modes, k_list,
        repeat_inputs=args.repeat_inputs, workers=_workers(args),
        config=cfg, checkpoint_hash=ckpt_hash, seed=None,
    )
    out = Path(args.out)
    write_report(report, out, args.format)
    per_query = Path(args.per_query_csv) if args.per_query_csv \
        else out.with_suffix(out.suffix + ".per_query.csv")
    write_per_query_csv(report, per_query)
    inputs = {"db": args.db, "queries": qpath}
    if args.checkpoint:
        inputs["checkpoint"] = args.checkpoint
    _write_manifest(
        out.with_suffix(out.suffix + ".manifest.json"), "eval", cfg, inputs, None,
        {"report": out, "per_query_csv": per_query},
    )
    for mode in modes:
        print(f"{mode}: mAP = {report.modes[mode].map:.4f}")
    return 0


# -------------------------------------------------------------------- query

def _cmd_query(args) -> int:
    db, default_queries = _resolve_db(args.db)
    bundles, qpath = _load_bundles(args, default_queries)
    matches = [b for b in bundles if b.query_id == args.query_id]
    if not matches:
        raise ValidationError(f"query id {args.query_id} not found in {qpath}")
    bundle = matches[0]
    if args.k is not None:
        if args.k == 0 and args.mode != "text_only":
            raise ValidationError(f"mode {args.mode!r} needs at least one image query (--k 0)")
        bundle = type(bundle)(
            query_id=bundle.query_id,
            text_embedding=bundle.text_embedding,
            image_queries=bundle.image_queries[: args.k],
            generator_tags=bundle.generator_tags[: args.k],
            label=bundle.label,
        )
    params = None
    if args.checkpoint:
        params = load_params(args.checkpoint)
        if params.d_i != db.vm_space.dim:
            raise ValidationError(
                f"checkpoint d_i={params.d_i} does not match database vm dim "
                f"{db.vm_space.dim}"
            )
    if params is None and args.mode in ("image_only_agg", "ours"):
        raise ValidationError(f"mode {args.mode!r} needs --checkpoint")
    scores = score_query(bundle, db, params, args.mode)
    order = rank(scores, top_k=args.top_k)
    records = [
        {
            "rank": r + 1,
            "id": int(db.vlm_space.ids[j]),
            "label": db.label_names.get(int(db.vlm_space.labels[j]),
                                        str(int(db.vlm_space.labels[j]))),
            "score": float(scores[j]),
        }
        for r, j in enumerate(order)
    ]
    text = json.dumps(records, indent=2) + "\n"
    if args.out:
        write_atomic(args.out, text.encode("utf-8"))
        inputs = {"db": args.db, "queries": qpath}
        if args.checkpoint:
            inputs["checkpoint"] = args.checkpoint
        _write_manifest(
            Path(args.out).with_suffix(Path(args.out).suffix + ".manifest.json"),
            "query",
            {"mode": args.mode, "query_id": args.query_id,
             "top_k": args.top_k, "k": args.k},
            inputs, None, {"results": args.out},
        )
    else:
        sys.stdout.write(text)
    return 0


# ------------------------------------------------------------ export-report

def _cmd_export_report(args) -> int:
    data = json.loads(Path(args.report).read_text("utf-8"))
    rows = []
    for mode in sorted(data["modes"]):
        entry = data["modes"][mode]
        rows.append((mode, "map", repr(entry["map"])))
        for k in sorted(entry["precision_at"], key=int):
            rows.append((mode, f"precision_at_{k}", repr(entry["precision_at"][k])))
        for k in sorted(entry["recall_at"], key=int):
            rows.append((mode, f"recall_at_{k}", repr(entry["recall_at"][k])))
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "metric", "value"])
    for row in rows:
        w.writerow(row)
    write_atomic(args.out, buf.getvalue().encode("utf-8"))
    _write_manifest(
        Path(args.out).with_suffix(Path(args.out).suffix + ".manifest.json"),
        "export-report", {}, {"report": args.report}, None, {"csv": args.out},
    )
    print(f"csv written to {args.out}")
    return 0


# ------------------------------------------------------------------ parsing

def build_parser() -> _Parser:
    p = _Parser(prog="hybridrank", description=__doc__)
    p.add_argument("--version", action="version", version=f"hybridrank {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="generate a synthetic embedding world")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="JSON config file; flags override")
    g.add_argument("--num-classes", type=int, default=60)
    g.add_argument("--d-c", type=int, default=32)
    g.add_argument("--d-i", type=int, default=32)
    g.add_argument("--db-items-per-class", type=int, default=40)
    g.add_argument("--images-per-class-per-generator", type=int, default=10)
    g.add_argument("--num-generators", type=int, default=3)
    g.add_argument("--noise-real", type=float, default=0.35)
    g.add_argument("--noise-syn", type=float, default=0.35)
    g.add_argument("--gap-strength", type=float, default=0.8)
    g.add_argument("--gen-bias-strength", type=float, default=0.4)
    g.add_argument("--train-fraction", type=float, default=0.7)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--family-size", type=int, default=4)
    g.add_argument("--family-spread", type=float, default=0.2)
    g.add_argument("--map-residual", type=float, default=0.3)
    g.add_argument("--failure-rate", type=float, default=0.45)
    g.add_argument("--failure-bias-scale", type=float, default=2.5)
    g.add_argument("--db-vlm-noise-scale", type=float, default=0.55)
    g.set_defaults(func=_cmd_gen_synth)

    t = sub.add_parser("train", help="train the aggregator on a world's train split")
    t.add_argument("--world", required=True, help="world_manifest.json path")
    t.add_argument("--out", required=True, help="checkpoint output path")
    t.add_argument("--log", help="JSONL training log path")
    t.add_argument("--config", help="JSON config file; flags override")
    t.add_argument("--m", type=int, default=32, help="classes per batch")
    t.add_argument("--n", type=int, default=5, help="image queries per class")
    t.add_argument("--tau", type=float, default=0.1)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--learning-rate", type=float, default=1e-3)
    t.add_argument("--beta1", type=float, default=0.9)
    t.add_argument("--beta2", type=float, default=0.999)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--num-layers", type=int, default=2)
    t.add_argument("--mining-mode", choices=["dynamic", "static"], default="dynamic")
    t.add_argument("--dual-generator", action=argparse.BooleanOptionalAction, default=True)
    t.add_argument("--repeat-inputs", action=argparse.BooleanOptionalAction, default=True)
    t.add_argument("--clamp-positive", action=argparse.BooleanOptionalAction, default=True)
    t.add_argument("--lambda-trainable", action=argparse.BooleanOptionalAction, default=True)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate scoring modes over a query set")
    e.add_argument("--db", required=True, help="world manifest or db manifest JSON")
    e.add_argument("--queries", help="bundle manifest (defaults to the world's)")
    e.add_argument("--checkpoint")
    e.add_argument("--config", help="JSON config file; flags override")
    e.add_argument("--modes", default="text_only,hybrid_mean,ours")
    e.add_argument("--k-list", default="10,100")
    e.add_argument("--out", required=True)
    e.add_argument("--format", choices=["json", "csv"], default="json")
    e.add_argument("--per-query-csv")
    e.add_argument("--max-k", type=int, help="cap image queries per generator")
    e.add_argument("--generators", help="comma list of generator tags to keep")
    e.add_argument("--repeat-inputs", action=argparse.BooleanOptionalAction, default=True)
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=_cmd_eval)

    q = sub.add_parser("query", help="rank the database for one query")
    q.add_argument("--db", required=True)
    q.add_argument("--queries")
    q.add_argument("--query-id", type=int, required=True)
    q.add_argument("--checkpoint")
    q.add_argument("--config", help="JSON config file; flags override")
    q.add_argument("--mode", choices=list(MODES), default="ours")
    q.add_argument("--top-k", type=int, default=10)
    q.add_argument("--k", type=int, help="use only the first k image queries (0 = none)")
    q.add_argument("--max-k", type=int, help="cap image queries per generator")
    q.add_argument("--generators", help="comma list of generator tags to keep")
    q.add_argument("--out")
    q.set_defaults(func=_cmd_query)

    x = sub.add_parser("export-report", help="convert a JSON eval report to CSV")
    x.add_argument("--report", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=_cmd_export_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    defaults = {a.dest: a.default for g in parser._subparsers._group_actions
                for a in g.choices[args.command]._actions}
    try:
        _apply_config_file(args, defaults)
        return args.func(args)
    except HybridRankError as exc:
        print(f"hybridrank {args.command}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"hybridrank {args.command}: missing file: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
