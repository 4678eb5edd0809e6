"""Command-line entry point: ``tmr <subcommand> [options]``.

Data directories used by ``train``, ``evaluate`` and ``ablate`` hold
tab-separated named triples:

    graph.tsv        facts the agent walks during training
    train.tsv        training queries (facts of graph.tsv)
    valid.tsv        validation queries
    test.tsv         test queries
    test_graph.tsv   optional; graph the valid/test queries are answered on
    features.bin     optional float32 image+text blob with features.json sidecar

Without features.bin, deterministic stand-in features are synthesised.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig, desk_config
from .datasets import (
    PlantedRule,
    holdout_queries,
    make_planted_mkg,
    make_sparse_planted_mkg,
    sample_inductive_pair,
    split_queries,
    verify_pair,
    write_inductive_pair,
)
from .evaluation import evaluate, format_table
from .graph import (
    FeatureError,
    GraphParseError,
    MultiModalKG,
    RelationVocab,
    load_features,
    load_triples,
    read_triples,
    save_features,
    synth_features,
    triples_to_ids,
    write_triples,
)
from .rules import mine_rules
from .trainer import VARIANTS, Trainer, TrainData, TrainingDiverged, load_model, run_ablation

log = logging.getLogger("tmr")


class UsageError(Exception):
    pass


# -- data directories ----------------------------------------------------------


def _named(kg: MultiModalKG, rows: np.ndarray) -> list[tuple[str, str, str]]:
    rn, en = kg.relations.names, kg.entity_names
    return [(en[h], rn[r], en[t]) for h, r, t in np.asarray(rows).reshape(-1, 3).tolist()]


def _ordered_entities(*triple_lists) -> list[str]:
    seen: dict[str, None] = {}
    for triples in triple_lists:
        for h, _, t in triples:
            seen.setdefault(h)
            seen.setdefault(t)
    return list(seen)


def _features(kg: MultiModalKG, path: Path, cfg: TrainConfig):
    if path.exists():
        store = load_features(kg, path)
        if (store.d_i, store.d_t) != (cfg.d_i, cfg.d_t):
            raise ConfigError("d_i", f"config expects d_i={cfg.d_i}, d_t={cfg.d_t} but {path.name} has {store.d_i}, {store.d_t}")
        return store
    return synth_features(kg, cfg.feature_seed, cfg.d_i, cfg.d_t)


def load_data_dir(root: str | Path, cfg: TrainConfig, relations: list[str] | None = None) -> TrainData:
    """Read a data directory into id space; ``relations`` pins the vocabulary order."""
    root = Path(root)
    if not (root / "graph.tsv").exists():
        raise FileNotFoundError(f"{root / 'graph.tsv'} not found")
    vocab = RelationVocab(relations or ())
    graph_t = read_triples(root / "graph.tsv")
    parts = {n: read_triples(root / f"{n}.tsv") if (root / f"{n}.tsv").exists() else [] for n in ("train", "valid", "test")}
    inductive = (root / "test_graph.tsv").exists()
    own = [graph_t, parts["train"]] + ([] if inductive else [parts["valid"], parts["test"]])
    graph = MultiModalKG.from_named_triples(graph_t, vocab, _ordered_entities(*own))
    feats = _features(graph, root / "features.bin", cfg)
    train = triples_to_ids(graph, parts["train"] or graph.named_triples())
    known = [graph.canonical_triplets()]
    if inductive:
        test_t = read_triples(root / "test_graph.tsv")
        tg = MultiModalKG.from_named_triples(test_t, vocab, _ordered_entities(test_t, parts["valid"], parts["test"]))
        tfeats = _features(tg, root / "test_features.bin", cfg) if (root / "test_features.bin").exists() else synth_features(tg, cfg.feature_seed, cfg.d_i, cfg.d_t)
        valid, test = triples_to_ids(tg, parts["valid"]), triples_to_ids(tg, parts["test"])
        known = [tg.canonical_triplets(), valid, test]
        return TrainData(graph, feats, train, valid, np.concatenate(known), test, tg, tfeats)
    valid, test = triples_to_ids(graph, parts["valid"]), triples_to_ids(graph, parts["test"])
    return TrainData(graph, feats, train, valid, np.concatenate(known + [valid, test]), test)


def write_query_dir(out: Path, graph: MultiModalKG, train, valid, test, features=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_triples(out / "graph.tsv", graph.named_triples())
    for name, rows in (("train", train), ("valid", valid), ("test", test)):
        write_triples(out / f"{name}.tsv", _named(graph, rows))
    if features is not None:
        save_features(features, out / "features.bin")


# -- subcommands ---------------------------------------------------------------


def _config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if getattr(args, "config", None) else desk_config()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("beam", "beam_width")):
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    return cfg.replace(**overrides) if overrides else cfg


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.kind == "planted":
        pg = make_planted_mkg(args.entities, args.relations, [PlantedRule((1, 2), 0, args.support)],
                              int(round(args.noise * args.support * 3)), args.seed)
    else:
        pg = make_sparse_planted_mkg(args.support, max(args.relations, 6), args.sparsity, args.noise, args.seed)
    qs = holdout_queries(pg.kg, pg.head_facts[0], args.seed)
    feats = synth_features(qs.graph, args.seed, args.d_i, args.d_t)
    if out.exists():
        shutil.rmtree(out)
    write_query_dir(out, qs.graph, qs.train, qs.valid, qs.test, feats)
    report = {"kind": args.kind, "seed": args.seed, "entities": qs.graph.num_entities,
              "facts": len(qs.graph.canonical_triplets()), "train": len(qs.train), "valid": len(qs.valid), "test": len(qs.test)}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_build_dataset(args) -> int:
    kg = load_triples(args.input)
    pair = sample_inductive_pair(kg, args.roots, args.hops, args.cap, args.fraction, args.seed)
    problems = verify_pair(pair)
    if problems:
        raise RuntimeError(f"split violates its contract: {problems[0]}")
    out = Path(args.out)
    write_inductive_pair(pair, out, args.seed)
    train_g, test_g = pair.train_graph, pair.ind_test_graph
    facts, valid, test = split_queries(test_g.canonical_triplets(), args.seed)
    write_triples(out / "graph.tsv", train_g.named_triples())
    write_triples(out / "train.tsv", train_g.named_triples())
    write_triples(out / "test_graph.tsv", _named(test_g, facts))
    write_triples(out / "valid.tsv", _named(test_g, valid))
    write_triples(out / "test.tsv", _named(test_g, test))
    print(json.dumps(pair.report.to_json(), sort_keys=True))
    return 0


def cmd_mine_rules(args) -> int:
    cfg = _config(args)
    data = load_data_dir(args.data, cfg)
    index = mine_rules(data.graph, cfg.rule_max_len, cfg.rule_min_support, cfg.rule_min_conf)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index.save(out / "rules.tsv", data.graph)
    print(f"{len(index)} rules written to {out / 'rules.tsv'}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    if args.resume:
        model_relations = json.loads(_manifest(args.resume))["relations"]
        data = load_data_dir(args.data, cfg, model_relations)
        trainer = Trainer.resume(args.resume, data, out)
    else:
        data = load_data_dir(args.data, cfg)
        metrics_path.unlink(missing_ok=True)
        trainer = Trainer(data, cfg, out=out)
    (out / "config.json").write_text(json.dumps(trainer.cfg.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    try:
        trainer.fit(cfg.epochs, metrics_path)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; last good checkpoint at {exc.checkpoint}", file=sys.stderr)
        return 4
    print(f"trained {trainer.epoch} epochs; checkpoint {out / 'model.ckpt'}")
    return 0


def _manifest(path) -> str:
    import zipfile

    with zipfile.ZipFile(path) as z:
        return z.read("manifest.json").decode("utf-8")


def cmd_evaluate(args) -> int:
    manifest = json.loads(_manifest(args.checkpoint))
    cfg = TrainConfig.from_dict(manifest["config"])
    if args.beam is not None:
        cfg = cfg.replace(beam_width=args.beam)
    data = load_data_dir(args.data, cfg, manifest["relations"])
    model, ck = load_model(args.checkpoint, data.graph)
    queries = data.test if args.split == "test" else data.valid
    kg = data.test_graph or data.graph
    feats = data.test_features or data.features
    if args.split == "valid" and data.test_graph is None:
        kg, feats = data.graph, data.features
    m = evaluate(model, kg, feats, queries, data.known, ck.rules, cfg.beam_width, data.pretrained, filtered=not args.raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = {"split": args.split, "filtered": not args.raw, "beam_width": cfg.beam_width, "n_queries": len(queries),
              "mrr": m["mrr"], "hits1": m["hits1"], "hits10": m["hits10"], "unreached_rule": m["unreached_rule"], "ranks": m["ranks"]}
    (out / "metrics.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    table = format_table({"TMR": m}, f"{args.split} ({'raw' if args.raw else 'filtered'})")
    (out / "table.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    data = load_data_dir(args.data, cfg)
    variants = args.variant or [v for v in VARIANTS if v != "TMR"]
    for v in variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(data, cfg, variants, out)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    table = format_table(rows, "ablation")
    (out / "table.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tmr", description="Multi-modal knowledge graph reasoning pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, config=True):
        if data:
            sp.add_argument("--data", required=True, help="data directory")
        if config:
            sp.add_argument("--config", help="JSON config file (flags override it)")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("synth", help="write a synthetic planted-rule dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=["planted", "sparse"], default="planted")
    s.add_argument("--entities", type=int, default=300)
    s.add_argument("--relations", type=int, default=4)
    s.add_argument("--support", type=int, default=50)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--sparsity", type=float, default=0.3)
    s.add_argument("--d-i", dest="d_i", type=int, default=8)
    s.add_argument("--d-t", dest="d_t", type=int, default=8)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-dataset", help="sample a disjoint inductive train/test pair")
    s.add_argument("--input", required=True, help="tab-separated triple file")
    s.add_argument("--fraction", type=float, default=0.1)
    s.add_argument("--roots", type=int, default=10)
    s.add_argument("--hops", type=int, default=2)
    s.add_argument("--cap", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_dataset)

    s = sub.add_parser("mine-rules", help="mine chain rules from graph.tsv")
    common(s)
    s.set_defaults(func=cmd_mine_rules)

    s = sub.add_parser("train", help="adversarial training")
    common(s)
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="rank test queries with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=["test", "valid"], default="test")
    s.add_argument("--beam", type=int)
    s.add_argument("--raw", action="store_true", help="raw instead of filtered ranking")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="train variants and compare against the full model")
    common(s)
    s.add_argument("--variant", action="append", help=f"one of: {', '.join(VARIANTS)} (repeatable; default all)")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("MKGR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, GraphParseError, FeatureError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
