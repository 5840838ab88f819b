"""Command-line entry point.

Verbs: ingest, train, evaluate, sweep, report (plus synth, which writes a
synthetic MIND-layout corpus for smoke runs). Exit codes: 0 ok, 1
configuration error, 2 data error. NEWSREC_DATA_ROOT provides the default
--data-dir.
"""

import argparse
import json
import os
import sys
from pathlib import Path

from . import corpus as corpus_mod
from . import embeddings as emb_mod
from .corpus import corpus_stats, parse_behaviors, parse_news
from .evaluation import bucket_users, evaluate_run
from .experiment import (DataMissing, ExperimentSpec, InvalidSpec,
                         cold_start_rows, emit_report, execute_run,
                         grid_search, run_experiment, run_id, write_tsv)
from .synthetic import SyntheticSpec, write_mind_layout
from .training import RunConfig, load_dataset

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2

CONFIG_ERRORS = (InvalidSpec, ValueError)
DATA_ERRORS = (DataMissing, FileNotFoundError, corpus_mod.MalformedLine,
               corpus_mod.MalformedLabel, corpus_mod.DuplicateId,
               emb_mod.BadMagic, emb_mod.TruncatedFile, emb_mod.CountMismatch,
               emb_mod.DimMismatch, emb_mod.EmptyFile, emb_mod.MissingEmbedding)


def _data_dir(args):
    if args.data_dir:
        return Path(args.data_dir)
    env = os.environ.get("NEWSREC_DATA_ROOT")
    if env:
        return Path(env)
    raise InvalidSpec("no --data-dir given and NEWSREC_DATA_ROOT unset")


def _add_common_data_flags(p):
    p.add_argument("--data-dir", default="")
    p.add_argument("--max-title", type=int, default=20)
    p.add_argument("--max-abstract", type=int, default=50)
    p.add_argument("--max-history", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)


def cmd_ingest(args):
    data_dir = _data_dir(args)
    config = RunConfig(max_title=args.max_title, max_abstract=args.max_abstract,
                       max_history=args.max_history, seed=args.seed)
    with open(data_dir / "train" / "news.tsv", encoding="utf-8") as f:
        train_catalog = parse_news(f)
    with open(data_dir / "dev" / "news.tsv", encoding="utf-8") as f:
        dev_catalog = parse_news(f)
    with open(data_dir / "train" / "behaviors.tsv", encoding="utf-8") as f:
        train_imps = parse_behaviors(f)
    with open(data_dir / "dev" / "behaviors.tsv", encoding="utf-8") as f:
        dev_imps = parse_behaviors(f)
    stats = corpus_stats(train_catalog, train_imps + dev_imps,
                         test_catalog=dev_catalog)
    users_both = {i.user_id for i in train_imps} | {i.user_id for i in dev_imps}
    print(f"train news {len(train_catalog)}  dev news {len(dev_catalog)}  "
          f"users {len(users_both)}")
    print(stats.render())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        bundle = load_dataset(data_dir, config)
        cat = bundle.catalog
        rows = []
        for nid in cat.news_ids[1:]:
            r = cat.row_of(nid)
            rows.append("\t".join([
                nid, str(cat.category[r]), str(cat.subcategory[r]),
                " ".join(map(str, cat.title_ids[r])),
                " ".join(map(str, cat.abstract_ids[r]))]))
        (out / "news_tokens.tsv").write_text("\n".join(rows) + "\n")
        (out / "stats.txt").write_text(stats.render() + "\n")
        print(f"wrote normalized dump to {out}")
    return EXIT_OK


def cmd_synth(args):
    spec = SyntheticSpec(seed=args.seed, num_articles=args.articles,
                         num_impressions=args.impressions, num_users=args.users)
    out = write_mind_layout(args.out, spec)
    print(f"wrote synthetic MIND layout under {out}")
    return EXIT_OK


def _run_config_from_args(args):
    flat = RunConfig().to_flat_dict()
    if args.config:
        from .experiment import parse_flat_config
        text = Path(args.config).read_text()
        file_flat = parse_flat_config(text)
        file_flat.pop("schema_version", None)
        for key, value in file_flat.items():
            if key not in flat:
                raise InvalidSpec(f"unknown config key {key!r}")
            flat[key] = type(flat[key])(value) if not isinstance(flat[key], bool) \
                else value.lower() in ("1", "true", "yes")
    overrides = {
        "architecture": args.arch, "lm_mode": args.lm, "negatives": args.negatives,
        "dropout": args.dropout, "learning_rate": args.lr,
        "batch_size": args.batch_size, "max_epochs": args.epochs,
        "patience": args.patience, "seed": args.seed,
        "max_title": args.max_title, "max_abstract": args.max_abstract,
        "max_history": args.max_history,
        "static_vectors": args.static_vectors,
        "news_embeddings": args.news_embeddings,
        "news_embeddings_abstract": args.news_embeddings_abstract,
    }
    for key, value in overrides.items():
        if value is not None:
            flat[key] = value
    return RunConfig.from_flat_dict(flat)


def cmd_train(args):
    import dataclasses
    data_dir = _data_dir(args)
    config = _run_config_from_args(args)
    bundle = load_dataset(data_dir, config)
    seeds = ([int(s) for s in args.seeds.split(",") if s.strip()]
             if args.seeds else [config.seed])
    collected = []
    for seed in seeds:
        cfg = dataclasses.replace(config, seed=seed)
        rid = run_id(cfg)
        run_dir = Path(args.out) / rid
        metrics = execute_run(cfg, bundle, run_dir, force=args.force)
        collected.append(metrics)
        print(f"run {rid} (seed {seed}) complete under {run_dir}")
    if len(collected) == 1:
        print(json.dumps(collected[0]["test"], indent=2))
    else:
        # mean +/- half spread over seeds, no seed protocol implied
        for col in ("auc", "mrr", "ndcg5", "ndcg10"):
            vals = [m["test"][col] for m in collected]
            mean = sum(vals) / len(vals)
            spread = (max(vals) - min(vals)) / 2.0
            print(f"{col:>6}: {mean:.2f} ± {spread:.2f} over {len(vals)} seeds")
    return EXIT_OK


def cmd_evaluate(args):
    data_dir = _data_dir(args)
    config = RunConfig(max_title=args.max_title, max_abstract=args.max_abstract,
                       max_history=args.max_history)
    bundle = load_dataset(data_dir, config)
    predictions = args.predictions
    if args.run_dir:
        predictions = str(Path(args.run_dir) / "predictions.tsv")
    if not predictions or not Path(predictions).exists():
        raise DataMissing(f"prediction dump {predictions!r} not found")
    report = evaluate_run(predictions, bundle.test_impressions)
    print(report.render())
    if args.groups_out:
        partition = bucket_users(bundle.test_impressions)
        users = {i.impression_id: i.user_id for i in bundle.test_impressions}
        name = args.encoder_name or "run"
        rows, rep = cold_start_rows(partition, {name: (report, users)}, baseline=name)
        write_tsv(args.groups_out, rows)
        print(rep.render())
    return EXIT_OK


def cmd_sweep(args):
    spec = ExperimentSpec.from_file(args.spec)
    results = run_experiment(spec, force=args.force)
    best = grid_search(results)
    for (arch, lm), metrics in sorted(best.items()):
        print(f"best {arch}/{lm}: run {metrics['run_id']} "
              f"val_auc {metrics['val_auc']:.2f} test_auc {metrics['test']['auc']:.2f}")
    return EXIT_OK


def cmd_report(args):
    emit_report(args.runs, args.out, data_dir=args.data_dir,
                baseline=args.baseline)
    print(f"report written under {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="newsrec", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("ingest", help="parse a MIND-layout dataset and print stats")
    _add_common_data_flags(p)
    p.add_argument("--out", default="", help="write a normalized dump here")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("synth", help="write a synthetic topic-match corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--articles", type=int, default=2000)
    p.add_argument("--impressions", type=int, default=5000)
    p.add_argument("--users", type=int, default=600)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train one run and evaluate it")
    _add_common_data_flags(p)
    p.add_argument("--config", default="", help="flat key=value run config")
    p.add_argument("--arch", choices=["naml", "nrms", "lstur"], default=None)
    p.add_argument("--lm", default=None,
                   help="slm | slm-frozen | plm:k | plm-frozen | llm")
    p.add_argument("--negatives", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--static-vectors", default=None)
    p.add_argument("--news-embeddings", default=None)
    p.add_argument("--news-embeddings-abstract", default=None)
    p.add_argument("--out", default="runs")
    p.add_argument("--seeds", default="",
                   help="comma-separated seeds; reports mean +/- spread")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score a prediction dump")
    _add_common_data_flags(p)
    p.add_argument("--run-dir", default="")
    p.add_argument("--predictions", default="")
    p.add_argument("--groups-out", default="",
                   help="also write engagement-group rows to this TSV")
    p.add_argument("--encoder-name", default="")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="run a config grid")
    p.add_argument("--spec", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="emit comparison tables from run dirs")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data-dir", default="",
                   help="with --baseline: rebuild the engagement-group chart")
    p.add_argument("--baseline", default="",
                   help="arch/lm cell used as the group-chart baseline")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CONFIG_ERRORS as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
