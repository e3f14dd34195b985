"""Command-line workflow: data generation, training, retrieval, evaluation.

Exit codes: 0 success, 1 usage, 2 data/format problems, 3 numeric failures.
Machine-readable subcommands print JSON with stable key order; training
progress streams as JSON lines.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import (ConfigError, DataError, FormatError, NumericError,
                     ParseError, SbmoeError, ShapeError)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse variant that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageExit()


def _dump(payload) -> None:
    print(json.dumps(payload, sort_keys=True))


def _build_parser() -> _Parser:
    parser = _Parser(prog="sbmoe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen-synthetic", help="write a synthetic multi-domain dataset")
    gen.add_argument("--spec-json", help="JSON file holding the generator fields "
                                         "(flags override individual values)")
    gen.add_argument("--dim", type=int, help="embedding dimension")
    gen.add_argument("--domains", type=int, help="number of domains")
    gen.add_argument("--docs-per-domain", type=int, help="documents per domain")
    gen.add_argument("--queries-per-domain", type=int, help="queries per domain")
    gen.add_argument("--noise", type=float, help="query noise level (default 0.05)")
    gen.add_argument("--seed", type=int, help="generator seed (default 42)")
    gen.add_argument("--out-prefix", required=True, help="prefix for the output files")

    def add_train_flags(p):
        p.add_argument("--queries", required=True, help="query embedding store")
        p.add_argument("--docs", required=True, help="document embedding store")
        p.add_argument("--qrels", required=True, help="training qrels file")
        p.add_argument("--experts", type=int, default=6, help="number of experts (default 6)")
        p.add_argument("--pooling", choices=["top1", "all"], default="all",
                       help="pooling strategy (default all)")
        p.add_argument("--epochs", type=int, required=True, help="training epochs")
        p.add_argument("--batch-size", type=int, default=64, help="batch size (default 64)")
        p.add_argument("--lr", type=float, default=1e-4, help="learning rate (default 1e-4)")
        p.add_argument("--temperature", type=float, default=0.05,
                       help="contrastive temperature (default 0.05)")
        p.add_argument("--val-frac", type=float, default=0.05,
                       help="validation fraction (default 0.05)")
        p.add_argument("--seed", type=int, default=42, help="random seed (default 42)")
        p.add_argument("--similarity", choices=["cosine", "dot"], default="cosine",
                       help="similarity function (default cosine)")

    tr = sub.add_parser("train", help="train a head and keep the best-validation checkpoint")
    add_train_flags(tr)
    tr.add_argument("--out", required=True, help="model output path")

    sw = sub.add_parser("sweep", help="train and evaluate one model per expert count")
    add_train_flags(sw)
    sw.add_argument("--experts-list", required=True,
                    help='comma-separated expert counts, e.g. "3,6,9,12"')
    sw.add_argument("--k", type=int, default=100, help="retrieval depth (default 100)")
    sw.add_argument("--out-prefix", required=True, help="prefix for models and report")

    se = sub.add_parser("search", help="write a TREC run by exhaustive retrieval")
    se.add_argument("--queries", required=True, help="query embedding store")
    se.add_argument("--docs", required=True, help="document embedding store")
    se.add_argument("--model", help="trained head (omit to score raw embeddings)")
    se.add_argument("--k", type=int, default=100, help="results per query (default 100)")
    se.add_argument("--similarity", choices=["cosine", "dot"], default="cosine",
                    help="similarity function (default cosine)")
    se.add_argument("--tag", default="sbmoe", help="run tag (default sbmoe)")
    se.add_argument("--out", required=True, help="run output path")

    ev = sub.add_parser("eval", help="score a run against qrels")
    ev.add_argument("--run", required=True, help="TREC run file")
    ev.add_argument("--qrels", required=True, help="TREC qrels file")
    ev.add_argument("--metrics", default="ndcg@10,recall@100",
                    help="metrics to report (default ndcg@10,recall@100)")

    cp = sub.add_parser("compare", help="paired significance test between two runs")
    cp.add_argument("--run-a", required=True, help="first TREC run file")
    cp.add_argument("--run-b", required=True, help="second TREC run file")
    cp.add_argument("--qrels", required=True, help="TREC qrels file")
    cp.add_argument("--num-comparisons", type=int, required=True,
                    help="comparison family size for the Bonferroni correction")
    cp.add_argument("--metrics", default="ndcg@10,recall@100",
                    help="metrics to test (default ndcg@10,recall@100)")
    cp.add_argument("--alpha", type=float, default=0.05,
                    help="significance level (default 0.05)")

    gc = sub.add_parser("grad-check", help="compare analytic gradients to finite differences")
    gc.add_argument("--dim", type=int, default=8, help="embedding dimension (default 8)")
    gc.add_argument("--experts", type=int, default=3, help="expert count (default 3)")
    gc.add_argument("--batch-size", type=int, default=4, help="batch size (default 4)")
    gc.add_argument("--seed", type=int, default=42, help="random seed (default 42)")
    gc.add_argument("--tolerance", type=float, default=1e-4,
                    help="max relative error allowed (default 1e-4)")
    return parser


def _parse_metrics(text: str) -> tuple[int, int]:
    ndcg_k, recall_k = 10, 100
    for item in text.split(","):
        item = item.strip().lower()
        if not item:
            continue
        if item.startswith("ndcg@"):
            ndcg_k = int(item.split("@", 1)[1])
        elif item.startswith("recall@") or item.startswith("r@"):
            recall_k = int(item.split("@", 1)[1])
        else:
            raise ConfigError(f"unknown metric {item!r} (use ndcg@K / recall@K)")
    return ndcg_k, recall_k


def _cmd_gen_synthetic(args) -> int:
    from .data import SyntheticSpec, generate_synthetic, write_qrels, write_store

    fields = {}
    if args.spec_json:
        fields.update(json.loads(Path(args.spec_json).read_text(encoding="utf-8")))
    for key, flag in (("dim", args.dim), ("n_domains", args.domains),
                      ("docs_per_domain", args.docs_per_domain),
                      ("queries_per_domain", args.queries_per_domain),
                      ("noise", args.noise), ("seed", args.seed)):
        if flag is not None:
            fields[key] = flag
    fields.setdefault("noise", 0.05)
    fields.setdefault("seed", 42)
    missing = [k for k in ("dim", "n_domains", "docs_per_domain", "queries_per_domain")
               if k not in fields]
    if missing:
        raise ConfigError(f"missing generator fields: {', '.join(missing)}")

    spec = SyntheticSpec(**fields)
    queries, docs, qrels = generate_synthetic(spec)
    prefix = Path(args.out_prefix)
    write_store(queries, f"{prefix}.queries.sbmv")
    write_store(docs, f"{prefix}.docs.sbmv")
    write_qrels(qrels, f"{prefix}.qrels.txt")
    spec_echo = {"dim": spec.dim, "n_domains": spec.n_domains,
                 "docs_per_domain": spec.docs_per_domain,
                 "queries_per_domain": spec.queries_per_domain,
                 "noise": spec.noise, "seed": spec.seed}
    Path(f"{prefix}.spec.json").write_text(
        json.dumps(spec_echo, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _dump({"queries": f"{prefix}.queries.sbmv", "docs": f"{prefix}.docs.sbmv",
           "qrels": f"{prefix}.qrels.txt", "spec": f"{prefix}.spec.json",
           "n_queries": len(queries), "n_docs": len(docs)})
    return EXIT_OK


def _train_config(args):
    from .training import TrainConfig

    return TrainConfig(epochs=args.epochs, n_experts=args.experts, pooling=args.pooling,
                       batch_size=args.batch_size, lr=args.lr,
                       temperature=args.temperature, val_fraction=args.val_frac,
                       seed=args.seed, similarity=args.similarity)


def _load_training_inputs(args):
    from .data import pairs_from_qrels, parse_qrels, read_store

    queries = read_store(args.queries)
    docs = read_store(args.docs)
    qrels = parse_qrels(args.qrels)
    return queries, docs, qrels, pairs_from_qrels(qrels)


def _cmd_train(args) -> int:
    from .training import save_checkpoint, train

    queries, docs, qrels, pairs = _load_training_inputs(args)
    cfg = _train_config(args)

    def progress(epoch, train_loss, val_loss):
        import math as _math
        _dump({"epoch": epoch,
               "train_loss": None if _math.isnan(train_loss) else train_loss,
               "val_loss": val_loss})

    ckpt = train(pairs, cfg, queries, docs, on_epoch=progress)
    save_checkpoint(ckpt, args.out, queries, docs, pairs)
    _dump({"model": args.out, "best_epoch": ckpt.epoch, "val_loss": ckpt.val_loss})
    return EXIT_OK


def _cmd_sweep(args) -> int:
    from dataclasses import replace

    from .evaluation import evaluate_run, retrieve
    from .training import save_checkpoint, split_pairs, train

    try:
        counts = [int(x) for x in args.experts_list.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad --experts-list {args.experts_list!r}") from None
    if not counts:
        raise ConfigError("--experts-list is empty")

    queries, docs, qrels, pairs = _load_training_inputs(args)
    base_cfg = _train_config(args)

    # evaluation uses the same held-out split every run of the sweep
    _, val_pairs = split_pairs(pairs, base_cfg.val_fraction, base_cfg.seed)
    val_qids = sorted({q for q, _ in val_pairs})
    val_qrels = {q: qrels[q] for q in val_qids}
    val_queries = queries.subset(val_qids)

    rows = []
    for n in counts:
        cfg = replace(base_cfg, n_experts=n)
        ckpt = train(pairs, cfg, queries, docs)
        model_path = f"{args.out_prefix}.n{n}.sbmh"
        save_checkpoint(ckpt, model_path, queries, docs, pairs)
        run = retrieve(val_queries, docs, ckpt.head, k=max(args.k, 100),
                       similarity=cfg.similarity)
        report = evaluate_run(run, val_qrels)
        rows.append({"n_experts": n, "ndcg@10": report.mean_ndcg,
                     "recall@100": report.mean_recall, "best_epoch": ckpt.epoch,
                     "val_loss": ckpt.val_loss, "model": model_path})
    table = {"rows": rows, "evaluated_queries": len(val_qids)}
    Path(f"{args.out_prefix}.sweep.json").write_text(
        json.dumps(table, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _dump(table)
    return EXIT_OK


def _cmd_search(args) -> int:
    from .data import read_store, write_run
    from .evaluation import retrieve
    from .training import load_checkpoint

    queries = read_store(args.queries)
    docs = read_store(args.docs)
    head = load_checkpoint(args.model)[0] if args.model else None
    run = retrieve(queries, docs, head, k=args.k, similarity=args.similarity)
    write_run(run, args.out, tag=args.tag)
    _dump({"run": args.out, "queries": len(run)})
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .data import parse_qrels, parse_run
    from .evaluation import evaluate_run

    ndcg_k, recall_k = _parse_metrics(args.metrics)
    run = parse_run(args.run)
    qrels = parse_qrels(args.qrels)
    report = evaluate_run(run, qrels, ndcg_k, recall_k)
    _dump(report.to_json_dict())
    return EXIT_OK


def _cmd_compare(args) -> int:
    from .data import parse_qrels, parse_run
    from .evaluation import compare_runs

    ndcg_k, recall_k = _parse_metrics(args.metrics)
    reports = compare_runs(parse_run(args.run_a), parse_run(args.run_b),
                           parse_qrels(args.qrels), m=args.num_comparisons,
                           ndcg_k=ndcg_k, recall_k=recall_k, alpha=args.alpha)
    _dump({"alpha": args.alpha, "tests": [r.to_json_dict() for r in reports]})
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    from .training import grad_check

    combos = [(p, s) for p in ("top1", "all") for s in ("cosine", "dot")]
    results = []
    worst = 0.0
    for pooling, sim in combos:
        report = grad_check(pooling, sim, d=args.dim, n=args.experts,
                            batch_size=args.batch_size, seed=args.seed)
        worst = max(worst, report.max_rel_err)
        results.append({"pooling": pooling, "similarity": sim,
                        "max_rel_err": report.max_rel_err,
                        "max_abs_diff": report.max_abs_diff})
    _dump({"checks": results, "max_rel_err": worst, "tolerance": args.tolerance})
    return EXIT_OK if worst <= args.tolerance else EXIT_NUMERIC


_HANDLERS = {
    "gen-synthetic": _cmd_gen_synthetic,
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "search": _cmd_search,
    "eval": _cmd_eval,
    "compare": _cmd_compare,
    "grad-check": _cmd_grad_check,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit:
        return EXIT_USAGE
    try:
        return _HANDLERS[args.command](args)
    except (ConfigError,) as exc:
        print(f"sbmoe {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, ParseError, ShapeError, FileNotFoundError) as exc:
        print(f"sbmoe {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"sbmoe {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SbmoeError as exc:  # anything else from this package
        print(f"sbmoe {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
