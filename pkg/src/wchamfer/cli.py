"""Command-line pipeline: idf, train, rerank, eval, synth, recover.

Exit codes: 0 success, 1 domain error, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

from ._io import atomic_write
from .evaluation import evaluate, read_qrels
from .retrieval import bm25_topk, build_index
from .scoring import RankedList, read_run, rerank, write_run
from .store import EmbeddingStore, Vocab, load_store, read_tokenized
from .synthetic import PlantedTaskSpec, SyntheticSpec, generate_planted_task, write_planted_task
from .theory import format_sweep, sample_complexity_sweep, success_rates
from .trainer import (
    TrainConfig,
    build_train_queries,
    format_train_log,
    read_kv,
    read_train_set,
    seen_tokens,
    train,
)
from .weights import (
    SpecialPolicy,
    backfill_unseen,
    compute_idf,
    count_doc_freq,
    load_weights,
    save_weights,
)


class UsageError(Exception):
    """Bad invocation or configuration; maps to exit code 2."""


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_store(path, special_ids) -> EmbeddingStore:
    store = load_store(path)
    return store.with_special_ids(special_ids) if special_ids else store


def _read_ids(path) -> list[str]:
    """First whitespace-separated column of every non-empty line, deduplicated."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if parts:
                out[parts[0]] = None
    return list(out)


# ---------------------------------------------------------------------------
# idf


def cmd_idf(args) -> int:
    corpus = read_tokenized(args.corpus)
    if not corpus:
        raise ValueError(f"corpus {args.corpus} is empty")
    vocab_size = args.vocab_size
    if vocab_size is None:
        vocab_size = 1 + max((int(t.max()) for t in corpus.values() if t.size), default=-1)
    vocab = Vocab(vocab_size, frozenset(args.special_ids or ()))
    df = count_doc_freq(corpus, vocab_size, args.sample, args.seed or 0)
    table = compute_idf(df, vocab, args.special)
    save_weights(table, args.out)
    print(f"wrote IDF weights for {vocab_size} tokens from {df.n_docs} documents to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _resolve(cfg: dict[str, str], key: str, base: Path, required: bool = True) -> Path | None:
    if key not in cfg:
        if required:
            raise UsageError(f"config is missing '{key}'")
        return None
    p = Path(cfg[key])
    return p if p.is_absolute() else base / p


def _labels_qrels(labels) -> dict[str, dict[str, int]]:
    return {qid: {d: 1 for d in pos} for qid, (pos, _) in labels.items()}


def _validation_recall(labels, queries, docs, table, qrels, k) -> float:
    runs = {}
    for qid, (pos, neg) in labels.items():
        runs[qid] = rerank(queries[qid], list(dict.fromkeys(list(pos) + list(neg))), docs, table).ids
    report = evaluate(runs, qrels, [k])
    if not report.evaluated:
        raise ValueError("no validation query has a relevant document")
    return report.mean("recall", k)


def cmd_train(args) -> int:
    cfg_path = Path(args.config_file or args.config or "")
    if not cfg_path.name:
        raise UsageError("train needs a config file (positional or --config)")
    cfg = read_kv(cfg_path)
    base = cfg_path.parent
    known = {f.name for f in fields(TrainConfig)}
    if args.seed is not None:
        cfg["seed"] = str(args.seed)
    config = TrainConfig.from_mapping({k: v for k, v in cfg.items() if k in known})
    if config.alpha == 0.0 and "lambda1_size" in cfg:
        print("warning: alpha=0, so lambda1_size is ignored", file=sys.stderr)
    select_k = int(cfg.get("select_k", 10))

    special = args.special_ids or [int(t) for t in cfg.get("special_ids", "").split(",") if t.strip()]
    queries = _load_store(_resolve(cfg, "query_store", base), special)
    docs = _load_store(_resolve(cfg, "doc_store", base), special)
    train_labels = read_train_set(_resolve(cfg, "train_set", base))
    val_labels = read_train_set(_resolve(cfg, "val_set", base))
    val_qrels_path = _resolve(cfg, "val_qrels", base, required=False)
    val_qrels = read_qrels(val_qrels_path) if val_qrels_path else _labels_qrels(val_labels)
    vocab_size = queries.vocab.size

    idf_path = _resolve(cfg, "idf_weights", base, required=False)
    if idf_path is not None:
        idf_table = load_weights(idf_path)
    else:
        corpus_path = _resolve(cfg, "corpus", base, required=False)
        corpus = read_tokenized(corpus_path) if corpus_path else docs.tokenized()
        policy = SpecialPolicy(cfg.get("special_policy", "one"))
        idf_table = compute_idf(count_doc_freq(corpus, vocab_size), queries.vocab, policy)
    if len(idf_table) != vocab_size:
        raise ValueError(f"IDF table has {len(idf_table)} entries, vocab has {vocab_size}")

    history: list[tuple[int, float, float]] = []
    try:
        train_q = build_train_queries(train_labels, queries, docs)
        learned = train(train_q, config, vocab_size=vocab_size, history=history)
        candidate = backfill_unseen(learned, idf_table, seen_tokens(train_q))
    except ValueError as exc:
        raise ValueError(f"[train] {exc}") from exc

    try:
        idf_score = _validation_recall(val_labels, queries, docs, idf_table, val_qrels, select_k)
        learned_score = _validation_recall(val_labels, queries, docs, candidate, val_qrels, select_k)
    except ValueError as exc:
        raise ValueError(f"[validate] {exc}") from exc

    retrained = False
    if learned_score > idf_score:
        try:
            union = dict(train_labels)
            for qid, (pos, neg) in val_labels.items():
                if qid in union:
                    p0, n0 = union[qid]
                    union[qid] = (list(dict.fromkeys(p0 + pos)), [d for d in dict.fromkeys(n0 + neg) if d not in pos])
                else:
                    union[qid] = (pos, neg)
            all_q = build_train_queries(union, queries, docs)
            history = []
            learned = train(all_q, config, vocab_size=vocab_size, history=history)
            final = backfill_unseen(learned, idf_table, seen_tokens(all_q))
            retrained = True
        except ValueError as exc:
            raise ValueError(f"[retrain] {exc}") from exc
        selected = "learned"
    else:
        final = idf_table
        selected = "idf"

    out = _resolve(cfg, "out", base)
    save_weights(final, out)
    report_path = _resolve(cfg, "report", base, required=False) or out.with_name(out.name + ".selection.txt")
    atomic_write(
        report_path,
        f"metric=recall@{select_k}\n"
        f"idf={idf_score:.17g}\n"
        f"learned={learned_score:.17g}\n"
        f"selected={selected}\n"
        f"retrained={int(retrained)}\n",
    )
    log_path = _resolve(cfg, "log", base, required=False)
    if log_path is not None:
        atomic_write(log_path, format_train_log(history))
    print(f"validation recall@{select_k}: idf={idf_score:.4f} learned={learned_score:.4f} -> {selected}")
    print(f"wrote {out} (provenance={final.provenance.value})")
    return 0


# ---------------------------------------------------------------------------
# rerank


def cmd_rerank(args) -> int:
    queries = _load_store(args.queries, args.special_ids)
    docs = _load_store(args.docs, args.special_ids)
    table = load_weights(args.weights)
    if len(table) != queries.vocab.size:
        raise ValueError(f"weight table has {len(table)} entries, query vocab has {queries.vocab.size}")
    qids = _read_ids(args.qids) if args.qids else list(queries)
    missing = [q for q in qids if q not in queries]
    if missing:
        raise ValueError(f"queries not in store: {missing[:5]}")

    if args.candidates == "bm25":
        corpus = read_tokenized(args.corpus) if args.corpus else docs.tokenized()
        index = build_index(corpus)
        special = queries.vocab.special_ids

        def candidates_for(qid):
            terms = [int(t) for t in queries[qid].token_ids if int(t) not in special]
            return [d for d, _ in bm25_topk(index, terms, args.k)]

    else:
        cand_run = read_run(args.candidates)

        def candidates_for(qid):
            return [d for d, _ in cand_run.get(qid, [])[: args.k]]

    def work(qid) -> tuple[str, RankedList]:
        cands = candidates_for(qid)
        return qid, rerank(queries[qid], cands, docs, table) if cands else RankedList(())

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        runs = dict(pool.map(work, qids))
    empty = sorted(q for q, r in runs.items() if not len(r))
    if empty:
        print(f"warning: {len(empty)} queries have no candidates", file=sys.stderr)
    write_run(runs, args.out, args.tag)
    print(f"wrote run for {len(runs)} queries to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    run = read_run(args.run)
    qrels = read_qrels(args.qrels)
    runs = {qid: [d for d, _ in ranked] for qid, ranked in run.items()}
    report = evaluate(runs, qrels, args.k)
    if report.missing_qrels:
        print(f"warning: {len(report.missing_qrels)} run queries missing from qrels", file=sys.stderr)
    if report.no_relevant:
        print(f"warning: {len(report.no_relevant)} queries without relevant documents", file=sys.stderr)
    if not report.evaluated:
        raise ValueError("run and qrels share no query with relevant documents")
    if args.out:
        atomic_write(args.out, report.to_csv())
    for (metric, k), value in report.means.items():
        print(f"{metric}@{k}\t{value:.4f}")
    return 0


# ---------------------------------------------------------------------------
# synthetic experiments


def _spec_values(args) -> dict[str, str]:
    values = read_kv(args.config) if args.config else {}
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return values


def cmd_synth(args) -> int:
    spec = PlantedTaskSpec.from_mapping(_spec_values(args))
    task = generate_planted_task(spec)
    paths = write_planted_task(task, args.out_dir)
    print(f"wrote planted task (seed={spec.seed}) to {args.out_dir}: {', '.join(sorted(p.name for p in paths.values()))}")
    return 0


def cmd_recover(args) -> int:
    spec = SyntheticSpec.from_mapping(_spec_values(args))
    rows = sample_complexity_sweep(spec, args.grid, args.repeats)
    atomic_write(args.out, format_sweep(rows))
    rates = success_rates(rows)
    for n, rate in rates.items():
        print(f"n={n}\tsuccess={rate:.2f}")
    lo, hi = min(rates), max(rates)
    verdict = "ok" if rates[hi] >= rates[lo] else "NOT monotone"
    print(f"trend: rate(n={hi})={rates[hi]:.2f} >= rate(n={lo})={rates[lo]:.2f}: {verdict}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default: from config, else 0)")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--config", default=None, help="flat key=value config file")
    common.add_argument("--special-ids", type=_int_list, default=None, help="comma-separated special token ids")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="wchamfer", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("idf", parents=[common], help="zero-shot IDF weights from a tokenized corpus")
    p.add_argument("corpus")
    p.add_argument("out")
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--special", choices=[p.value for p in SpecialPolicy], default="one")
    p.add_argument("--sample", type=float, default=1.0, help="fraction of documents to sample")
    p.set_defaults(func=cmd_idf)

    p = sub.add_parser("train", parents=[common], help="few-shot weight training with IDF-vs-learned selection")
    p.add_argument("config_file", nargs="?")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rerank", parents=[common], help="rerank candidates with weighted Chamfer")
    p.add_argument("--queries", required=True, help="query embedding store")
    p.add_argument("--docs", required=True, help="document embedding store")
    p.add_argument("--weights", required=True, help="weight file")
    p.add_argument("--candidates", default="bm25", help="'bm25' or a TREC run file of candidates")
    p.add_argument("--corpus", default=None, help="tokenized corpus for BM25 (default: doc store tokens)")
    p.add_argument("--qids", default=None, help="file whose first column lists the query ids to rerank")
    p.add_argument("--k", type=int, default=1000, help="candidates per query")
    p.add_argument("--tag", default="wchamfer")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("eval", parents=[common], help="Recall/MRR/nDCG of a run")
    p.add_argument("run")
    p.add_argument("qrels")
    p.add_argument("--k", type=_int_list, default=[10, 100])
    p.add_argument("--out", default=None, help="CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[common], help="write a planted-weight few-shot retrieval task")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("recover", parents=[common], help="weight-recovery sample-complexity sweep")
    p.add_argument("--grid", type=_int_list, default=[64, 128, 256, 512])
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_recover)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"wchamfer {args.command}: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except (OSError, UsageError) as exc:
        print(f"wchamfer {args.command}: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"wchamfer {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
