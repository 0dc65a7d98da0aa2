"""``uniret`` command line.

Subcommands: convert, validate, synth, train, encode, search, mine, eval,
bench-encode. Settings resolve as flags > ``--config`` file (flat
``key=value``) > built-in defaults. Before any work each subcommand writes
a reproducibility log with the effective config and input digests.

Exit codes: 0 ok, 2 usage, 3 data error, 4 IO error, 5 numeric error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .datastore import build_store, load_dataset, parse_dataset_arg, read_manifest
from .errors import DataError, UniretError, UsageError
from .evaluation import Run, evaluate, read_qrels, read_run, write_qrels, write_run
from .featurize import DEFAULT_WIDTH, Featurizer
from .index import batch_search, concat_indexes, encode_corpus, read_index, write_index
from .mine import MineConfig, mine
from .model import (
    DEFAULT_DIM,
    DEFAULT_TAU,
    TrainConfig,
    encode_matrix,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .records import convert_v1_to_v2, parse_corpus, parse_queries, parse_v1, validate, write_jsonl
from .synthetic import learnability_task, storage_scenario

logger = logging.getLogger("uniret")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# -- config / reproducibility ------------------------------------------------


def read_config(path: str | Path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment; keys may use dashes or underscores."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise UsageError(f"unknown config key {key!r} for this subcommand")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction) or action.nargs in ("+", "*"):
            items = [s.strip() for s in raw.split(";") if s.strip()]
            defaults[key] = [action.type(s) if action.type else s for s in items]
        else:
            try:
                defaults[key] = action.type(raw) if action.type else raw
            except (argparse.ArgumentTypeError, ValueError) as e:
                raise UsageError(f"config key {key!r}: {e}") from None
    sub.set_defaults(**defaults)


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_repro_log(args: argparse.Namespace, inputs: list, default_path: Path | None) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    entry = {
        "uniret_version": __version__,
        "command": args.command,
        "config": config,
        "inputs": {str(p): file_digest(p) for p in inputs if p is not None and Path(p).is_file()},
    }
    text = json.dumps(entry, indent=2, sort_keys=True, default=str) + "\n"
    path = Path(args.repro_log) if args.repro_log else default_path
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    logger.info("effective config: %s", json.dumps(config, sort_keys=True, default=str))
    return entry


def _sidecar(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".repro.json")


def _media_root(args, corpus_path: str) -> Path:
    return Path(args.media_root) if args.media_root else Path(corpus_path).parent


def _read_corpus(path: str):
    with open(path, encoding="utf-8") as fh:
        return parse_corpus(fh)


def _read_queries(path: str):
    with open(path, encoding="utf-8") as fh:
        return parse_queries(fh)


# -- subcommands -------------------------------------------------------------


def cmd_convert(args) -> int:
    out = Path(args.out_dir)
    write_repro_log(args, [args.input], out / "repro.json")
    with open(args.input, encoding="utf-8") as fh:
        v1 = parse_v1(fh)
    if not v1:
        raise DataError(f"{args.input}: no v1 records")
    queries, corpus, stats = convert_v1_to_v2(v1)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "queries.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        write_jsonl(queries, fh)
    with open(out / "corpus.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        write_jsonl(corpus, fh)
    d = stats.as_dict()
    (out / "stats.json").write_text(json.dumps(d, indent=2) + "\n", encoding="utf-8")
    print(f"queries: {d['n_queries']}  distinct passages: {d['distinct_passages']}  "
          f"occurrences: {d['passage_occurrences']}")
    print(f"duplication factor: {d['duplication_factor']:.4f}")
    print(f"v1 bytes: {d['v1_bytes']}  v1 passage bytes: {d['v1_passage_bytes']}")
    print(f"v2 corpus bytes: {d['v2_corpus_bytes']}  v2 query bytes: {d['v2_query_bytes']}")
    print(f"v1 passage / v2 corpus byte ratio: {d['passage_byte_ratio']:.3f}")
    return 0


def cmd_validate(args) -> int:
    write_repro_log(args, [args.queries, args.corpus], None)
    report = validate(_read_queries(args.queries), _read_corpus(args.corpus))
    print(report.summary())
    return 0 if report.ok else DataError.exit_code


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    write_repro_log(args, [], out / "repro.json")
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "storage":
        recs = storage_scenario(n_docs=args.n_docs, n_negatives=args.negatives, seed=args.seed)
        with open(out / "v1.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            write_jsonl(recs, fh)
        print(f"wrote {len(recs)} v1 records to {out / 'v1.jsonl'}")
    else:
        task = learnability_task(n_docs=args.n_docs, seed=args.seed)
        with open(out / "corpus.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            write_jsonl(task.corpus, fh)
        with open(out / "queries.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            write_jsonl(task.queries, fh)
        write_qrels(out / "qrels.txt", task.qrels)
        print(f"wrote {len(task.corpus)} documents and {len(task.queries)} queries to {out}")
    return 0


def _dataset_specs(args):
    specs = [parse_dataset_arg(d) for d in args.dataset or []]
    if args.manifest:
        specs.extend(read_manifest(args.manifest))
    if not specs:
        raise UsageError("train needs at least one --dataset or a --manifest")
    return specs


def cmd_train(args) -> int:
    specs = _dataset_specs(args)
    inputs = [args.manifest, args.init] + [p for s in specs for p in (s.queries, s.corpus)]
    write_repro_log(args, inputs, _sidecar(args.out))
    cfg = TrainConfig(
        batch_size=args.batch_size, negatives=args.negatives, epochs=args.epochs, lr=args.lr,
        seed=args.seed, dim=args.dim, width=args.width, tau=args.tau,
        mrl_dims=tuple(args.mrl_dims) if args.mrl_dims else tuple(d for d in (16, 32) if d < args.dim) + (args.dim,),
        mrl_weights=tuple(args.mrl_weights) if args.mrl_weights else None,
    )
    datasets = [load_dataset(s) for s in specs]
    params = load_checkpoint(args.init) if args.init else None
    log_fh = open(args.loss_log, "w", encoding="utf-8", newline="\n") if args.loss_log else None

    def on_step(entry):
        if log_fh is not None:
            log_fh.write(json.dumps(entry.as_dict(), sort_keys=True) + "\n")
        if entry.step % 10 == 0:
            logger.info("step %d [%s] loss %.5f", entry.step, entry.dataset, entry.loss_total)

    try:
        params, log = train(cfg, datasets, params, threads=args.threads, on_step=on_step)
    finally:
        if log_fh is not None:
            log_fh.close()
    save_checkpoint(args.out, params)
    if log:
        print(f"{len(log)} steps; first loss {log[0].loss_total:.5f}, last loss {log[-1].loss_total:.5f}")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_encode(args) -> int:
    write_repro_log(args, [args.checkpoint, args.corpus], _sidecar(args.out))
    params = load_checkpoint(args.checkpoint)
    store = build_store(_read_corpus(args.corpus), _media_root(args, args.corpus))
    index = encode_corpus(params, store, (args.shard, args.num_shards), args.batch_size, args.threads)
    write_index(args.out, index)
    print(f"encoded {index.count} documents (shard {args.shard}/{args.num_shards}) to {args.out}")
    return 0


def _encode_queries(params, queries, args):
    featurizer = Featurizer(params.width, build_store([], _media_root(args, args.queries)))
    return encode_matrix(params, featurizer.matrix(queries, args.threads))


def cmd_search(args) -> int:
    write_repro_log(args, [args.checkpoint, args.queries, *args.index], _sidecar(args.out))
    params = load_checkpoint(args.checkpoint)
    index = concat_indexes([read_index(p) for p in args.index])
    queries = _read_queries(args.queries)
    E = _encode_queries(params, queries, args) if queries else np.empty((0, params.dim))
    hits = batch_search(index, E, args.k, args.dim, partitions=args.partitions, threads=args.threads)
    write_run(args.out, Run.from_hits([q.query_id for q in queries], hits, args.tag))
    print(f"searched {len(queries)} queries (k={args.k}, dim={args.dim or index.dim}); run written to {args.out}")
    return 0


def cmd_mine(args) -> int:
    write_repro_log(args, [args.checkpoint, args.queries, *args.index], _sidecar(args.out))
    params = load_checkpoint(args.checkpoint)
    index = concat_indexes([read_index(p) for p in args.index])
    queries = _read_queries(args.queries)
    featurizer = Featurizer(params.width, build_store([], _media_root(args, args.queries)))
    cfg = MineConfig(top_n=args.top_n, m_out=args.negatives, seed=args.seed,
                     drop_unfindable=not args.keep_unfindable)
    mined, report = mine(params, queries, index, cfg, featurizer, args.threads)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        write_jsonl(mined, fh)
    if args.report:
        Path(args.report).write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(report.summary())
    return 0


def cmd_eval(args) -> int:
    write_repro_log(args, [args.run, args.qrels], _sidecar(args.out) if args.out else None)
    results = evaluate(read_run(args.run), read_qrels(args.qrels), args.metrics.split(","), args.gain)
    for r in results:
        print(f"{r.name:<12} {r.mean:.5f}  (queries: {len(r.per_query)}, excluded: {len(r.excluded)})")
    if args.out:
        Path(args.out).write_text(json.dumps([r.as_dict() for r in results], indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")
    return 0


def bench_encode(params, store, batch_sizes, thread_counts, repeats: int = 1) -> list[dict]:
    """Wall-clock encoding throughput for every (batch size, threads) cell; best of ``repeats``."""
    rows = []
    for bs in batch_sizes:
        for th in thread_counts:
            best = float("inf")
            for _ in range(repeats):
                store.clear_cache()
                t0 = time.perf_counter()
                encode_corpus(params, store, (0, 1), bs, th)
                best = min(best, time.perf_counter() - t0)
            rows.append({"batch_size": bs, "threads": th, "n_docs": len(store),
                         "seconds": best, "docs_per_sec": len(store) / best if best > 0 else float("inf")})
    return rows


def cmd_bench_encode(args) -> int:
    if not args.batch_sizes:
        raise UsageError("--batch-sizes must list at least one batch size")
    if not args.threads_list:
        raise UsageError("--threads-list must list at least one thread count")
    write_repro_log(args, [args.checkpoint, args.corpus], _sidecar(args.out) if args.out else None)
    params = load_checkpoint(args.checkpoint) if args.checkpoint else init_params(args.dim, args.width, args.seed)
    store = build_store(_read_corpus(args.corpus), _media_root(args, args.corpus))
    rows = bench_encode(params, store, args.batch_sizes, args.threads_list, args.repeats)
    print(f"{'batch':>6} {'threads':>7} {'docs':>7} {'seconds':>9} {'docs/sec':>10}")
    for r in rows:
        print(f"{r['batch_size']:>6} {r['threads']:>7} {r['n_docs']:>7} {r['seconds']:>9.4f} {r['docs_per_sec']:>10.1f}")
    if args.out:
        Path(args.out).write_text(json.dumps({"rows": rows}, indent=2) + "\n", encoding="utf-8")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="uniret", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value file; flags override it")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--media-root", help="directory media paths resolve against (default: next to the data file)")
    common.add_argument("--repro-log", help="where to write the reproducibility log (default: next to the output)")
    common.add_argument("-v", "--verbose", action="store_true")

    sp = parser.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, func, help_):
        p = sp.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("convert", cmd_convert, "convert materialized v1 training data to v2 queries + corpus")
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)

    p = add("validate", cmd_validate, "check query -> corpus references")
    p.add_argument("--queries", required=True)
    p.add_argument("--corpus", required=True)

    p = add("synth", cmd_synth, "write a synthetic dataset")
    p.add_argument("--kind", choices=["learnability", "storage"], default="learnability")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-docs", type=int, default=None)
    p.add_argument("--negatives", type=int, default=20, help="storage scenario: negatives per query")

    p = add("train", cmd_train, "train the embedding model")
    p.add_argument("--dataset", action="append", help="name=..,queries=..,corpus=..[,weight=..] (repeatable)")
    p.add_argument("--manifest", help="JSON list of {name, queries, corpus, weight}")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-log", help="JSON-lines loss log")
    p.add_argument("--init", help="start from this checkpoint instead of a seeded random init")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--negatives", type=int, default=3)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--dim", type=int, default=DEFAULT_DIM)
    p.add_argument("--width", type=int, default=DEFAULT_WIDTH)
    p.add_argument("--mrl-dims", type=_int_list, help="e.g. 16,32,64 (must end at --dim)")
    p.add_argument("--mrl-weights", type=_float_list)

    p = add("encode", cmd_encode, "encode a corpus (or one shard of it) into an index file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shard", type=int, default=0)
    p.add_argument("--num-shards", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=256)

    p = add("search", cmd_search, "exact top-k search; writes a TREC run")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True, nargs="+")
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--dim", type=int, default=None, help="search at this Matryoshka prefix")
    p.add_argument("--tag", default="uniret")
    p.add_argument("--partitions", type=int, default=1)

    p = add("mine", cmd_mine, "mine hard negatives and drop unfindable queries")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", required=True, nargs="+")
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="JSON report path")
    p.add_argument("--top-n", type=int, default=100)
    p.add_argument("--negatives", type=int, default=20)
    p.add_argument("--keep-unfindable", action="store_true")

    p = add("eval", cmd_eval, "nDCG@k / Recall@k of a run against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metrics", default="ndcg@10,recall@1")
    p.add_argument("--gain", choices=["linear", "exp"], default="linear")
    p.add_argument("--out", help="JSON results path")

    p = add("bench-encode", cmd_bench_encode, "encoding throughput table")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--dim", type=int, default=DEFAULT_DIM)
    p.add_argument("--width", type=int, default=DEFAULT_WIDTH)
    p.add_argument("--batch-sizes", type=_int_list, default=[1, 32])
    p.add_argument("--threads-list", type=_int_list, default=[1])
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out", help="JSON report path")
    return parser, subs


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        _apply_config(subs[args.command], read_config(args.config))
        args = parser.parse_args(argv)
    if args.command == "synth" and args.n_docs is None:
        args.n_docs = 100 if args.kind == "storage" else 500
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UniretError as e:
        print(f"uniret: error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"uniret: cannot read config: {e}", file=sys.stderr)
        return 4
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UniretError as e:
        print(f"uniret {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"uniret {args.command}: IO error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
