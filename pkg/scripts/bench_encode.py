"""Encoding throughput over batch sizes and thread counts on a synthetic corpus."""

import argparse
import logging

from uniret.cli import bench_encode
from uniret.datastore import build_store
from uniret.model import init_params
from uniret.synthetic import learnability_task


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-docs", type=int, default=2000)
    ap.add_argument("--batch-sizes", type=int, nargs="+", default=[1, 32, 256])
    ap.add_argument("--threads", type=int, nargs="+", default=[1, 2, 4])
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    store = build_store(learnability_task(n_docs=args.n_docs).corpus)
    params = init_params()
    for row in bench_encode(params, store, args.batch_sizes, args.threads, args.repeats):
        print(f"batch {row['batch_size']:>4} threads {row['threads']:>2}: {row['docs_per_sec']:>10.0f} docs/s")


if __name__ == "__main__":
    main()
