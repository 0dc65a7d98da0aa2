"""Materialized vs decoupled storage on the 100 x (1+20) scenario."""

import argparse
import json
import logging

from uniret.records import convert_v1_to_v2
from uniret.synthetic import storage_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-docs", type=int, default=100)
    ap.add_argument("--negatives", type=int, default=20)
    ap.add_argument("--doc-len", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    v1 = storage_scenario(args.n_docs, args.negatives, args.doc_len, args.seed)
    _, _, stats = convert_v1_to_v2(v1)
    print(json.dumps(stats.as_dict(), indent=2))


if __name__ == "__main__":
    main()
