"""Baseline vs trained retrieval on the synthetic task, with and without MRL.

Prints one row per (seed, training dims) with Recall@1 and nDCG@10 at each
truncation dim.
"""

import argparse
import json
import logging

from uniret.experiments import run_learnability
from uniret.synthetic import learnability_task


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=1)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--n-docs", type=int, default=500)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--json", help="also write all results here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    rows = []
    header = f"{'seed':>4} {'train dims':>12} {'d':>3} {'R@1 base':>9} {'R@1':>7} {'nDCG@10':>8}"
    print(header)
    for seed in args.seeds:
        task = learnability_task(n_docs=args.n_docs, seed=seed)
        for dims in ((16, 32, 64), (64,)):
            res = run_learnability(seed, dims, epochs=args.epochs, batch_size=args.batch_size,
                                   threads=args.threads, task=task)
            for d in (16, 32, 64):
                row = {"seed": seed, "train_dims": list(dims), "d": d,
                       "recall1_baseline": res.baseline.recall_at_1[d],
                       "recall1": res.trained.recall_at_1[d], "ndcg10": res.trained.ndcg_at_10[d]}
                rows.append(row)
                print(f"{seed:>4} {','.join(map(str, dims)):>12} {d:>3} {row['recall1_baseline']:>9.3f} "
                      f"{row['recall1']:>7.3f} {row['ndcg10']:>8.4f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
