"""Equal-step ablations: random vs fixed training window, and KL vs CE objective.

Each arm distills a fresh copy of the cached base for the same number of steps,
then held-out KL is measured over a window sweep that includes sizes never seen
in training. Writes ablation.csv (arm, window, kl, ppl).
"""
import argparse
import os

from _common import add_common, setup, write_csv

from ahnlab.distill import DistillConfig, Fixed, RandomRange
from ahnlab.experiments import distill, pretrain_base

ARMS = {
    "random_kl": dict(window_sampler=RandomRange(32, 96)),
    "fixed_kl": dict(window_sampler=Fixed(64)),
    "random_ce": dict(window_sampler=RandomRange(32, 96), objective="ce"),
}


def main():
    parser = add_common(argparse.ArgumentParser(description=__doc__), "results/ablation")
    parser.add_argument("--steps", type=int, default=400)
    parser.add_argument("--lr", type=float, default=3e-3)
    parser.add_argument("--windows", default="16,24,32,64,96,112,128")
    parser.add_argument("--eval-sequences", type=int, default=32)
    args = parser.parse_args()
    corpus = setup(args)
    windows = [int(w) for w in args.windows.split(",")]
    base = pretrain_base(corpus)
    seqs = corpus.eval_set(args.eval_sequences, 257, seed=1)
    rows = []
    for arm, kw in ARMS.items():
        res = distill(base, corpus, DistillConfig(lr=args.lr, steps=args.steps, **kw), seqs, windows)
        for r in res.curve:
            if r["step"] == args.steps:
                rows.append({"arm": arm, "window": r["window"], "kl": r["kl"], "ppl": r["ppl"]})
                print(arm, r["window"], f"{r['kl']:.5f}", flush=True)
    write_csv(os.path.join(args.out_dir, "ablation.csv"), rows)


if __name__ == "__main__":
    main()
