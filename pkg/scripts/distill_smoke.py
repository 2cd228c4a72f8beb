"""Distill AHN parameters from the cached base and log held-out KL/perplexity per eval window.

Writes curve.csv (step, window, kl, ppl) and baselines.csv (SWA vs AHN after training).
"""
import argparse
import os

from _common import add_common, setup, write_csv

from ahnlab.distill import DistillConfig, format_step, parse_sampler
from ahnlab.experiments import distill, pretrain_base, window_baselines


def main():
    parser = add_common(argparse.ArgumentParser(description=__doc__), "results/distill")
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--lr", type=float, default=3e-3)
    parser.add_argument("--window", default="32:96", help="training window size, N or LO:HI")
    parser.add_argument("--objective", choices=("kl", "ce"), default="kl")
    parser.add_argument("--eval-windows", default="32,64,96")
    parser.add_argument("--eval-sequences", type=int, default=32)
    parser.add_argument("--eval-every", type=int, default=250)
    args = parser.parse_args()
    corpus = setup(args)
    windows = [int(w) for w in args.eval_windows.split(",")]
    base = pretrain_base(corpus)
    cfg = DistillConfig(lr=args.lr, steps=args.steps, window_sampler=parse_sampler(args.window),
                        objective=args.objective)
    seqs = corpus.eval_set(args.eval_sequences, 257, seed=1)
    res = distill(base, corpus, cfg, seqs, windows, eval_every=args.eval_every,
                  on_step=lambda m: m.step % 100 == 0 and print(format_step(m), flush=True))
    write_csv(os.path.join(args.out_dir, "curve.csv"), res.curve)
    write_csv(os.path.join(args.out_dir, "baselines.csv"), window_baselines(res.model, seqs, windows))
    print(f"{res.seconds:.0f}s")


if __name__ == "__main__":
    main()
