"""Running perplexity along a long held-out document for full, SWA, CT and AHN mixers.

Uses a distilled checkpoint (``--checkpoint``) or, failing that, the cached base
with its untrained AHN branch.
"""
import argparse
import os

import numpy as np
from _common import add_common, setup, write_csv

from ahnlab.analysis import ppl_curve
from ahnlab.attention import MixerMode
from ahnlab.checkpoint import load_checkpoint
from ahnlab.experiments import pretrain_base


def main():
    parser = add_common(argparse.ArgumentParser(description=__doc__), "results")
    parser.add_argument("--checkpoint", default=None)
    parser.add_argument("--length", type=int, default=2048)
    parser.add_argument("--window", type=int, default=64)
    parser.add_argument("--sinks", type=int, default=4)
    parser.add_argument("--stride", type=int, default=128)
    args = parser.parse_args()
    corpus = setup(args)
    model = load_checkpoint(args.checkpoint) if args.checkpoint else pretrain_base(corpus)
    text = corpus.eval_set(1, args.length, seed=7)[0].astype(np.int64)
    rows = []
    for mode in MixerMode:
        rows += ppl_curve(model, text, mode, args.stride, sinks=args.sinks, window=args.window)
        print(mode.value, f"final ppl {rows[-1]['running_ppl']:.4f}", flush=True)
    write_csv(os.path.join(args.out_dir, "ppl_curve.csv"), rows)


if __name__ == "__main__":
    main()
