"""Pretrain (or fetch from cache) the frozen byte-level teacher used by every distillation run."""
import argparse

from _common import add_common, setup

from ahnlab.distill import format_step
from ahnlab.experiments import PretrainConfig, pretrain_base


def main():
    parser = add_common(argparse.ArgumentParser(description=__doc__), "results")
    parser.add_argument("--steps", type=int, default=PretrainConfig.steps)
    parser.add_argument("--lr", type=float, default=PretrainConfig.lr)
    args = parser.parse_args()
    corpus = setup(args)
    cfg = PretrainConfig(steps=args.steps, lr=args.lr)
    model = pretrain_base(corpus, cfg=cfg, on_step=lambda m: m.step % 100 == 0 and print(format_step(m), flush=True))
    total = sum(t.data.size for t in model.params.values())
    print(f"base ready: {total} parameters ({model.ahn_parameter_count()} in the AHN branch)")


if __name__ == "__main__":
    main()
