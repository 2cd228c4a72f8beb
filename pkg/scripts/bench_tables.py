"""Efficiency tables (extra params, mixing FLOPs, cache) for the 3B/7B/14B presets and all AHN variants."""
import argparse
import os

from _common import write_csv

from ahnlab.analysis import PRESETS, ratio_table


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="results")
    parser.add_argument("--omit-gray", action="store_true", help="drop the small gate/readout terms")
    args = parser.parse_args()
    os.makedirs(args.out_dir, exist_ok=True)
    rows = []
    for preset, spec in PRESETS.items():
        for variant in ("gdn", "dn", "mamba2"):
            for r in ratio_table(spec, variant, include_gray=not args.omit_gray):
                if r.mixer == "ahn" or variant == "gdn":
                    name = f"ahn-{variant}" if r.mixer == "ahn" else r.mixer
                    rows.append({"preset": preset, "mixer": name,
                                 "extra_param_pct": round(100 * r.extra_param_ratio, 2),
                                 "flop_pct": round(100 * r.flop_ratio, 2),
                                 "cache_pct": round(100 * r.cache_ratio, 2)})
    for row in rows:
        print("{preset:8s} {mixer:11s} params {extra_param_pct:5.2f}%  flops {flop_pct:6.2f}%  "
              "cache {cache_pct:6.2f}%".format(**row))
    write_csv(os.path.join(args.out_dir, "bench_tables.csv"), rows)


if __name__ == "__main__":
    main()
