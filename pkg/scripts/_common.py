"""Shared helpers for the experiment scripts."""
import csv
import json
import logging
import os

from ahnlab.corpus import Corpus, stdlib_root


def setup(args):
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    os.makedirs(args.out_dir, exist_ok=True)
    return Corpus.from_path(args.corpus or stdlib_root())


def add_common(parser, out_dir):
    parser.add_argument("--corpus", default=None, help="corpus root (default: the stdlib sources)")
    parser.add_argument("--out-dir", default=out_dir)
    return parser


def write_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {path}")


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    print(f"wrote {path}")
