"""ahnlab command line: train, eval, bench, probe.

Exit codes:
    0  success
    2  invalid configuration or arguments
    3  corpus or input file missing
    4  non-finite loss (diagnostics written to <out-dir>/nonfinite.json)
    5  checkpoint does not match the configured model
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields

import numpy as np

from .analysis import PRESETS, ComplexitySpec, grad_probe, ratio_table
from .attention import MixerMode
from .checkpoint import (ArrayRecord, CheckpointError, atomic_write_bytes, load_arrays, load_checkpoint,
                         load_into, save_arrays, save_checkpoint)
from .corpus import BOS, Corpus, CorpusError, stdlib_root
from .distill import (DistillConfig, NonFiniteLoss, Trainer, evaluate, evaluate_distill, format_step,
                      parse_sampler)
from .model import Model, ModelConfig, parse_kv

log = logging.getLogger("ahnlab")

EXIT_OK, EXIT_CONFIG, EXIT_CORPUS, EXIT_NONFINITE, EXIT_MISMATCH = 0, 2, 3, 4, 5

TRAIN_DEFAULTS = {
    "stage": "ahn",
    "corpus": "stdlib",
    "base_checkpoint": "",
    "objective": "kl",
    "window": "32:96",
    "sinks": "4",
    "lr": "1e-4",
    "warmup_frac": "0.1",
    "weight_decay": "0.01",
    "grad_clip": "1.0",
    "batch_size": "4",
    "seq_len": "256",
    "epochs": "1",
    "steps": "",
    "seed": "0",
    "checkpoint_every": "100",
    "stop_after": "",
    "eval_windows": "32,64,96",
    "eval_sequences": "8",
}


class ConfigError(ValueError):
    pass


def read_config(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_kv(fh.read())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(defaults: dict, file_values: dict, overrides: dict) -> dict[str, str]:
    model_keys = {f.name for f in fields(ModelConfig)}
    known = set(defaults) | model_keys
    merged = dict(defaults)
    for source in (file_values, overrides):
        for k, v in source.items():
            if k not in known:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = v
    return merged


def model_config(values: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict({k: v for k, v in values.items() if k in {f.name for f in fields(ModelConfig)}})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid model config: {exc}") from None


def distill_config(values: dict) -> DistillConfig:
    try:
        return DistillConfig(
            objective=values["objective"],
            window_sampler=parse_sampler(values["window"]),
            sink_sampler=parse_sampler(values["sinks"]),
            lr=float(values["lr"]),
            warmup_frac=float(values["warmup_frac"]),
            weight_decay=float(values["weight_decay"]),
            grad_clip=float(values["grad_clip"]),
            batch_size=int(values["batch_size"]),
            seq_len=int(values["seq_len"]),
            epochs=int(values["epochs"]),
            steps=int(values["steps"]) if values["steps"] else None,
            seed=int(values["seed"]),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid training config: {exc}") from None


def load_corpus(spec: str) -> Corpus:
    root = stdlib_root() if spec in ("", "stdlib") else spec
    if not os.path.exists(root):
        raise CorpusError(f"corpus path {root} does not exist")
    corpus = Corpus.from_path(root)
    corpus.check_disjoint()
    return corpus


def write_text(path: str, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", default="runs/latest")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ahnlab", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="pretrain a base model or distill AHN parameters")
    _common(t)
    t.add_argument("--objective", choices=["kl", "ce"])
    t.add_argument("--stage", choices=["base", "ahn"])
    t.add_argument("--steps", type=int)
    t.add_argument("overrides", nargs="*", help="key=value overrides")

    e = sub.add_parser("eval", help="held-out KL/perplexity per mixer mode and window")
    _common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", default="stdlib")
    e.add_argument("--modes", default="full,swa,ahn")
    e.add_argument("--windows", default="16,32,64")
    e.add_argument("--sinks", type=int, default=4)
    e.add_argument("--seq-len", type=int, default=256)
    e.add_argument("--sequences", type=int, default=8)

    b = sub.add_parser("bench", help="parameter/FLOP/cache accounting for each token mixer")
    _common(b)
    b.add_argument("--preset", default="qwen3b", choices=sorted(PRESETS) + ["custom"])
    b.add_argument("--L", type=int)
    b.add_argument("--W", type=int)
    b.add_argument("--D", type=int)
    b.add_argument("--H", type=int)
    b.add_argument("--nq", type=int)
    b.add_argument("--nkv", type=int)
    b.add_argument("--layers", type=int)
    b.add_argument("--base-params", type=int)
    b.add_argument("--variant", default="gdn", choices=["gdn", "dn", "mamba2"])
    b.add_argument("--omit-gray", action="store_true", help="drop the negligible AHN terms")

    pr = sub.add_parser("probe", help="gradient magnitudes of out-of-window tokens")
    _common(pr)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("input_file")
    pr.add_argument("--sinks", type=int, default=4)
    pr.add_argument("--window", type=int, default=64)
    pr.add_argument("--max-bytes", type=int, default=512)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    handler = {"train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "probe": cmd_probe}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORPUS
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


def cmd_train(args) -> int:
    overrides = parse_overrides(args.overrides)
    for key in ("objective", "stage", "steps", "seed"):
        if getattr(args, key, None) is not None:
            overrides[key] = str(getattr(args, key))
    values = resolve(TRAIN_DEFAULTS, read_config(args.config), overrides)
    # in train, window/sinks name the per-batch samplers rather than the model's runtime defaults
    mcfg = model_config({k: v for k, v in values.items() if k not in ("window", "sinks")})
    dcfg = distill_config(values)
    stage = values["stage"]
    if stage not in ("base", "ahn"):
        raise ConfigError(f"stage must be base or ahn, got {stage!r}")
    out = args.out_dir
    os.makedirs(out, exist_ok=True)
    write_text(os.path.join(out, "resolved_config.txt"), "".join(f"{k}={v}\n" for k, v in sorted(values.items())))
    corpus = load_corpus(values["corpus"])

    model_path = os.path.join(out, "model.ckpt")
    state_path = os.path.join(out, "trainer_state.ckpt")
    model = Model(mcfg)
    if stage == "ahn" and values["base_checkpoint"]:
        base = load_arrays(values["base_checkpoint"])
        if base.config_hash != mcfg.arch_hash():
            raise CheckpointError("base checkpoint does not match the configured model")
        for name, rec in base.arrays.items():
            if not rec.ahn:
                model.params[name].data = rec.array.astype(model.params[name].dtype)
    total = dcfg.total_steps(corpus.train.size)
    trainer = Trainer(model, dcfg, total, stage=stage)
    log_path = os.path.join(out, "train_log.tsv")
    log_lines: list[str] = []
    if os.path.exists(state_path) and os.path.exists(model_path):
        load_into(model, model_path)
        state = load_arrays(state_path)
        meta = parse_kv(state.config_text)
        trainer.opt.load_state({n: r.array for n, r in state.arrays.items()}, int(meta["opt_t"]))
        trainer.step = int(meta["step"])
        if os.path.exists(log_path):
            with open(log_path, encoding="utf-8") as fh:
                log_lines = [ln for ln in fh.read().splitlines()[1:] if int(ln.split("\t")[0]) < trainer.step]
        print(f"resuming from step {trainer.step}", file=sys.stderr)

    every = max(1, int(values["checkpoint_every"]))

    def persist():
        save_checkpoint(model, model_path)
        meta = f"step={trainer.step}\nopt_t={trainer.opt.t}\nstage={stage}\n"
        records = [ArrayRecord(n, a) for n, a in trainer.opt.state_arrays().items()]
        save_arrays(state_path, meta, mcfg.arch_hash(), records)
        write_text(log_path, "step\tloss\tlr\twindow\tsinks\tgrad_norm\n" + "".join(l + "\n" for l in log_lines))

    def on_step(m):
        log_lines.append(format_step(m))
        log.info(log_lines[-1])
        if trainer.step % every == 0:
            persist()

    start = time.perf_counter()
    # stop_after ends this invocation early (the schedule still spans all steps); rerun to resume
    budget = max(0, int(values["stop_after"]) - trainer.step) if values["stop_after"] else None
    try:
        trainer.run(corpus, steps=budget, on_step=on_step)
    except NonFiniteLoss as exc:
        write_text(os.path.join(out, "nonfinite.json"), json.dumps(exc.diagnostics, indent=2, sort_keys=True))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    persist()
    log.info("trained %d steps in %.1fs", trainer.step, time.perf_counter() - start)
    if trainer.step < total:
        print(model_path)
        return EXIT_OK

    windows = [int(w) for w in values["eval_windows"].split(",") if w]
    seqs = corpus.eval_set(int(values["eval_sequences"]), dcfg.seq_len + 1, seed=dcfg.seed + 1)
    sinks = dcfg.sink_sampler.sample(np.random.default_rng(0))
    if stage == "base":
        rows = [evaluate(model, seqs, MixerMode.FULL, dcfg.seq_len, 0)]
    else:
        rows = evaluate_distill(model, seqs, windows, sinks)
    write_text(os.path.join(out, "metrics.csv"), rows_to_csv([asdict(r) for r in rows]))
    print(os.path.join(out, "metrics.csv"))
    return EXIT_OK


def cmd_eval(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
    model = load_checkpoint(args.checkpoint)
    if args.config:
        expected = model_config(read_config(args.config))
        if expected.arch_hash() != model.cfg.arch_hash():
            raise CheckpointError("checkpoint config hash does not match --config")
    try:
        modes = [MixerMode.parse(m) for m in args.modes.split(",") if m]
        windows = [int(w) for w in args.windows.split(",") if w]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    corpus = load_corpus(args.corpus)
    seed = 1 if args.seed is None else args.seed
    seqs = corpus.eval_set(args.sequences, args.seq_len + 1, seed=seed)
    rows = []
    if MixerMode.FULL in modes:
        rows.append(asdict(evaluate(model, seqs, MixerMode.FULL, args.seq_len, 0)))
    for mode in modes:
        if mode is MixerMode.FULL:
            continue
        rows.extend(asdict(r) for r in evaluate_distill(model, seqs, windows, args.sinks, mode))
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "eval.csv")
    write_text(path, rows_to_csv(rows))
    print(path)
    return EXIT_OK


def cmd_bench(args) -> int:
    base = PRESETS.get(args.preset)
    if base is None:
        missing = [k for k in ("L", "W", "D", "H", "nq", "nkv") if getattr(args, k) is None]
        if missing:
            raise ConfigError(f"custom preset needs --{' --'.join(missing)}")
        base = ComplexitySpec(args.L, args.W, args.D, args.H, args.nq, args.nkv, args.layers or 1,
                              args.base_params or 0)
    try:
        spec = ComplexitySpec(
            L=args.L or base.L, W=args.W or base.W, D=args.D or base.D, H=args.H or base.H,
            n_q=args.nq or base.n_q, n_kv=args.nkv or base.n_kv, n_layers=args.layers or base.n_layers,
            base_param_count=args.base_params or base.base_param_count)
        table = ratio_table(spec, args.variant, include_gray=not args.omit_gray)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rows = [{"mixer": r.mixer, "params_extra": r.absolute.params_extra,
             "extra_param_ratio_pct": round(100 * r.extra_param_ratio, 4),
             "flops_mixing": r.absolute.flops_mixing, "flop_ratio_pct": round(100 * r.flop_ratio, 4),
             "memory_cache": r.absolute.memory_cache, "cache_ratio_pct": round(100 * r.cache_ratio, 4)}
            for r in table]
    text = rows_to_csv(rows)
    sys.stdout.write(text)
    if args.out_dir and args.out_dir != "runs/latest":
        os.makedirs(args.out_dir, exist_ok=True)
        write_text(os.path.join(args.out_dir, "bench.csv"), text)
    return EXIT_OK


def cmd_probe(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
    if not os.path.exists(args.input_file):
        raise FileNotFoundError(f"input file {args.input_file} not found")
    model = load_checkpoint(args.checkpoint)
    with open(args.input_file, "rb") as fh:
        data = np.frombuffer(fh.read()[: args.max_bytes], dtype=np.uint8).astype(np.int64)
    data = np.concatenate([[BOS], data])
    try:
        report = grad_probe(model, data, args.sinks, args.window)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "probe.csv")
    write_text(path, rows_to_csv(report.rows()))
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
