import csv
import json
import os

import numpy as np
import pytest

from ahnlab import cli
from ahnlab.checkpoint import load_checkpoint, save_checkpoint
from ahnlab.model import Model, ModelConfig

TOY = ["d_model=16", "n_layers=1", "n_q_heads=4", "n_kv_heads=2", "head_dim=4", "dtype=float64",
       "seq_len=24", "batch_size=2", "window=4:8", "sinks=2", "lr=1e-2", "eval_windows=4,8",
       "eval_sequences=2", "checkpoint_every=2"]


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    rng = np.random.default_rng(0)
    words = [b"alpha", b"beta", b"gamma", b"delta", b"def", b"return", b"self", b"\n"]
    for i in range(24):
        text = b" ".join(words[j] for j in rng.integers(0, len(words), 200))
        (root / f"doc{i:02d}.txt").write_bytes(text)
    return str(root)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def train(out, corpus_dir, *extra):
    return cli.main(["train", "--out-dir", str(out), "--steps", "4", *TOY, f"corpus={corpus_dir}", *extra])


def test_train_writes_artifacts(tmp_path, corpus_dir, capsys):
    assert train(tmp_path, corpus_dir) == 0
    for name in ("resolved_config.txt", "train_log.tsv", "model.ckpt", "trainer_state.ckpt", "metrics.csv"):
        assert (tmp_path / name).exists(), name
    assert capsys.readouterr().out.strip() == str(tmp_path / "metrics.csv")
    log = (tmp_path / "train_log.tsv").read_text().splitlines()
    assert log[0].split("\t") == ["step", "loss", "lr", "window", "sinks", "grad_norm"]
    assert [int(line.split("\t")[0]) for line in log[1:]] == [0, 1, 2, 3]
    assert all(4 <= int(line.split("\t")[3]) <= 8 for line in log[1:])
    rows = read_csv(tmp_path / "metrics.csv")
    assert [r["window"] for r in rows] == ["4", "8"]
    assert "objective=kl" in (tmp_path / "resolved_config.txt").read_text()


def test_train_is_byte_reproducible_and_resumable(tmp_path, corpus_dir):
    a, b = tmp_path / "a", tmp_path / "b"
    assert train(a, corpus_dir) == 0
    assert train(b, corpus_dir, "stop_after=2") == 0
    assert len((b / "train_log.tsv").read_text().splitlines()) == 3
    assert train(b, corpus_dir) == 0
    for name in ("train_log.tsv", "model.ckpt", "metrics.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_objective_flag_switches_loss(tmp_path, corpus_dir):
    assert train(tmp_path, corpus_dir, "--objective", "ce") == 0
    assert "objective=ce" in (tmp_path / "resolved_config.txt").read_text()
    first_loss = float((tmp_path / "train_log.tsv").read_text().splitlines()[1].split("\t")[1])
    assert first_loss > 2.0  # next-byte cross-entropy, not a small KL


def test_base_stage_then_distill_from_it(tmp_path, corpus_dir):
    assert train(tmp_path / "base", corpus_dir, "--stage", "base") == 0
    ckpt = tmp_path / "base" / "model.ckpt"
    assert train(tmp_path / "ahn", corpus_dir, f"base_checkpoint={ckpt}") == 0
    base, student = load_checkpoint(str(ckpt)), load_checkpoint(str(tmp_path / "ahn" / "model.ckpt"))
    for name in base.base_names():
        assert np.array_equal(base.params[name].data, student.params[name].data)


def test_train_exit_codes(tmp_path, corpus_dir, capsys):
    assert train(tmp_path, corpus_dir, "no_such_key=1") == 2
    assert train(tmp_path, corpus_dir, "d_model=15") == 2
    assert train(tmp_path, corpus_dir, "lr=-1") == 2
    assert train(tmp_path, str(tmp_path / "missing")) == 3
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("this line has no equals sign\n")
    assert cli.main(["train", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2
    assert capsys.readouterr().out == ""


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning", "ignore:invalid value:RuntimeWarning")
def test_non_finite_loss_exit_code(tmp_path, corpus_dir):
    assert train(tmp_path, corpus_dir, "lr=1e300", "grad_clip=0") == 4
    dump = json.loads((tmp_path / "nonfinite.json").read_text())
    assert "param_norms" in dump


def test_config_file_with_flag_overrides(tmp_path, corpus_dir):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# toy run\n" + "\n".join(TOY) + f"\ncorpus={corpus_dir}\nseed=3\n")
    out = tmp_path / "out"
    assert cli.main(["train", "--config", str(cfg), "--seed", "5", "--steps", "2", "--out-dir", str(out)]) == 0
    resolved = (out / "resolved_config.txt").read_text()
    assert "seed=5" in resolved and "steps=2" in resolved


def test_eval_and_hash_mismatch(tmp_path, corpus_dir, capsys):
    model = Model(ModelConfig(d_model=16, n_layers=1, n_q_heads=4, n_kv_heads=2, head_dim=4))
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(model, str(ckpt))
    args = ["eval", "--checkpoint", str(ckpt), "--corpus", corpus_dir, "--windows", "4,8,16",
            "--modes", "full,ahn", "--seq-len", "24", "--sequences", "2", "--sinks", "2", "--out-dir", str(tmp_path)]
    assert cli.main(args) == 0
    rows = read_csv(tmp_path / "eval.csv")
    assert [(r["mode"], r["window"]) for r in rows] == [("full", "24"), ("ahn", "4"), ("ahn", "8"), ("ahn", "16")]
    kls = [float(r["kl"]) for r in rows[1:]]
    assert kls[0] >= kls[1] >= kls[2] >= 0
    other = tmp_path / "other.cfg"
    other.write_text("d_model=16\nn_layers=2\nn_q_heads=4\nn_kv_heads=2\nhead_dim=4\n")
    assert cli.main(args + ["--config", str(other)]) == 5
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt")]) == 3
    capsys.readouterr()


def test_bench_preset_and_custom(capsys, tmp_path):
    assert cli.main(["bench", "--preset", "qwen3b"]) == 0
    rows = {r["mixer"]: r for r in csv.DictReader(capsys.readouterr().out.splitlines())}
    assert round(float(rows["swa"]["flop_ratio_pct"]), 1) == 46.6
    assert round(float(rows["ahn"]["flop_ratio_pct"]), 1) == 46.7
    assert round(float(rows["ahn"]["cache_ratio_pct"]), 1) == 26.0
    assert cli.main(["bench", "--preset", "custom", "--L", "64", "--W", "64", "--D", "16", "--H", "4",
                     "--nq", "4", "--nkv", "2", "--out-dir", str(tmp_path)]) == 0
    rows = {r["mixer"]: r for r in csv.DictReader(capsys.readouterr().out.splitlines())}
    assert float(rows["swa"]["flop_ratio_pct"]) == 100.0 and float(rows["swa"]["cache_ratio_pct"]) == 100.0
    assert (tmp_path / "bench.csv").exists()
    assert cli.main(["bench", "--preset", "custom", "--L", "64"]) == 2
    assert cli.main(["bench", "--preset", "qwen3b", "--W", "200000"]) == 2
    assert cli.main(["bench", "--preset", "qwen3b", "--omit-gray"]) == 0
    rows = {r["mixer"]: r for r in csv.DictReader(capsys.readouterr().out.splitlines())}
    assert rows["ahn"]["flop_ratio_pct"] == rows["swa"]["flop_ratio_pct"]


def test_probe_command(tmp_path, capsys):
    model = Model(ModelConfig(d_model=16, n_layers=1, n_q_heads=4, n_kv_heads=2, head_dim=4, dtype="float64"))
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(model, str(ckpt))
    text = tmp_path / "in.txt"
    text.write_bytes(b"the quick brown fox jumps over the lazy dog")
    args = ["probe", "--checkpoint", str(ckpt), str(text), "--sinks", "2", "--window", "8",
            "--out-dir", str(tmp_path)]
    assert cli.main(args) == 0
    assert capsys.readouterr().out.strip() == str(tmp_path / "probe.csv")
    rows = read_csv(tmp_path / "probe.csv")
    # BOS occupies position 0, so the 43 bytes fill positions 1..43
    assert [int(r["position"]) for r in rows] == list(range(2, 44 - 8))
    assert int(rows[0]["token"]) == ord("h")
    assert list(rows[0]) == ["position", "token", "magnitude", "normalized", "quantile"]
    assert cli.main(args[:-4] + ["--sinks", "2", "--window", "60"]) == 2
    assert cli.main(["probe", "--checkpoint", str(ckpt), str(tmp_path / "missing.txt")]) == 3
    assert os.path.exists(tmp_path / "probe.csv")
