import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ahnlab.corpus import BOS, Corpus, CorpusError, _split_for, discover, stdlib_root


@pytest.fixture
def tree(tmp_path):
    for i in range(12):
        (tmp_path / f"doc{i}.txt").write_bytes(bytes([97 + i % 26]) * (300 + i))
    (tmp_path / "tiny.txt").write_bytes(b"short")
    (tmp_path / "image.png").write_bytes(b"\x89PNG" * 200)
    return tmp_path


def test_discover_filters_suffix_and_size(tree):
    shards = discover(tree)
    names = sorted(s.path.rsplit("/", 1)[-1] for s in shards)
    assert names == sorted(f"doc{i}.txt" for i in range(12))
    assert {s.split for s in shards} <= {"train", "heldout"}
    assert all(s.length == len(open(s.path, "rb").read()) for s in shards)


def test_missing_root_and_empty_tree(tmp_path):
    with pytest.raises(CorpusError):
        discover(tmp_path / "nope")
    with pytest.raises(CorpusError):
        discover(tmp_path)


def test_split_is_a_pure_function_of_the_relative_path():
    assert _split_for("a/b.py", 2) == _split_for("a/b.py", 2)
    assert _split_for("a/b.py", 1) == "heldout"
    counts = [_split_for(f"f{i}.py", 2) for i in range(2000)]
    assert 0.45 < counts.count("heldout") / 2000 < 0.55


def test_duplicate_content_never_reaches_train(tmp_path):
    body = b"identical payload " * 40
    for i in range(40):
        (tmp_path / f"copy{i}.txt").write_bytes(body)
    corpus = Corpus.from_path(tmp_path)
    n_heldout = sum(sh.split == "heldout" for sh in corpus.shards)
    assert 0 < n_heldout < 40
    assert corpus.train.size == 0
    assert corpus.heldout.size == n_heldout * len(body)
    corpus.check_disjoint()


def test_batch_opens_with_bos(tree):
    corpus = Corpus.from_path(tree)
    split = "train" if corpus.train.size else "heldout"
    rows = corpus.batch(split, 3, 17, np.random.default_rng(0))
    assert rows.shape == (3, 17) and rows.dtype == np.int64
    assert np.all(rows[:, 0] == BOS)
    assert rows[:, 1:].max() < 256
    raw = Corpus.from_path(tree, bos=False).batch(split, 3, 17, np.random.default_rng(0))
    assert raw.shape == (3, 17) and raw.max() < 256


@given(st.integers(2, 64), st.integers(0, 2**31))
def test_batch_rows_are_contiguous_slices(length, seed):
    data = np.arange(200, dtype=np.uint8)
    corpus = Corpus([], bos=True)
    corpus.train = data
    rows = corpus.batch("train", 4, length, np.random.default_rng(seed))
    body = rows[:, 1:]
    assert np.all(np.diff(body, axis=1) == 1)
    assert np.all(body[:, 0] < 200 - (length - 1) + 1)


def test_batch_errors(tree):
    corpus = Corpus.from_path(tree)
    with pytest.raises(CorpusError):
        corpus.batch("heldout", 1, 10**6, np.random.default_rng(0))
    empty = Corpus([])
    with pytest.raises(CorpusError):
        empty.batch("train", 1, 4, np.random.default_rng(0))


def test_eval_set_is_deterministic(tree):
    corpus = Corpus.from_path(tree)
    np.testing.assert_array_equal(corpus.eval_set(4, 33, seed=5), corpus.eval_set(4, 33, seed=5))


def test_stdlib_corpus_is_large_enough():
    corpus = Corpus.from_path(stdlib_root())
    assert corpus.train.size >= 5_000_000 and corpus.heldout.size >= 5_000_000
    corpus.check_disjoint()
