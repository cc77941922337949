import numpy as np
import pytest

from data import (
    BYTE_PAD,
    BYTE_VOCAB,
    PAD,
    SEP,
    BatchStream,
    default_k,
    gen_selective_copy,
    label_selective_copy,
    load_text_corpus,
)
from errors import DataError


# -----------------------
# selective copy
# -----------------------
def test_selective_copy_layout():
    stream = gen_selective_copy(seed=3, T=32, vocab=10, n_sequences=20)
    k = default_k(32)
    assert stream.k == k == 2
    sep = 32 - k - 1
    for x, y in zip(stream.inputs, stream.targets):
        assert x[sep] == SEP
        assert np.all(x[sep + 1:] == PAD)
        marked = x[:sep][x[:sep] >= 2]
        assert marked.shape[0] == k
        np.testing.assert_array_equal(y[sep:sep + k], marked)
        assert np.all(y[:sep] == PAD)


def test_selective_copy_is_seeded():
    a = gen_selective_copy(seed=5, T=16, vocab=8, n_sequences=4)
    b = gen_selective_copy(seed=5, T=16, vocab=8, n_sequences=4)
    c = gen_selective_copy(seed=6, T=16, vocab=8, n_sequences=4)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    assert not np.array_equal(a.inputs, c.inputs)


def test_selective_copy_without_marks():
    stream = gen_selective_copy(seed=0, T=8, vocab=4, n_sequences=3, k=0)
    assert np.all(stream.inputs[:, -1] == SEP)
    assert not np.any(stream.targets)


def test_selective_copy_rejects_small_settings():
    with pytest.raises(DataError, match="T must be at least 8"):
        gen_selective_copy(seed=0, T=7, vocab=10, n_sequences=1)
    with pytest.raises(DataError, match="vocab must be at least 4"):
        gen_selective_copy(seed=0, T=16, vocab=3, n_sequences=1)
    with pytest.raises(DataError):
        gen_selective_copy(seed=0, T=8, vocab=10, n_sequences=1, k=5)


def test_label_selective_copy_counts_marks():
    row = np.array([[2, 0, 3, 0, 0, SEP, 0, 0]])
    np.testing.assert_array_equal(label_selective_copy(row, 2)[0], [0, 0, 0, 0, 0, 2, 3, 0])
    with pytest.raises(DataError):
        label_selective_copy(row, 1)


# -----------------------
# batching
# -----------------------
def test_batch_order_depends_on_seed_and_epoch():
    stream = gen_selective_copy(seed=1, T=8, vocab=6, n_sequences=16, batch_size=4)
    first = [x for x, _ in stream.batches(0)]
    again = [x for x, _ in stream.batches(0)]
    other = [x for x, _ in stream.batches(1)]
    for a, b in zip(first, again):
        np.testing.assert_array_equal(a, b)
    assert any(not np.array_equal(a, b) for a, b in zip(first, other))
    assert len(first) == stream.num_batches() == 4


def test_ragged_last_batch_is_padded():
    stream = gen_selective_copy(seed=1, T=8, vocab=6, n_sequences=5, batch_size=4)
    batches = list(stream.batches())
    assert len(batches) == 2
    x, y = batches[-1]
    assert x.shape == (4, 8)
    assert np.all(x[1:] == PAD) and np.all(y[1:] == PAD)


def test_prefetch_yields_same_batches():
    stream = gen_selective_copy(seed=2, T=8, vocab=6, n_sequences=12, batch_size=5)
    direct = list(stream.batches(3))
    threaded = list(stream.prefetch(depth=1, epoch=3))
    assert len(direct) == len(threaded)
    for (x1, y1), (x2, y2) in zip(direct, threaded):
        np.testing.assert_array_equal(x1, x2)
        np.testing.assert_array_equal(y1, y2)


def test_prefetch_can_stop_early():
    stream = gen_selective_copy(seed=2, T=8, vocab=6, n_sequences=40, batch_size=2)
    it = stream.prefetch(depth=1)
    next(it)
    it.close()


def test_stream_validation():
    with pytest.raises(DataError, match="token id out of range"):
        BatchStream(np.array([[0, 9]]), np.array([[0, 1]]), vocab_size=4)
    with pytest.raises(DataError):
        BatchStream(np.zeros((2, 3)), np.zeros((2, 4)), vocab_size=4)
    empty = BatchStream(np.zeros((0, 4)), np.zeros((0, 4)), vocab_size=4)
    assert empty.is_empty()
    assert list(empty.batches()) == []


# -----------------------
# byte corpus
# -----------------------
def test_text_corpus_windows(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_bytes(b"abcdefghij")
    stream = load_text_corpus(str(path), max_seq_len=4)
    assert len(stream) == 2
    assert stream.vocab_size == BYTE_VOCAB
    assert stream.pad_id == BYTE_PAD
    np.testing.assert_array_equal(stream.inputs[0], list(b"abcd"))
    np.testing.assert_array_equal(stream.targets[0], list(b"bcde"))
    np.testing.assert_array_equal(stream.targets[1], list(b"fghi"))


def test_text_corpus_too_short(tmp_path):
    path = tmp_path / "tiny.txt"
    path.write_bytes(b"abc")
    assert load_text_corpus(str(path), max_seq_len=4).is_empty()


def test_text_corpus_missing(tmp_path):
    with pytest.raises(DataError):
        load_text_corpus(str(tmp_path / "absent.txt"), max_seq_len=4)
