# ============================================================
# Token streams for the trainer
# Selective-copy generator, byte corpus loader, batch iteration
# ============================================================
"""
Selective copy
--------------
Vocabulary: 0 = PAD (also the noise filler), 1 = SEP, 2..vocab-1 = data.

For a sequence of length T with k marked tokens:

* k distinct positions in [0, T-k-1) receive random data tokens;
  every other position before the separator is PAD;
* inputs[T-k-1] = SEP, positions after it are PAD;
* targets are PAD everywhere except targets[T-k-1+i] = i-th marked token
  (in order of position), so the model emits the marks right after SEP.

With k = 0 the separator sits at T-1 and the targets are all PAD.
"""

import logging
import os
import queue
import threading
from dataclasses import dataclass, field
from typing import Iterator, Optional, Tuple

import numpy as np

from errors import DataError

logger = logging.getLogger(__name__)

PAD = 0
SEP = 1
FIRST_DATA_TOKEN = 2

BYTE_VOCAB = 258
BYTE_PAD = 256

Batch = Tuple[np.ndarray, np.ndarray]


@dataclass
class BatchStream:
    """Sequences plus a seeded, reproducible batching order."""

    inputs: np.ndarray
    targets: np.ndarray
    vocab_size: int
    seed: int = 0
    batch_size: int = 8
    pad_id: int = PAD
    shuffle: bool = True
    k: Optional[int] = field(default=None)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.inputs.shape != self.targets.shape or self.inputs.ndim != 2:
            raise DataError("inputs and targets must be matching n x T arrays")
        if self.batch_size < 1:
            raise DataError("batch_size must be at least 1")
        if self.inputs.size and (self.inputs.max() >= self.vocab_size or self.targets.max() >= self.vocab_size):
            raise DataError("token id out of range")
        if self.inputs.size and (self.inputs.min() < 0 or self.targets.min() < 0):
            raise DataError("token id out of range")

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def seq_len(self) -> int:
        return int(self.inputs.shape[1])

    def is_empty(self) -> bool:
        return len(self) == 0

    def num_batches(self) -> int:
        return -(-len(self) // self.batch_size)

    def with_batch_size(self, batch_size: int) -> "BatchStream":
        return BatchStream(self.inputs, self.targets, self.vocab_size, self.seed, batch_size, self.pad_id, self.shuffle, self.k)

    def batches(self, epoch: int = 0) -> Iterator[Batch]:
        """
        One pass over the data. The order depends only on (seed, epoch).
        A short final batch is filled with pad rows up to batch_size.
        """
        n = len(self)
        if self.shuffle:
            order = np.random.default_rng([self.seed, epoch]).permutation(n)
        else:
            order = np.arange(n)

        for start in range(0, n, self.batch_size):
            idx = order[start:start + self.batch_size]
            x, y = self.inputs[idx], self.targets[idx]
            missing = self.batch_size - idx.shape[0]
            if missing:
                filler = np.full((missing, self.seq_len), self.pad_id, dtype=np.int64)
                x = np.vstack([x, filler])
                y = np.vstack([y, filler])
            yield x, y

    def prefetch(self, depth: int = 2, epoch: int = 0) -> Iterator[Batch]:
        """Same batches as `batches(epoch)`, produced on a background thread."""
        if depth < 1:
            raise DataError("prefetch depth must be at least 1")
        handoff: "queue.Queue" = queue.Queue(maxsize=depth)
        done = object()
        stop = threading.Event()

        def produce():
            try:
                for batch in self.batches(epoch):
                    while not stop.is_set():
                        try:
                            handoff.put(batch, timeout=0.1)
                            break
                        except queue.Full:
                            continue
                    if stop.is_set():
                        return
            finally:
                handoff.put(done)

        worker = threading.Thread(target=produce, daemon=True)
        worker.start()
        try:
            while True:
                item = handoff.get()
                if item is done:
                    break
                yield item
        finally:
            stop.set()
            # drain so the producer can post its sentinel and exit
            while worker.is_alive():
                try:
                    handoff.get(timeout=0.1)
                except queue.Empty:
                    pass
            worker.join()


# -------------------------------
# Selective copy
# -------------------------------
def default_k(T: int) -> int:
    return max(1, T // 16)


def label_selective_copy(inputs, k: int) -> np.ndarray:
    """Targets implied by an input batch: the marked tokens, in order, after SEP."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.int64))
    n, T = inputs.shape
    sep = T - k - 1
    targets = np.full_like(inputs, PAD)
    for row in range(n):
        marked = inputs[row, :sep][inputs[row, :sep] >= FIRST_DATA_TOKEN]
        if marked.shape[0] != k:
            raise DataError(f"row {row} carries {marked.shape[0]} marked tokens, expected {k}")
        targets[row, sep:sep + k] = marked
    return targets


def gen_selective_copy(
    seed: int,
    T: int,
    vocab: int,
    n_sequences: int,
    k: Optional[int] = None,
    batch_size: int = 8,
) -> BatchStream:
    if T < 8:
        raise DataError("T must be at least 8")
    if vocab < 4:
        raise DataError("vocab must be at least 4")
    if n_sequences < 0:
        raise DataError("n_sequences must be non-negative")
    k = default_k(T) if k is None else int(k)
    if k < 0 or k > T - 1 - k:
        raise DataError(f"k={k} does not fit in T={T}")

    rng = np.random.default_rng(seed)
    sep = T - k - 1
    inputs = np.full((n_sequences, T), PAD, dtype=np.int64)
    for row in range(n_sequences):
        if k:
            positions = np.sort(rng.choice(sep, size=k, replace=False))
            inputs[row, positions] = rng.integers(FIRST_DATA_TOKEN, vocab, size=k)
        inputs[row, sep] = SEP

    targets = label_selective_copy(inputs, k) if n_sequences else np.zeros_like(inputs)
    logger.debug("[DATA] selective copy: %d x %d, k=%d, vocab=%d", n_sequences, T, k, vocab)
    return BatchStream(inputs, targets, vocab_size=vocab, seed=seed, batch_size=batch_size, k=k)


# -------------------------------
# Byte corpus
# -------------------------------
def load_text_corpus(path: str, max_seq_len: int, seed: int = 0, batch_size: int = 8) -> BatchStream:
    """Byte-level windows with next-byte targets: floor((N-1)/max_seq_len) of them."""
    if max_seq_len < 1:
        raise DataError("max_seq_len must be at least 1")
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read corpus {path}: {e}")

    data = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    n_windows = max(0, (data.shape[0] - 1) // max_seq_len)
    inputs = np.empty((n_windows, max_seq_len), dtype=np.int64)
    targets = np.empty((n_windows, max_seq_len), dtype=np.int64)
    for i in range(n_windows):
        start = i * max_seq_len
        inputs[i] = data[start:start + max_seq_len]
        targets[i] = data[start + 1:start + max_seq_len + 1]

    if n_windows == 0:
        logger.warning("[DATA] %s has no full window of %d bytes", os.path.basename(path), max_seq_len)
    return BatchStream(inputs, targets, vocab_size=BYTE_VOCAB, seed=seed, batch_size=batch_size, pad_id=BYTE_PAD)
