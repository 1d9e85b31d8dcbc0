"""Generated keyword corpora with a known decision rule, for training checks."""

from __future__ import annotations

import numpy as np

from .features import NUM_CLASSES, Corpus, RawRecord, SentimentLabel


def signal_tokens(label: int, per_class: int = 3) -> list[str]:
    return [f"k{label}{chr(ord('a') + j)}" for j in range(per_class)]


def keyword_corpus(n_train: int = 600, n_test: int = 120, seed: int = 0, *, n_noise: int = 10,
                   signals_per_class: int = 3, min_len: int = 4, max_len: int = 8,
                   dataset_key: str = "synthetic") -> Corpus:
    """Balanced 6-class corpus: each text is noise words plus 1-2 words from its
    class's private signal set, so the label is recoverable from one token."""
    rng = np.random.default_rng(seed)
    noise = [f"w{i:02d}" for i in range(n_noise)]
    records = []
    for split, count in (("train", n_train), ("test", n_test)):
        for j in range(count):
            label = j % NUM_CLASSES
            length = int(rng.integers(min_len, max_len + 1))
            words = [noise[int(k)] for k in rng.integers(0, n_noise, size=length)]
            sig = signal_tokens(label, signals_per_class)
            for _ in range(int(rng.integers(1, 3))):
                words[int(rng.integers(0, length))] = sig[int(rng.integers(0, len(sig)))]
            records.append(RawRecord(f"{split}-{j}", " ".join(words), SentimentLabel(label), split))
    return Corpus(records, dataset_key)
