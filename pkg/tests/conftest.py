import sys

import pytest

from sentcorr.features import FeatureMode, build_vocab, default_seq_len, encode_records, tokenize
from sentcorr.synthetic import keyword_corpus


def encode_synthetic(n_train=600, n_test=120, seed=0, mode=FeatureMode.EXPLICIT):
    """Build vocab and encode both splits of the synthetic keyword corpus."""
    corpus = keyword_corpus(n_train, n_test, seed)
    train_recs, test_recs = corpus.split("train"), corpus.split("test")
    toks = [tokenize(r.text, mode) for r in train_recs]
    vocab = build_vocab(toks, mode)
    n = default_seq_len(toks)
    train = encode_records(train_recs, vocab, n, dataset_key=corpus.dataset_key)
    test = encode_records(test_recs, vocab, n, dataset_key=corpus.dataset_key)
    return vocab, train, test


@pytest.fixture(scope="session")
def small_synthetic():
    return encode_synthetic(96, 24, seed=3)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
