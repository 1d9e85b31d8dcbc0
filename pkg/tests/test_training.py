import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sentcorr import models as M
from sentcorr import nn_core as nn
from sentcorr import training as T
from sentcorr.errors import CheckpointDigestError, CheckpointTruncatedError, CheckpointVersionError, ConfigError
from sentcorr.features import TAGS, build_vocab

labels6 = st.lists(st.integers(0, 5), min_size=1, max_size=80)


def tiny_cfg(**kw):
    return M.ModelConfig(**{**M.TINY_CONFIG, "seq_len": 0, **kw})


# --- metrics -------------------------------------------------------------

def test_metrics_all_correct():
    gold = np.arange(12) % 6
    acc, p, r, f1, undefined = T.classification_metrics(gold, gold)
    assert acc == 1.0 and undefined == ()
    assert all(v == 1.0 for d in (p, r, f1) for v in d.values())


def test_metrics_constant_prediction():
    gold = np.arange(60) % 6
    acc, p, r, f1, undefined = T.classification_metrics(gold, np.zeros(60, dtype=int))
    assert acc == pytest.approx(1 / 6)
    assert r["gd"] == 1.0 and p["gd"] == pytest.approx(1 / 6)
    assert all(r[t] == 0.0 and p[t] == 0.0 and f1[t] == 0.0 for t in TAGS[1:])
    assert undefined == TAGS[1:]


@given(labels6, st.data())
def test_metrics_match_naive_recount(gold, data):
    pred = data.draw(st.lists(st.integers(0, 5), min_size=len(gold), max_size=len(gold)))
    acc, p, r, f1, _ = T.classification_metrics(np.array(gold), np.array(pred))
    pairs = list(zip(gold, pred))
    assert acc == sum(g == q for g, q in pairs) / len(pairs)
    for k, tag in enumerate(TAGS):
        tp = sum(1 for g, q in pairs if g == k and q == k)
        fp = sum(1 for g, q in pairs if g != k and q == k)
        fn = sum(1 for g, q in pairs if g == k and q != k)
        assert p[tag] == (tp / (tp + fp) if tp + fp else 0.0)
        assert r[tag] == (tp / (tp + fn) if tp + fn else 0.0)
        assert 0 <= f1[tag] <= 1
        if p[tag] + r[tag]:
            assert f1[tag] == pytest.approx(2 * p[tag] * r[tag] / (p[tag] + r[tag]))


@given(labels6, st.data())
def test_accuracy_is_trace_over_total(gold, data):
    pred = data.draw(st.lists(st.integers(0, 5), min_size=len(gold), max_size=len(gold)))
    counts = T.confusion_counts(np.array(gold), np.array(pred))
    acc = T.classification_metrics(np.array(gold), np.array(pred))[0]
    assert acc == np.trace(counts) / counts.sum()
    assert counts.sum() == len(gold)


def test_history_round_trip(tmp_path):
    gold = np.arange(12) % 6
    acc, p, r, f1, und = T.classification_metrics(gold, (gold + (gold == 2)) % 6)
    rec = T.MetricsRecord(3, "test", 0.1 + 0.2, acc, p, r, f1, und)
    T.write_history([rec, dataclasses.replace(rec, epoch=4)], tmp_path / "h.csv")
    header = (tmp_path / "h.csv").read_text().splitlines()[0]
    assert header == ",".join(T.HISTORY_FIELDS)
    assert header.startswith("epoch,split,loss,accuracy,gd_precision,gd_recall,gd_f1,zj_precision")
    back = T.read_history(tmp_path / "h.csv")
    assert back[0].loss == rec.loss and back[0].f1 == rec.f1 and back[1].epoch == 4


def test_render_table_row():
    row = {"dataset": "#1", "feature": "explicit", "model": "cnn_lstm2", "accuracy": 0.850,
           "gd_f1": 0.804, "zj_f1": 0.796, "gx_f1": 0.926, "ng_f1": 0.622, "xq_f1": 0.928, "fn_f1": 0.869}
    lines = T.render_table([row]).splitlines()
    assert lines[0].split() == ["D", "#1", "gd_f1", "zj_f1", "gx_f1", "ng_f1", "xq_f1", "fn_f1", "A"]
    assert lines[1].split() == ["exp", "M1", "0.804", "0.796", "0.926", "0.622", "0.928", "0.869", "0.850"]


def test_render_table_orders_rows():
    base = {"dataset": "d", "accuracy": 0.5, **{f"{t}_f1": 0.5 for t in TAGS}}
    rows = [dict(base, feature=f, model=m) for f in ("character", "implicit", "explicit")
            for m in ("cnn_lstm2_stack", "cnn_lstm2")]
    labels = [" ".join(line.split()[:2]) for line in T.render_table(rows).splitlines()[1:]]
    assert labels == ["exp M1", "exp M2", "imp M1", "imp M2", "char M1", "char M2"]


# --- configuration -------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(epochs=0), dict(batch_size=0), dict(lr=0.0), dict(eval_every=0)])
def test_train_config_rejects(bad):
    with pytest.raises(ConfigError):
        T.TrainConfig(**bad).validate()


# --- training loop -------------------------------------------------------

def _train(data, kind=M.ModelKind.CNN_LSTM2, epochs=3, **kw):
    vocab, train, test = data
    cfg = T.TrainConfig(epochs=epochs, batch_size=16, lr=0.01, seed=kw.pop("seed", 0), **kw)
    return T.train(cfg, train, kind, tiny_cfg(dropout_rate=0.2), vocab, test)


@pytest.mark.parametrize("kind", list(M.ModelKind))
def test_training_is_deterministic(small_synthetic, kind):
    c1, h1 = _train(small_synthetic, kind)
    c2, h2 = _train(small_synthetic, kind)
    assert [r.loss for r in h1] == [r.loss for r in h2]
    assert all(c1.params[k].tobytes() == c2.params[k].tobytes() for k in c1.params)
    c3, h3 = _train(small_synthetic, kind, seed=1)
    assert [r.loss for r in h1] != [r.loss for r in h3]


def test_history_layout(small_synthetic):
    _, hist = _train(small_synthetic, epochs=4, eval_every=2)
    assert [(r.epoch, r.split) for r in hist] == [(1, "train"), (2, "train"), (2, "test"),
                                                  (3, "train"), (4, "train"), (4, "test")]
    for r in hist:
        assert 0 <= r.accuracy <= 1
        assert all(0 <= v <= 1 for d in (r.precision, r.recall, r.f1) for v in d.values())


def test_training_reduces_loss(small_synthetic):
    _, hist = _train(small_synthetic, epochs=6)
    train_losses = [r.loss for r in hist if r.split == "train"]
    assert train_losses[-1] < train_losses[0]


def test_patience_stops_early(small_synthetic):
    vocab, train, test = small_synthetic
    cfg = T.TrainConfig(epochs=30, batch_size=16, lr=0.5, patience=1)
    ckpt, hist = T.train(cfg, train, M.ModelKind.CNN_LSTM2, tiny_cfg(), vocab, test)
    assert ckpt.epoch < 30


def test_divergence_returns_partial_history(small_synthetic):
    vocab, train, test = small_synthetic
    cfg = T.TrainConfig(epochs=3, batch_size=16, lr=1e308)
    with pytest.raises(T.TrainingDiverged) as info, np.errstate(all="ignore"):
        T.train(cfg, train, M.ModelKind.CNN_LSTM2, tiny_cfg(), vocab, test)
    assert isinstance(info.value.history, list)


def test_evaluate_matches_recount(small_synthetic):
    vocab, train, test = small_synthetic
    ckpt, _ = _train(small_synthetic, epochs=2)
    rec = T.evaluate(ckpt.params, ckpt.config, test)
    pred = [int(M.predict(ckpt.params, ckpt.config, s).label) for s in test]
    assert rec.predicted.tolist() == pred
    assert rec.accuracy == sum(int(s.label) == q for s, q in zip(test, pred)) / len(test)


def test_evaluate_rejects_empty():
    with pytest.raises(ConfigError):
        T.evaluate({}, tiny_cfg(), [])


# --- checkpoints ---------------------------------------------------------

@pytest.fixture
def ckpt():
    cfg = tiny_cfg(seq_len=7)
    vocab = build_vocab([[f"t{i}" for i in range(18)]], "explicit")
    params = M.init_model(M.ModelKind.CNN_LSTM2_STACK, cfg, len(vocab), nn.new_rng(0))
    return T.Checkpoint(M.ModelKind.CNN_LSTM2_STACK, cfg, vocab.digest, params, 7, 11), vocab


def test_checkpoint_round_trip(tmp_path, ckpt):
    ck, vocab = ckpt
    T.save_checkpoint(ck, tmp_path / "m.ckpt")
    data = (tmp_path / "m.ckpt").read_bytes()
    assert data[:4] == b"SNTC"
    back = T.load_checkpoint(tmp_path / "m.ckpt", vocab.digest)
    assert (back.kind, back.config, back.vocab_digest, back.epoch, back.seed) == (
        ck.kind, ck.config, ck.vocab_digest, ck.epoch, ck.seed)
    assert list(back.params) == list(ck.params)
    assert all(back.params[k].tobytes() == ck.params[k].tobytes() for k in ck.params)
    probe = M.random_samples(nn.new_rng(5), 64, 7, len(vocab))
    assert M.predict_probs(back.params, back.config, probe).tobytes() == \
        M.predict_probs(ck.params, ck.config, probe).tobytes()


def test_checkpoint_f4_is_lossy_but_close(tmp_path, ckpt):
    ck, _ = ckpt
    T.save_checkpoint(ck, tmp_path / "m.ckpt", precision="f4")
    back = T.load_checkpoint(tmp_path / "m.ckpt")
    for k in ck.params:
        np.testing.assert_allclose(back.params[k], ck.params[k], rtol=1e-6, atol=1e-7)


def test_checkpoint_digest_mismatch(tmp_path, ckpt):
    ck, _ = ckpt
    T.save_checkpoint(ck, tmp_path / "m.ckpt")
    other = build_vocab([["x"]], "explicit")
    with pytest.raises(CheckpointDigestError):
        T.load_checkpoint(tmp_path / "m.ckpt", other.digest)


@pytest.mark.parametrize("cut", [3, 11, 40, -1])
def test_checkpoint_truncated(tmp_path, ckpt, cut):
    ck, _ = ckpt
    data = T.checkpoint_bytes(ck)
    (tmp_path / "m.ckpt").write_bytes(data[:cut])
    with pytest.raises(CheckpointTruncatedError):
        T.load_checkpoint(tmp_path / "m.ckpt")


def test_checkpoint_version(tmp_path, ckpt):
    ck, _ = ckpt
    data = bytearray(T.checkpoint_bytes(ck))
    data[4:8] = (2).to_bytes(4, "little")
    (tmp_path / "m.ckpt").write_bytes(bytes(data))
    with pytest.raises(CheckpointVersionError):
        T.load_checkpoint(tmp_path / "m.ckpt")


def test_checkpoint_errors_are_distinct():
    kinds = {CheckpointDigestError, CheckpointTruncatedError, CheckpointVersionError}
    assert len(kinds) == 3 and not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)
