import csv
import io
import itertools

import pytest

from sentcorr import cli
from sentcorr import correlation as C
from sentcorr.errors import ConfigError
from sentcorr.features import SentimentLabel, write_corpus
from sentcorr.synthetic import keyword_corpus

SMALL = ["--embed-dim", "16", "--conv-out", "16", "--lstm-hidden", "16", "--stack-dim", "16",
         "--epochs", "12", "--lr", "0.005"]


def run(*argv, stdin=None):
    out, err = io.StringIO(), io.StringIO()
    code = cli.run([str(a) for a in argv], out, err, stdin)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("corpus") / "syn.jsonl"
    write_corpus(keyword_corpus(), p)
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus_file):
    outdir = tmp_path_factory.mktemp("run")
    code, out, err = run("train", "--corpus", corpus_file, "--output-dir", outdir, *SMALL)
    assert code == 0, err
    return outdir


# --- config resolution ---------------------------------------------------

def test_empty_config_gives_defaults(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("")
    cfg = cli.parse_config(p)
    assert (cfg.embed_dim, cfg.lstm_hidden, cfg.window) == (100, 128, 5)
    assert cfg == cli.RunConfig()


def test_flag_overrides_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nepochs = 5\n")
    assert cli.parse_config(p).epochs == 5
    assert cli.parse_config(p, {"epochs": "9"}).epochs == 9


def test_unknown_key_names_key_and_line(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("epochs = 3\nwindw = 5\n")
    with pytest.raises(ConfigError) as info:
        cli.parse_config(p)
    assert "windw" in str(info.value) and ":2:" in str(info.value)


def test_unparsable_value(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("epochs = many\n")
    with pytest.raises(ConfigError) as info:
        cli.parse_config(p)
    assert ":1:" in str(info.value)


def test_epochs_zero_rejected(tmp_path):
    with pytest.raises(ConfigError):
        cli.parse_config(None, {"epochs": "0"})


def test_snapshot_parses_back_to_same_config(tmp_path):
    cfg = cli.parse_config(None, {"lr": "0.1", "shuffle": "false", "feature_mode": "character"})
    p = tmp_path / "snap.cfg"
    p.write_text(cfg.to_text())
    assert cli.parse_config(p) == cfg


# --- exit codes ----------------------------------------------------------

def test_usage_errors_exit_1(tmp_path):
    assert run()[0] == 1
    assert run("train", "--windw", "5", "--output-dir", tmp_path)[0] == 1
    p = tmp_path / "c.cfg"
    p.write_text("windw = 5\n")
    code, _, err = run("train", "--config", p, "--output-dir", tmp_path)
    assert code == 1 and "windw" in err


def test_missing_corpus_exit_4(tmp_path):
    code, _, err = run("train", "--corpus", tmp_path / "nope.jsonl", "--output-dir", tmp_path)
    assert code == 4 and "nope.jsonl" in err


def test_malformed_corpus_exit_2(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"id": "1", "text": "a", "label": "gd", "split": "train"}\n{"id": 2}\n')
    code, _, err = run("vocab", "--corpus", p, "--output-dir", tmp_path)
    assert code == 2 and "bad.jsonl:2" in err


def test_divergence_exit_3(tmp_path, corpus_file):
    code, _, err = run("train", "--corpus", corpus_file, "--output-dir", tmp_path, *SMALL[:8],
                       "--epochs", "2", "--lr", "1e308")
    assert code == 3
    assert not (tmp_path / "model.sntc").exists()


# --- subcommands ---------------------------------------------------------

def test_vocab_command(tmp_path, corpus_file):
    code, out, _ = run("vocab", "--corpus", corpus_file, "--output-dir", tmp_path)
    assert code == 0
    lines = (tmp_path / "vocab.tsv").read_text().splitlines()
    assert lines[:2] == ["0\tnone", "1\t<unk>"]
    assert (tmp_path / "run_config_vocab.txt").exists()


def test_train_then_eval(trained, corpus_file):
    assert (trained / "model.sntc").exists() and (trained / "history.csv").exists()
    code, out, err = run("eval", "--corpus", corpus_file, "--output-dir", trained)
    assert code == 0, err
    acc = float(out.split()[0].split("=")[1])
    assert acc >= 0.95
    rows = list(csv.DictReader(open(trained / "metrics.csv")))
    assert float(rows[0]["accuracy"]) == pytest.approx(acc, abs=1e-4)
    recs = C.read_prediction_log(trained / "predictions.csv")
    assert len(recs) == 120
    assert sum(r.gold == r.predicted for r in recs) / 120 == float(rows[0]["accuracy"])


def test_predict_empty_input(trained):
    code, out, _ = run("predict", "--output-dir", trained, stdin=io.StringIO(""))
    assert code == 0 and out == ""


def test_predict_lines(trained):
    code, out, _ = run("predict", "--output-dir", trained, stdin=io.StringIO("w01 k3a w02\nk5b\n"))
    lines = out.splitlines()
    assert code == 0 and len(lines) == 2
    fields = lines[0].split("\t")
    assert fields[0] == "ng" and len(fields) == 7
    assert abs(sum(float(x) for x in fields[1:]) - 1) < 1e-5
    assert lines[1].startswith("fn\t")


def test_snapshot_reproduces_run(tmp_path, trained, corpus_file):
    snap = trained / "run_config_train.txt"
    assert "embed_dim = 16" in snap.read_text()
    code, _, err = run("train", "--config", snap, "--output-dir", tmp_path)
    assert code == 0, err
    assert (tmp_path / "model.sntc").read_bytes() == (trained / "model.sntc").read_bytes()
    assert (tmp_path / "history.csv").read_bytes() == (trained / "history.csv").read_bytes()


def test_correlate_18_logs(tmp_path):
    import numpy as np
    rng = np.random.default_rng(0)
    logs = []
    for i, (d, f, m) in enumerate(itertools.product(("news", "comments"), ("explicit", "implicit", "character"),
                                                    ("cnn_lstm2", "cnn_lstm2_stack", "other"))):
        recs = [C.PredictionRecord(str(j), SentimentLabel(j % 6),
                                   SentimentLabel(5 if j % 6 == 0 and j % 4 else int(rng.integers(6))), d, f, m)
                for j in range(60)]
        p = tmp_path / f"log{i}.csv"
        C.write_prediction_log(recs, p)
        logs.append(p)
    outdir = tmp_path / "corr"
    code, out, err = run("correlate", "--output-dir", outdir, *logs)
    assert code == 0, err
    assert len(list(outdir.glob("confusion_*.csv"))) == 18
    assert len(list(outdir.glob("vote_report.md"))) == 1
    text = (outdir / "vote_report.md").read_text()
    assert "| gd | fn | 18 |" in text
    assert "## dataset news" in text


def test_correlate_fixed_theta(tmp_path):
    recs = [C.PredictionRecord(str(j), SentimentLabel.LOVE, SentimentLabel.ANGER, "d", "f", "m") for j in range(3)]
    C.write_prediction_log(recs, tmp_path / "p.csv")
    code, _, _ = run("correlate", "--binarize", "fixed", "--theta", "0.5", "--output-dir", tmp_path,
                     tmp_path / "p.csv")
    assert code == 0
    assert "| gd | fn | 1 |" in (tmp_path / "vote_report.md").read_text()


def test_gradcheck_command(tmp_path):
    code, out, _ = run("gradcheck", "--output-dir", tmp_path)
    assert code == 0
    assert float(out.splitlines()[-1].split()[-1]) < 1e-4


def test_report_command(tmp_path):
    header = "dataset,feature,model,epoch,split,loss,accuracy," + ",".join(
        f"{t}_{m}" for t in ("gd", "zj", "gx", "ng", "xq", "fn") for m in ("precision", "recall", "f1"))
    f1 = ["0.804", "0.796", "0.926", "0.622", "0.928", "0.869"]
    vals = []
    for v in f1:
        vals += ["0", "0", v]
    (tmp_path / "m.csv").write_text(header + "\n" + ",".join(["#1", "explicit", "cnn_lstm2", "1", "test", "0.5",
                                                              "0.850", *vals]) + "\n")
    code, out, _ = run("report", "--output-dir", tmp_path, tmp_path / "m.csv")
    assert code == 0
    assert out.splitlines()[1].split() == ["exp", "M1", *f1, "0.850"]
    assert (tmp_path / "report.txt").read_text() == out


def test_failed_write_keeps_old_file(tmp_path, monkeypatch):
    from sentcorr import _io
    target = tmp_path / "out.txt"
    _io.atomic_write_text(target, "old")

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(_io.os, "replace", boom)
    with pytest.raises(OSError):
        _io.atomic_write_text(target, "new contents")
    assert target.read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]
