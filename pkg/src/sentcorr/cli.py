"""Command-line entry point: one subcommand per pipeline stage.

Settings resolve as defaults < config file (``key = value`` lines, ``#``
comments) < command-line flags (``--key value``). Every run writes the
resolved settings to ``<output_dir>/run_config_<command>.txt``.

Exit status: 0 success, 1 usage error, 2 input-format error, 3 numerical
failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import correlation as corr
from . import features as F
from . import models as M
from . import training as T
from ._io import atomic_write_text
from .errors import ConfigError, InputFormatError, SentcorrError

log = logging.getLogger("sentcorr")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3, 4
SUBCOMMANDS = ("vocab", "train", "eval", "predict", "correlate", "gradcheck", "report")
GRADCHECK_TOLERANCE = 1e-4


@dataclass
class RunConfig:
    # paths
    corpus: str = ""
    synonym_dict: str = ""
    vocab: str = ""        # default <output_dir>/vocab.tsv
    checkpoint: str = ""   # default <output_dir>/model.sntc
    output_dir: str = "out"
    dataset: str = ""      # default: corpus file stem
    # features
    feature_mode: str = "explicit"
    min_count: int = 1
    seq_len: int = 0       # 0: longest training document, capped
    seq_len_cap: int = F.SEQ_LEN_CAP
    # model
    model_kind: str = "cnn_lstm2"
    embed_dim: int = 100
    conv_out: int = 100
    lstm_hidden: int = 128
    stack_dim: int = 128
    window: int = 5
    dropout_rate: float = 0.5
    activation: str = "relu"
    mean_by: str = "padded"
    # training
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 1
    shuffle: bool = True
    patience: int = 0
    checkpoint_precision: str = "f8"
    eval_split: str = "test"
    # correlation
    binarize: str = "topk"  # topk | fixed
    theta: float = 0.5
    top_k: int = 3
    include_diagonal: bool = False
    quorum: int = 0         # 0: all combinations (conjunction)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def vocab_path(self) -> Path:
        return Path(self.vocab) if self.vocab else self.out / "vocab.tsv"

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else self.out / "model.sntc"

    def model_config(self, seq_len: int | None = None) -> M.ModelConfig:
        return M.ModelConfig(self.embed_dim, self.conv_out, self.lstm_hidden, self.stack_dim, F.NUM_CLASSES,
                             self.window, self.dropout_rate, self.seq_len if seq_len is None else seq_len,
                             self.activation, self.mean_by).validate()

    def train_config(self) -> T.TrainConfig:
        return T.TrainConfig(self.epochs, self.batch_size, self.lr, self.beta1, self.beta2, self.adam_eps,
                             self.seed, self.eval_every, self.shuffle, self.patience).validate()

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def validate(self) -> "RunConfig":
        try:
            F.FeatureMode(self.feature_mode)
            M.ModelKind(self.model_kind)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.binarize not in ("topk", "fixed"):
            raise ConfigError("binarize must be 'topk' or 'fixed'")
        if self.eval_split not in F.SPLITS:
            raise ConfigError("eval_split must be 'train' or 'test'")
        if self.checkpoint_precision not in ("f8", "f4"):
            raise ConfigError("checkpoint_precision must be 'f8' or 'f4'")
        if self.seq_len_cap < 1 or self.quorum < 0 or self.top_k < 1:
            raise ConfigError("seq_len_cap and top_k must be >= 1, quorum >= 0")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError("theta must lie in [0, 1]")
        self.model_config()
        self.train_config()
        return self


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _convert(key: str, raw: str, where: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"{where}unknown setting {key!r}")
    typ = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}cannot parse {raw!r} as {typ} for {key!r}") from None
    return raw


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Resolve settings: defaults, then ``path`` (if given), then ``overrides``."""
    values = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, val = (s.strip() for s in line.split("=", 1))
                values[key] = _convert(key, val, f"{path}:{lineno}: ")
    for key, val in (overrides or {}).items():
        values[key] = _convert(key, str(val), "command line: ")
    return RunConfig(**values).validate()


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sentcorr", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "vocab": "build the vocabulary from the corpus training split",
        "train": "train a model, write checkpoint and history.csv",
        "eval": "evaluate a checkpoint, write metrics.csv and predictions.csv",
        "predict": "classify text lines from standard input",
        "correlate": "confusion matrices and vote report from prediction logs",
        "gradcheck": "finite-difference check of both models on a tiny config",
        "report": "per-tag F1 / accuracy grid from metrics files",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("-v", "--verbose", action="store_true")
        for f in fields(RunConfig):
            flags = [f"--{f.name}"]
            if "_" in f.name:
                flags.append(f"--{f.name.replace('_', '-')}")
            p.add_argument(*flags, dest=f"set_{f.name}", default=None, metavar=f.name.upper())
        if name == "correlate":
            p.add_argument("logs", nargs="+", help="prediction log CSV files")
        if name == "report":
            p.add_argument("metrics", nargs="+", help="metrics CSV files written by eval")
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _require(value: str, what: str) -> str:
    if not value:
        raise ConfigError(f"missing setting {what!r}")
    return value


def _synonyms(cfg: RunConfig):
    if F.FeatureMode(cfg.feature_mode) is F.FeatureMode.IMPLICIT:
        return F.load_synonym_dict(_require(cfg.synonym_dict, "synonym_dict"))
    return None


def _load_corpus(cfg: RunConfig) -> F.Corpus:
    return F.load_corpus(_require(cfg.corpus, "corpus"), cfg.dataset or None)


def _train_tokens(cfg, corpus, synonyms):
    train = corpus.split("train")
    if not train:
        raise InputFormatError("corpus has no training records", path=cfg.corpus)
    return train, [F.tokenize(r.text, cfg.feature_mode, synonyms) for r in train]


def cmd_vocab(cfg: RunConfig, args, out) -> int:
    synonyms = _synonyms(cfg)
    _, toks = _train_tokens(cfg, _load_corpus(cfg), synonyms)
    vocab = F.build_vocab(toks, cfg.feature_mode, cfg.min_count)
    vocab.save(cfg.vocab_path)
    print(f"vocabulary: {len(vocab)} entries -> {cfg.vocab_path}", file=out)
    return EXIT_OK


def cmd_train(cfg: RunConfig, args, out) -> int:
    synonyms = _synonyms(cfg)
    corpus = _load_corpus(cfg)
    train_recs, toks = _train_tokens(cfg, corpus, synonyms)
    if cfg.vocab and Path(cfg.vocab).exists():
        vocab = F.Vocabulary.load(cfg.vocab, cfg.feature_mode)
    else:
        vocab = F.build_vocab(toks, cfg.feature_mode, cfg.min_count)
        vocab.save(cfg.vocab_path)
    seq_len = cfg.seq_len or F.default_seq_len(toks, cfg.seq_len_cap)
    mcfg = cfg.model_config(seq_len)
    stats: Counter = Counter()
    train = F.encode_records(train_recs, vocab, seq_len, synonyms, corpus.dataset_key, stats)
    test = F.encode_records(corpus.split("test"), vocab, seq_len, synonyms, corpus.dataset_key, stats)
    if stats["truncated"]:
        log.warning("%d document(s) truncated to %d tokens", stats["truncated"], seq_len)

    def progress(history):
        last = history[-1]
        log.info("epoch %d %s loss %.4f acc %.4f", last.epoch, last.split, last.loss, last.accuracy)

    try:
        ckpt, history = T.train(cfg.train_config(), train, cfg.model_kind, mcfg, vocab, test or None, progress)
    except T.TrainingDiverged as exc:
        T.write_history(exc.history, cfg.out / "history.csv")
        raise
    T.save_checkpoint(ckpt, cfg.checkpoint_path, cfg.checkpoint_precision)
    T.write_history(history, cfg.out / "history.csv")
    final = [r for r in history if r.epoch == ckpt.epoch]
    print(" ".join(f"{r.split}_accuracy={r.accuracy:.4f}" for r in final), file=out)
    return EXIT_OK


def _load_model(cfg: RunConfig):
    vocab = F.Vocabulary.load(cfg.vocab_path, cfg.feature_mode)
    ckpt = T.load_checkpoint(cfg.checkpoint_path, expected_digest=vocab.digest)
    return vocab, ckpt


def cmd_eval(cfg: RunConfig, args, out) -> int:
    synonyms = _synonyms(cfg)
    corpus = _load_corpus(cfg)
    vocab, ckpt = _load_model(cfg)
    recs = corpus.split(cfg.eval_split)
    if not recs:
        raise InputFormatError(f"corpus has no {cfg.eval_split} records", path=cfg.corpus)
    samples = F.encode_records(recs, vocab, ckpt.config.seq_len, synonyms, corpus.dataset_key)
    record = T.evaluate(ckpt.params, ckpt.config, samples, ckpt.epoch, cfg.eval_split)
    kind = ckpt.kind.value
    T.write_metrics(record, cfg.out / "metrics.csv", corpus.dataset_key, cfg.feature_mode, kind)
    log_records = [corr.PredictionRecord(s.id, s.label, F.SentimentLabel(int(p)), corpus.dataset_key,
                                         cfg.feature_mode, kind)
                   for s, p in zip(samples, record.predicted)]
    corr.write_prediction_log(log_records, cfg.out / "predictions.csv")
    print(f"accuracy={record.accuracy:.4f} loss={record.loss:.4f}", file=out)
    if record.undefined_precision:
        print(f"never predicted (precision reported as 0): {', '.join(record.undefined_precision)}", file=out)
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args, out, stdin=None) -> int:
    stdin = stdin if stdin is not None else sys.stdin
    synonyms = _synonyms(cfg)
    vocab, ckpt = _load_model(cfg)
    for line in stdin:
        text = line.rstrip("\r\n")
        sample = F.encode(F.tokenize(text, vocab.mode, synonyms), vocab, ckpt.config.seq_len)
        pred = M.predict(ckpt.params, ckpt.config, sample)
        print(pred.label.tag + "\t" + "\t".join(f"{p:.6f}" for p in pred.probs), file=out)
    return EXIT_OK


def cmd_correlate(cfg: RunConfig, args, out) -> int:
    records = []
    for path in args.logs:
        records.extend(corr.read_prediction_log(path))
    groups = corr.group_by_combo(records)
    if not groups:
        raise InputFormatError("prediction logs contain no records")
    matrices = [corr.confusion(recs) for recs in groups.values()]
    if cfg.binarize == "fixed":
        binaries = [corr.binarize_fixed(cm, cfg.theta) for cm in matrices]
    else:
        binaries = [corr.binarize_topk(cm, cfg.top_k, cfg.include_diagonal) for cm in matrices]

    def run_vote(subset):
        q = min(cfg.quorum, len(subset)) if cfg.quorum else None
        return corr.vote(subset, q)

    votes = [("all combinations", run_vote(binaries))]
    datasets = sorted({b.combo[0] for b in binaries})
    if len(datasets) > 1:
        for ds in datasets:
            votes.append((f"dataset {ds}", run_vote([b for b in binaries if b.combo[0] == ds])))
    report = corr.correlation_report(matrices, votes, binaries)
    written = report.write(cfg.out)
    print(f"{len(matrices)} matrices, vote report -> {written[-1]}", file=out)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args, out) -> int:
    worst = 0.0
    for kind in M.ModelKind:
        err = max(M.full_grad_check(kind, seed=cfg.seed).values())
        worst = max(worst, err)
        print(f"{kind.value}: max relative error {err:.3e}", file=out)
    print(f"max relative error {worst:.3e}", file=out)
    return EXIT_OK if worst < GRADCHECK_TOLERANCE else EXIT_NUMERICAL


def cmd_report(cfg: RunConfig, args, out) -> int:
    rows = []
    for path in args.metrics:
        file_rows = T.read_metrics(path)
        if not file_rows:
            raise InputFormatError("metrics file has no rows", path=path)
        test_rows = [r for r in file_rows if r.get("split") == "test"]
        rows.append((test_rows or file_rows)[-1])
    text = T.render_table(rows)
    atomic_write_text(cfg.out / "report.txt", text)
    out.write(text)
    return EXIT_OK


COMMANDS = {
    "vocab": cmd_vocab, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
    "correlate": cmd_correlate, "gradcheck": cmd_gradcheck, "report": cmd_report,
}


def run(argv=None, out=None, err=None, stdin=None) -> int:
    out = out if out is not None else sys.stdout
    err = err if err is not None else sys.stderr
    try:
        args = build_parser().parse_args(argv)
        overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("set_") and v is not None}
        cfg = parse_config(args.config, overrides)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=err)
        atomic_write_text(cfg.out / f"run_config_{args.command}.txt", cfg.to_text())
        if args.command == "predict":
            return cmd_predict(cfg, args, out, stdin)
        return COMMANDS[args.command](cfg, args, out)
    except SentcorrError as exc:
        print(f"sentcorr: error: {exc}", file=err)
        return exc.exit_code
    except OSError as exc:
        print(f"sentcorr: I/O error: {exc}", file=err)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
