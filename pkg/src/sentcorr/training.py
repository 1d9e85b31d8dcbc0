"""Epoch loop, per-tag metrics, history files and checkpoint persistence."""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import models as M
from . import nn_core as nn
from ._io import atomic_write_bytes, atomic_write_text
from .errors import (CheckpointDigestError, CheckpointError, CheckpointTruncatedError, CheckpointVersionError,
                     ConfigError, InputFormatError, NumericalError)
from .features import NUM_CLASSES, TAGS, EncodedSample, FeatureMode, Vocabulary

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 1
    shuffle: bool = True
    patience: int = 0  # 0 disables early stopping

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.adam_eps <= 0:
            raise ConfigError("invalid Adam hyperparameters")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        return self


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

HISTORY_FIELDS = ("epoch", "split", "loss", "accuracy") + tuple(
    f"{tag}_{m}" for tag in TAGS for m in ("precision", "recall", "f1"))
METRICS_FIELDS = ("dataset", "feature", "model") + HISTORY_FIELDS


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    accuracy: float
    precision: dict
    recall: dict
    f1: dict
    undefined_precision: tuple = ()
    gold: np.ndarray | None = field(default=None, repr=False, compare=False)
    predicted: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_row(self) -> dict:
        row = {"epoch": self.epoch, "split": self.split, "loss": self.loss, "accuracy": self.accuracy}
        for tag in TAGS:
            row[f"{tag}_precision"] = self.precision[tag]
            row[f"{tag}_recall"] = self.recall[tag]
            row[f"{tag}_f1"] = self.f1[tag]
        return row

    @classmethod
    def from_row(cls, row: dict) -> "MetricsRecord":
        get = lambda k: float(row[k])  # noqa: E731
        return cls(int(row["epoch"]), row["split"], get("loss"), get("accuracy"),
                   {t: get(f"{t}_precision") for t in TAGS}, {t: get(f"{t}_recall") for t in TAGS},
                   {t: get(f"{t}_f1") for t in TAGS})


def confusion_counts(gold: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    """``counts[a, b]`` = number of samples with gold ``b`` predicted as ``a``."""
    counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(counts, (np.asarray(predicted), np.asarray(gold)), 1)
    return counts


def classification_metrics(gold, predicted):
    """Accuracy and per-tag precision/recall/F1.

    Precision of a class that was never predicted is 0 and the tag is listed
    in the returned ``undefined`` tuple.
    """
    gold = np.asarray(gold)
    predicted = np.asarray(predicted)
    counts = confusion_counts(gold, predicted)
    total = counts.sum()
    accuracy = float(np.trace(counts) / total) if total else 0.0
    prec, rec, f1, undefined = {}, {}, {}, []
    for k, tag in enumerate(TAGS):
        tp = counts[k, k]
        n_pred = counts[k].sum()
        n_gold = counts[:, k].sum()
        if n_pred == 0:
            undefined.append(tag)
        p = float(tp / n_pred) if n_pred else 0.0
        r = float(tp / n_gold) if n_gold else 0.0
        prec[tag], rec[tag] = p, r
        f1[tag] = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return accuracy, prec, rec, f1, tuple(undefined)


def evaluate(params: dict, config: M.ModelConfig, samples: Sequence[EncodedSample],
             epoch: int = 0, split: str = "test") -> MetricsRecord:
    if not samples:
        raise ConfigError("cannot evaluate on an empty corpus")
    probs = M.predict_probs(params, config, samples)
    gold = np.array([int(s.label) for s in samples])
    predicted = probs.argmax(axis=1)
    loss = float(np.mean(nn.cross_entropy(probs, gold)))
    acc, p, r, f1, undefined = classification_metrics(gold, predicted)
    return MetricsRecord(epoch, split, loss, acc, p, r, f1, undefined, gold, predicted)


def _csv_text(fieldnames, rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def write_history(records: Iterable[MetricsRecord], path) -> None:
    atomic_write_text(path, _csv_text(HISTORY_FIELDS, [r.to_row() for r in records]))


def read_history(path) -> list[MetricsRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(HISTORY_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise InputFormatError(f"history file lacks columns {sorted(missing)}", path=path)
        return [MetricsRecord.from_row(row) for row in reader]


def write_metrics(record: MetricsRecord, path, dataset: str, feature: str, model: str) -> None:
    row = {"dataset": dataset, "feature": feature, "model": model, **record.to_row()}
    atomic_write_text(path, _csv_text(METRICS_FIELDS, [row]))


def read_metrics(path) -> list[dict]:
    """Rows of a metrics file as dicts (``dataset``, ``feature``, ``model`` plus metric columns)."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"dataset", "feature", "model", "accuracy"} | {f"{t}_f1" for t in TAGS}
        missing = need - set(reader.fieldnames or ())
        if missing:
            raise InputFormatError(f"metrics file lacks columns {sorted(missing)}", path=path)
        rows = list(reader)
    for lineno, row in enumerate(rows, start=2):
        try:
            for k in need - {"dataset", "feature", "model"}:
                row[k] = float(row[k])
        except ValueError:
            raise InputFormatError("non-numeric metric value", path=path, line=lineno) from None
    return rows


FEATURE_SHORT = {FeatureMode.EXPLICIT.value: "exp", FeatureMode.IMPLICIT.value: "imp",
                 FeatureMode.CHARACTER.value: "char"}
MODEL_SHORT = {k.value: k.short for k in M.ModelKind}
TABLE_COLUMNS = tuple(f"{t}_f1" for t in TAGS) + ("A",)


def _short(value: str, table: dict) -> str:
    return table.get(value, value)


def render_table(rows: Sequence[dict]) -> str:
    """Grid of per-tag F1 and accuracy, one block per dataset, three decimals.

    Each row dict needs ``dataset``, ``feature``, ``model``, ``accuracy`` and
    ``<tag>_f1``. Rows inside a block are ordered exp/imp/char, then M1/M2.
    """
    feat_rank = {v: i for i, v in enumerate(("exp", "imp", "char"))}
    blocks: dict[str, list] = {}
    for row in rows:
        blocks.setdefault(str(row["dataset"]), []).append(row)
    label_w = 8
    out = []
    for dataset, block in blocks.items():
        block = sorted(block, key=lambda r: (feat_rank.get(_short(r["feature"], FEATURE_SHORT), 9),
                                             _short(r["model"], MODEL_SHORT)))
        head = f"D {dataset}"
        label_w = max(label_w, len(head), *(len(f"{_short(r['feature'], FEATURE_SHORT)} "
                                                f"{_short(r['model'], MODEL_SHORT)}") for r in block))
        out.append(head.ljust(label_w) + "".join(f"  {c:>6}" for c in TABLE_COLUMNS))
        for r in block:
            label = f"{_short(r['feature'], FEATURE_SHORT)} {_short(r['model'], MODEL_SHORT)}"
            vals = [float(r[f"{t}_f1"]) for t in TAGS] + [float(r["accuracy"])]
            out.append(label.ljust(label_w) + "".join(f"  {v:>6.3f}" for v in vals))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class TrainingDiverged(NumericalError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class Checkpoint:
    kind: M.ModelKind
    config: M.ModelConfig
    vocab_digest: str
    params: dict
    epoch: int
    seed: int
    version: int = 1


def train(config: TrainConfig, train_samples: Sequence[EncodedSample], kind: M.ModelKind,
          model_config: M.ModelConfig, vocab: Vocabulary,
          test_samples: Sequence[EncodedSample] | None = None, progress=None):
    """Train one model; returns ``(checkpoint, history)``.

    The seed drives three independent streams (initialisation, shuffling,
    dropout), so a run is fully determined by (seed, configs, corpus).
    History gets one eval-mode ``train`` record per epoch and a ``test`` record
    every ``eval_every`` epochs when test samples are given. Raises
    ``TrainingDiverged`` (carrying the partial history) on a non-finite loss.
    """
    config.validate()
    model_config.validate()
    if not train_samples:
        raise ConfigError("training split is empty")
    kind = M.ModelKind(kind)
    init_ss, shuffle_ss, drop_ss = np.random.SeedSequence(config.seed).spawn(3)
    params = M.init_model(kind, model_config, len(vocab), np.random.Generator(np.random.PCG64(init_ss)))
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_ss))
    drop_rng = np.random.Generator(np.random.PCG64(drop_ss))
    state = nn.AdamState()

    ids, mask, labels = M.stack_samples(train_samples)
    sample_ids = [s.id for s in train_samples]
    n = len(train_samples)
    history: list[MetricsRecord] = []
    best, stale = float("inf"), 0
    epoch = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n) if config.shuffle else np.arange(n)
        try:
            # overflow while diverging shows up as a non-finite loss, reported below
            with np.errstate(over="ignore", invalid="ignore"):
                for start in range(0, n, config.batch_size):
                    idx = order[start:start + config.batch_size]
                    _, grads = M.loss_and_grads_arrays(params, model_config, ids[idx], mask[idx], labels[idx],
                                                       drop_rng, True, [sample_ids[i] for i in idx])
                    nn.adam_step(params, grads, state, config.lr, config.beta1, config.beta2, config.adam_eps)
                rec = evaluate(params, model_config, train_samples, epoch, "train")
            if not np.isfinite(rec.loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
        except NumericalError as exc:
            raise TrainingDiverged(f"training diverged at epoch {epoch}: {exc}", history) from exc
        history.append(rec)
        monitored = rec
        if test_samples and epoch % config.eval_every == 0:
            monitored = evaluate(params, model_config, test_samples, epoch, "test")
            history.append(monitored)
        if progress is not None:
            progress(history)
        if config.patience:
            if monitored.loss < best:
                best, stale = monitored.loss, 0
            else:
                stale += 1
                if stale >= config.patience:
                    log.info("early stop at epoch %d", epoch)
                    break
    ckpt = Checkpoint(kind, model_config, vocab.digest, params, epoch, config.seed)
    return ckpt, history


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

MAGIC = b"SNTC"
FORMAT_VERSION = 1
_PRECISIONS = {"f8": "<f8", "f4": "<f4"}


def checkpoint_bytes(ckpt: Checkpoint, precision: str = "f8") -> bytes:
    """Serialize: magic, u32 version, u32 header length, JSON header, LE arrays.

    ``precision="f4"`` writes 32-bit arrays (smaller file, lossy).
    """
    if precision not in _PRECISIONS:
        raise ConfigError("precision must be 'f8' or 'f4'")
    expected = M.param_shapes(ckpt.kind, ckpt.config, ckpt.params["embedding"].shape[0])
    tensors = []
    for name, shape in expected.items():
        arr = ckpt.params[name]
        if arr.shape != shape:
            raise ConfigError(f"tensor {name} has shape {arr.shape}, expected {shape}")
        tensors.append([name, list(shape)])
    header = {
        "kind": M.ModelKind(ckpt.kind).value,
        "config": ckpt.config.to_dict(),
        "vocab_digest": ckpt.vocab_digest,
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "precision": precision,
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hbytes)), hbytes]
    dt = _PRECISIONS[precision]
    parts += [np.ascontiguousarray(ckpt.params[name], dtype=dt).tobytes() for name, _ in tensors]
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path, precision: str = "f8") -> None:
    atomic_write_bytes(path, checkpoint_bytes(ckpt, precision))


def parse_checkpoint(data: bytes, expected_digest: str | None = None, source="checkpoint") -> Checkpoint:
    if len(data) < 12:
        raise CheckpointTruncatedError(f"{source}: file too short for a checkpoint header")
    if data[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{source}: checkpoint version {version}, this build reads {FORMAT_VERSION}")
    if len(data) < 12 + hlen:
        raise CheckpointTruncatedError(f"{source}: header cut short")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        kind = M.ModelKind(header["kind"])
        config = M.ModelConfig.from_dict(header["config"])
        dt = np.dtype(_PRECISIONS[header.get("precision", "f8")])
        tensors = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from None
    if expected_digest is not None and header["vocab_digest"] != expected_digest:
        raise CheckpointDigestError(f"{source}: vocabulary digest mismatch (checkpoint was trained on another vocabulary)")
    offset = 12 + hlen
    params = {}
    for name, shape in tensors:
        count = int(np.prod(shape))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(data):
            raise CheckpointTruncatedError(f"{source}: tensor {name} cut short")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(shape)
        params[name] = arr.astype(np.float64)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{source}: {len(data) - offset} trailing bytes")
    vocab_size = params.get("embedding", np.zeros((0, 0))).shape[0]
    if {n: tuple(s) for n, s in tensors} != M.param_shapes(kind, config, vocab_size):
        raise CheckpointError(f"{source}: tensor layout does not match model kind {kind.value}")
    return Checkpoint(kind, config, header["vocab_digest"], params, int(header["epoch"]), int(header["seed"]), version)


def load_checkpoint(path, expected_digest: str | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expected_digest`` refuse one bound to another vocabulary."""
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_checkpoint(data, expected_digest, source=str(path))
