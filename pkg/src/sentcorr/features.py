"""Text to masked id sequences under the explicit, implicit and character feature modes."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, InputFormatError

log = logging.getLogger(__name__)

NONE_TOKEN = "none"
UNK_TOKEN = "<unk>"
NONE_ID = 0
UNK_ID = 1
SEQ_LEN_CAP = 1024


class SentimentLabel(IntEnum):
    """The six emotion classes. Index order is part of the checkpoint format."""

    LOVE = 0
    FEAR = 1
    JOY = 2
    SADNESS = 3
    SURPRISE = 4
    ANGER = 5

    @property
    def tag(self) -> str:
        return TAGS[self.value]

    @classmethod
    def from_tag(cls, tag: str) -> "SentimentLabel":
        try:
            return cls(TAGS.index(tag))
        except ValueError:
            raise InputFormatError(f"unknown sentiment tag {tag!r}, expected one of {', '.join(TAGS)}") from None


TAGS = ("gd", "zj", "gx", "ng", "xq", "fn")
NUM_CLASSES = len(TAGS)


class FeatureMode(str, Enum):
    EXPLICIT = "explicit"
    IMPLICIT = "implicit"
    CHARACTER = "character"


SynonymDictionary = Mapping[str, str]


def load_synonym_dict(path) -> dict[str, str]:
    """Read ``tag<TAB>word`` lines into a word -> tag map.

    Blank lines are skipped. When a word appears twice the first tag wins and
    a warning is logged.
    """
    table: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise InputFormatError("expected 'tag<TAB>word'", path=path, line=lineno)
            tag, word = parts[0].strip(), parts[1].strip()
            if word in table:
                if table[word] != tag:
                    log.warning("%s:%d: word %r already tagged %s, ignoring %s", path, lineno, word, table[word], tag)
                continue
            table[word] = tag
    return table


def tokenize(text: str, mode: FeatureMode | str, synonyms: SynonymDictionary | None = None) -> list[str]:
    mode = FeatureMode(mode)
    if mode is FeatureMode.CHARACTER:
        return [ch for ch in text if not ch.isspace()]
    words = text.split()
    if mode is FeatureMode.IMPLICIT:
        if synonyms is None:
            raise ConfigError("implicit feature mode needs a synonym dictionary")
        # words outside the dictionary pass through unchanged
        return [synonyms.get(w, w) for w in words]
    return words


@dataclass(frozen=True)
class Vocabulary:
    mode: FeatureMode
    tokens: tuple[str, ...]
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.tokens) < 2 or self.tokens[NONE_ID] != NONE_TOKEN or self.tokens[UNK_ID] != UNK_TOKEN:
            raise InputFormatError("vocabulary must start with 'none' (id 0) and '<unk>' (id 1)")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise InputFormatError("vocabulary contains duplicate tokens")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def to_text(self) -> str:
        return "".join(f"{i}\t{tok}\n" for i, tok in enumerate(self.tokens))

    @property
    def digest(self) -> str:
        """sha256 of the serialized vocabulary; checkpoints are bound to it."""
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        from ._io import atomic_write_text
        atomic_write_text(path, self.to_text())

    @classmethod
    def load(cls, path, mode: FeatureMode | str) -> "Vocabulary":
        tokens = []
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\r\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise InputFormatError("expected 'id<TAB>token'", path=path, line=lineno)
                try:
                    idx = int(parts[0])
                except ValueError:
                    raise InputFormatError(f"bad id {parts[0]!r}", path=path, line=lineno) from None
                if idx != len(tokens):
                    raise InputFormatError(f"ids must ascend from 0, got {idx}", path=path, line=lineno)
                tokens.append(parts[1])
        return cls(FeatureMode(mode), tuple(tokens))


def build_vocab(token_seqs: Iterable[Sequence[str]], mode: FeatureMode | str, min_count: int = 1) -> Vocabulary:
    """Vocabulary over already-tokenized training texts.

    Ids 0 and 1 are reserved; the rest go by descending frequency, ties broken
    lexicographically. Tokens seen fewer than ``min_count`` times are dropped.
    """
    if min_count < 1:
        raise ConfigError(f"min_count must be >= 1, got {min_count}")
    counts: Counter = Counter()
    n_docs = 0
    for seq in token_seqs:
        n_docs += 1
        counts.update(seq)
    if n_docs == 0:
        raise InputFormatError("cannot build a vocabulary from an empty training corpus")
    for reserved in (NONE_TOKEN, UNK_TOKEN):
        counts.pop(reserved, None)
    kept = sorted((tok for tok, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(FeatureMode(mode), (NONE_TOKEN, UNK_TOKEN, *kept))


@dataclass
class EncodedSample:
    id: str
    ids: np.ndarray   # (N,) int64
    mask: np.ndarray  # (N,) int8, a prefix of ones then zeros
    label: SentimentLabel | None
    dataset_key: str = ""


def encode(tokens: Sequence[str], vocab: Vocabulary, n: int, *, sample_id: str = "",
           label: SentimentLabel | None = None, dataset_key: str = "",
           stats: Counter | None = None) -> EncodedSample:
    """Map tokens to ids, pad with the none id to ``n`` or keep the first ``n``.

    Truncations are tallied in ``stats["truncated"]`` when a counter is given.
    """
    if n < 1:
        raise ConfigError(f"sequence length must be >= 1, got {n}")
    ids = np.zeros(n, dtype=np.int64)
    mask = np.zeros(n, dtype=np.int8)
    if len(tokens) > n and stats is not None:
        stats["truncated"] += 1
    kept = tokens[:n]
    ids[:len(kept)] = [vocab.id_of(t) for t in kept]
    mask[:len(kept)] = 1
    return EncodedSample(sample_id, ids, mask, label, dataset_key)


def default_seq_len(token_seqs: Iterable[Sequence[str]], cap: int = SEQ_LEN_CAP) -> int:
    longest = max((len(s) for s in token_seqs), default=1)
    return max(1, min(longest, cap))


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------

SPLITS = ("train", "test")


@dataclass
class RawRecord:
    id: str
    text: str
    label: SentimentLabel
    split: str


@dataclass
class Corpus:
    records: list[RawRecord]
    dataset_key: str = ""

    def split(self, name: str) -> list[RawRecord]:
        return [r for r in self.records if r.split == name]


def load_corpus(path, dataset_key: str | None = None) -> Corpus:
    """Read a JSON-lines corpus (fields id, text, label, split)."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise InputFormatError(f"invalid JSON ({exc.msg})", path=path, line=lineno) from None
            if not isinstance(obj, dict):
                raise InputFormatError("expected a JSON object", path=path, line=lineno)
            missing = [k for k in ("id", "text", "label", "split") if k not in obj]
            if missing:
                raise InputFormatError(f"missing field(s) {', '.join(missing)}", path=path, line=lineno)
            if not isinstance(obj["text"], str):
                raise InputFormatError("field 'text' must be a string", path=path, line=lineno)
            if obj["split"] not in SPLITS:
                raise InputFormatError(f"split must be train or test, got {obj['split']!r}", path=path, line=lineno)
            try:
                label = SentimentLabel.from_tag(obj["label"])
            except InputFormatError as exc:
                raise InputFormatError(str(exc), path=path, line=lineno) from None
            records.append(RawRecord(str(obj["id"]), obj["text"], label, obj["split"]))
    key = dataset_key if dataset_key is not None else Path(path).stem
    return Corpus(records, key)


def write_corpus(corpus: Corpus, path) -> None:
    from ._io import atomic_write_text
    lines = [json.dumps({"id": r.id, "text": r.text, "label": r.label.tag, "split": r.split}, ensure_ascii=False)
             for r in corpus.records]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def encode_records(records: Sequence[RawRecord], vocab: Vocabulary, n: int,
                   synonyms: SynonymDictionary | None = None, dataset_key: str = "",
                   stats: Counter | None = None) -> list[EncodedSample]:
    return [
        encode(tokenize(r.text, vocab.mode, synonyms), vocab, n, sample_id=r.id, label=r.label,
               dataset_key=dataset_key, stats=stats)
        for r in records
    ]
