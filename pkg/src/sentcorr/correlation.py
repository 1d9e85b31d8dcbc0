"""Confusion matrices per (dataset, feature, model) combination, their
thresholded 0/1 versions, and the vote across combinations.

Orientation throughout: rows are the *predicted* class ``a``, columns the
*gold* class ``b``; ``C[a, b]`` is the fraction of gold-``b`` samples that
were predicted as ``a``, so every column with gold samples sums to one.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_write_text
from .errors import ConfigError, InputFormatError
from .features import NUM_CLASSES, TAGS, SentimentLabel

log = logging.getLogger(__name__)

LOG_FIELDS = ("sample_id", "gold", "predicted", "dataset", "feature", "model")

ComboKey = tuple  # (dataset, feature, model)


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    gold: SentimentLabel
    predicted: SentimentLabel
    dataset: str
    feature: str
    model: str

    @property
    def combo(self) -> ComboKey:
        return (self.dataset, self.feature, self.model)


def combo_name(combo: ComboKey) -> str:
    return "_".join(combo)


def write_prediction_log(records: Iterable[PredictionRecord], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in records:
        w.writerow([r.sample_id, r.gold.tag, r.predicted.tag, r.dataset, r.feature, r.model])
    atomic_write_text(path, buf.getvalue())


def read_prediction_log(path) -> list[PredictionRecord]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != LOG_FIELDS:
            raise InputFormatError(f"header must be {','.join(LOG_FIELDS)}", path=path, line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(LOG_FIELDS):
                raise InputFormatError(f"expected {len(LOG_FIELDS)} fields, got {len(row)}", path=path, line=lineno)
            try:
                gold, pred = SentimentLabel.from_tag(row[1]), SentimentLabel.from_tag(row[2])
            except InputFormatError as exc:
                raise InputFormatError(str(exc), path=path, line=lineno) from None
            out.append(PredictionRecord(row[0], gold, pred, row[3], row[4], row[5]))
    return out


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # int (6, 6), counts[a, b] = #{gold=b, predicted=a}
    C: np.ndarray       # column-normalised counts
    combo: ComboKey
    undefined: tuple = ()  # tags with no gold samples (all-zero column)


def confusion_from_counts(counts: np.ndarray, combo: ComboKey = ("", "", "")) -> ConfusionMatrix:
    counts = np.asarray(counts, dtype=np.int64)
    totals = counts.sum(axis=0)
    C = np.divide(counts, totals, out=np.zeros(counts.shape), where=totals > 0)
    undefined = tuple(TAGS[b] for b in range(NUM_CLASSES) if totals[b] == 0)
    return ConfusionMatrix(counts, C, tuple(combo), undefined)


def confusion(records: Sequence[PredictionRecord]) -> ConfusionMatrix:
    if not records:
        raise ConfigError("confusion needs at least one prediction record")
    combos = {r.combo for r in records}
    if len(combos) != 1:
        raise InputFormatError(f"records mix {len(combos)} combinations: {sorted(combos)[:3]}")
    counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for r in records:
        counts[int(r.predicted), int(r.gold)] += 1
    return confusion_from_counts(counts, combos.pop())


def group_by_combo(records: Iterable[PredictionRecord]) -> dict[ComboKey, list[PredictionRecord]]:
    groups: dict = {}
    for r in records:
        groups.setdefault(r.combo, []).append(r)
    return groups


@dataclass
class BinaryConfusion:
    Cr: np.ndarray  # int8 (6, 6) of 0/1
    rule: str
    combo: ComboKey = ("", "", "")


def _matrix_of(m) -> tuple[np.ndarray, ComboKey]:
    if isinstance(m, ConfusionMatrix):
        return m.C, m.combo
    return np.asarray(m, dtype=float), ("", "", "")


def binarize_fixed(cm: ConfusionMatrix | np.ndarray, theta: float) -> BinaryConfusion:
    """``Cr = 1`` exactly where ``C > theta`` (strict)."""
    if not 0.0 <= theta <= 1.0:
        raise ConfigError(f"theta must lie in [0, 1], got {theta}")
    C, combo = _matrix_of(cm)
    return BinaryConfusion((C > theta).astype(np.int8), f"theta={theta:g}", combo)


def binarize_topk(cm: ConfusionMatrix | np.ndarray, k: int = 3, include_diagonal: bool = False) -> BinaryConfusion:
    """Mark the ``k`` largest strictly positive entries.

    Diagonal entries are skipped unless ``include_diagonal``. Ties are broken
    by (row, column) order. Asking for more entries than there are positive
    candidates selects all of them and logs a warning.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    C, combo = _matrix_of(cm)
    cand = [(-C[a, b], a, b) for a in range(C.shape[0]) for b in range(C.shape[1])
            if C[a, b] > 0 and (include_diagonal or a != b)]
    if k > len(cand):
        log.warning("top-%d requested but only %d positive candidate entries%s", k, len(cand),
                    f" in {combo_name(combo)}" if any(combo) else "")
    Cr = np.zeros(C.shape, dtype=np.int8)
    for _, a, b in sorted(cand)[:k]:
        Cr[a, b] = 1
    return BinaryConfusion(Cr, f"top{k}" + ("+diag" if include_diagonal else ""), combo)


@dataclass
class VoteResult:
    T: np.ndarray
    quorum: int
    combos: list = field(default_factory=list)
    support: np.ndarray | None = None  # how many inputs had Cr = 1 at each entry


def vote(binaries: Sequence[BinaryConfusion | np.ndarray], quorum: int | None = None) -> VoteResult:
    """``T[a, b] = 1`` iff at least ``quorum`` inputs have ``Cr[a, b] = 1``.

    The default quorum is the number of inputs, i.e. the conjunction of all.
    """
    if not binaries:
        raise ConfigError("vote needs at least one binary matrix")
    mats = [b.Cr if isinstance(b, BinaryConfusion) else np.asarray(b) for b in binaries]
    n = len(mats)
    if quorum is None:
        quorum = n
    if not 1 <= quorum <= n:
        raise ConfigError(f"quorum must be in 1..{n}, got {quorum}")
    support = np.sum(np.stack(mats).astype(np.int64), axis=0)
    combos = [b.combo for b in binaries if isinstance(b, BinaryConfusion)]
    return VoteResult((support >= quorum).astype(np.int8), quorum, combos, support)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def glyph(v: float) -> str:
    if v <= 0:
        return "."
    if v <= 0.25:
        return "░"
    if v <= 0.5:
        return "▒"
    if v <= 0.75:
        return "▓"
    return "█"


def matrix_csv(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["predicted\\gold", *TAGS])
    for a, tag in enumerate(TAGS):
        w.writerow([tag, *(repr(float(v)) for v in cm.C[a])])
    return buf.getvalue()


def heatmap(cm: ConfusionMatrix) -> str:
    lines = ["pred\\gold " + " ".join(f"{t:>2}" for t in TAGS)]
    for a, tag in enumerate(TAGS):
        lines.append(f"{tag:<9} " + " ".join(f"{glyph(v):>2}" for v in cm.C[a]))
    return "\n".join(lines)


def ranked_pairs(result: VoteResult) -> list[tuple[str, str, int]]:
    """Off-diagonal voted pairs as ``(gold, predicted, support)``, most supported first."""
    pairs = []
    for a in range(NUM_CLASSES):
        for b in range(NUM_CLASSES):
            if a != b and result.T[a, b]:
                pairs.append((TAGS[b], TAGS[a], int(result.support[a, b]), b, a))
    pairs.sort(key=lambda p: (-p[2], p[3], p[4]))
    return [p[:3] for p in pairs]


@dataclass
class CorrelationReport:
    matrix_csv: dict  # combo -> CSV text
    heatmaps: dict    # combo -> ASCII heatmap
    vote_text: str

    def write(self, outdir) -> list[Path]:
        outdir = Path(outdir)
        written = []
        for combo, text in self.matrix_csv.items():
            p = outdir / f"confusion_{combo_name(combo)}.csv"
            atomic_write_text(p, text)
            written.append(p)
        p = outdir / "vote_report.md"
        atomic_write_text(p, self.vote_text)
        written.append(p)
        return written


def correlation_report(matrices: Sequence[ConfusionMatrix], votes: Sequence[tuple[str, VoteResult]] | VoteResult,
                       binaries: Sequence[BinaryConfusion] = ()) -> CorrelationReport:
    """Per-combination CSV matrices and heatmaps plus a markdown vote report.

    ``votes`` is a single result or ``(title, result)`` pairs, e.g. one vote
    over objective datasets and one over subjective ones.
    """
    if not matrices:
        raise ConfigError("correlation_report needs at least one matrix")
    if isinstance(votes, VoteResult):
        votes = [("all combinations", votes)]
    rule = {b.combo: b.rule for b in binaries}
    csvs = {cm.combo: matrix_csv(cm) for cm in matrices}
    maps = {cm.combo: heatmap(cm) for cm in matrices}
    out = ["# Inter-sentiment confusion vote", ""]
    for title, res in votes:
        out += [f"## {title}", "",
                f"{len(res.combos) or 'n/a'} combination(s), quorum {res.quorum}.", ""]
        pairs = ranked_pairs(res)
        if pairs:
            out += ["| gold (e_b) | predicted as (e_a) | combos |", "|---|---|---|"]
            out += [f"| {g} | {p} | {s} |" for g, p, s in pairs]
        else:
            out.append("No off-diagonal pair passed the vote.")
        out.append("")
    out += ["## Confusion matrices", "",
            "Rows: predicted tag. Columns: gold tag. Glyphs: `.` 0, `░` <=0.25, `▒` <=0.5, `▓` <=0.75, `█` <=1.", ""]
    for cm in matrices:
        extra = f" ({rule[cm.combo]})" if cm.combo in rule else ""
        out += [f"### {combo_name(cm.combo)}{extra}", "", "```", maps[cm.combo], "```", ""]
        if cm.undefined:
            out += [f"No gold samples for: {', '.join(cm.undefined)}.", ""]
    return CorrelationReport(csvs, maps, "\n".join(out))
