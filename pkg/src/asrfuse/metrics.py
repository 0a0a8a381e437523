"""Edit-distance based scoring: WER breakdowns, pairwise CER, corpus reports.

All distances use unit costs.  Operation counts are deterministic: the
traceback prefers match > substitution > deletion > insertion, the same
rule the alignment module applies when it materializes columns.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

from .core import DEFAULT_NORMALIZER, Hypothesis


@dataclass(frozen=True)
class EditBreakdown:
    """Operation counts for transforming a reference into a hypothesis."""

    hits: int
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    def __post_init__(self) -> None:
        if min(self.hits, self.substitutions, self.deletions, self.insertions) < 0:
            raise ValueError("negative operation count")
        if self.hits + self.substitutions + self.deletions != self.ref_len:
            raise ValueError(
                f"hits+subs+dels must equal ref_len: "
                f"{self.hits}+{self.substitutions}+{self.deletions} != {self.ref_len}"
            )

    @property
    def distance(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Plain edit distance between two sequences, two-row rolling DP."""
    if a == b:
        return 0
    la, lb = len(a), len(b)
    if la == 0:
        return lb
    if lb == 0:
        return la
    prev = list(range(lb + 1))
    for i in range(1, la + 1):
        ai = a[i - 1]
        cur = [i] + [0] * lb
        for j in range(1, lb + 1):
            d = prev[j - 1] + (ai != b[j - 1])
            up = prev[j] + 1
            if up < d:
                d = up
            left = cur[j - 1] + 1
            if left < d:
                d = left
            cur[j] = d
        prev = cur
    return prev[lb]


def edit_distance(ref: Sequence, hyp: Sequence) -> EditBreakdown:
    """Full breakdown of the minimum edit script turning *ref* into *hyp*."""
    lr, lh = len(ref), len(hyp)
    # full table kept for the traceback
    table = [list(range(lh + 1))]
    for i in range(1, lr + 1):
        ri = ref[i - 1]
        prev = table[i - 1]
        cur = [i] + [0] * lh
        for j in range(1, lh + 1):
            d = prev[j - 1] + (ri != hyp[j - 1])
            up = prev[j] + 1
            if up < d:
                d = up
            left = cur[j - 1] + 1
            if left < d:
                d = left
            cur[j] = d
        table.append(cur)
    hits = subs = dels = ins = 0
    i, j = lr, lh
    while i > 0 or j > 0:
        cell = table[i][j]
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and cell == table[i - 1][j - 1]:
            hits += 1
            i -= 1
            j -= 1
        elif i > 0 and j > 0 and ref[i - 1] != hyp[j - 1] and cell == table[i - 1][j - 1] + 1:
            subs += 1
            i -= 1
            j -= 1
        elif i > 0 and cell == table[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditBreakdown(hits=hits, substitutions=subs, deletions=dels, insertions=ins, ref_len=lr)


@dataclass(frozen=True)
class WerResult:
    """Word error rate with its breakdown.

    undefined_ref marks the empty-reference, non-empty-hypothesis case,
    where the ratio has no denominator; value is +inf there.
    """

    value: float
    breakdown: EditBreakdown
    undefined_ref: bool = False

    def __float__(self) -> float:
        return self.value


def wer(ref: Sequence[str], hyp: Sequence[str]) -> WerResult:
    bd = edit_distance(ref, hyp)
    if len(ref) == 0:
        if len(hyp) == 0:
            return WerResult(value=0.0, breakdown=bd)
        return WerResult(value=float("inf"), breakdown=bd, undefined_ref=True)
    return WerResult(value=bd.distance / len(ref), breakdown=bd)


def _as_text(x: Hypothesis | str) -> str:
    # a Hypothesis is already normalized by whatever normalizer built it;
    # raw strings go through the default one
    return x.text if isinstance(x, Hypothesis) else DEFAULT_NORMALIZER.text(x)


def cer_pair(a: Hypothesis | str, b: Hypothesis | str, *, norm: str = "max") -> float:
    """Character error rate between two transcripts after normalization.

    Characters include the single spaces between tokens.  norm="max"
    divides by the longer side and is symmetric; norm="ref_first"
    divides by the first argument's length (ablation mode).  Two empty
    texts score 0.
    """
    ta, tb = _as_text(a), _as_text(b)
    dist = levenshtein(ta, tb)
    if norm == "max":
        denom = max(len(ta), len(tb))
    elif norm == "ref_first":
        denom = len(ta)
    else:
        raise ValueError(f"unknown cer norm {norm!r}")
    if denom == 0:
        return 0.0 if dist == 0 else float("inf")
    return dist / denom


@dataclass
class _Cell:
    errors: int = 0
    ref_len: int = 0
    utts: int = 0
    missing: int = 0

    def merge(self, other: _Cell) -> None:
        self.errors += other.errors
        self.ref_len += other.ref_len
        self.utts += other.utts
        self.missing += other.missing

    @property
    def wer_pct(self) -> str:
        if self.ref_len == 0:
            return "0.00"
        return f"{100.0 * self.errors / self.ref_len:.2f}"


@dataclass(frozen=True)
class ReportRow:
    dataset: str
    system: str
    wer_pct: str
    errors: int
    ref_len: int
    utts: int
    missing: int


@dataclass(frozen=True)
class CorpusReport:
    rows: tuple[ReportRow, ...]
    skipped_no_ref: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["dataset", "system", "wer_pct", "errors", "ref_len", "utts", "missing"])
        for row in self.rows:
            writer.writerow(
                [row.dataset, row.system, row.wer_pct, row.errors, row.ref_len, row.utts, row.missing]
            )
        return buf.getvalue()

    def to_markdown(self) -> str:
        """Datasets as rows, systems as columns, WER percentage cells."""
        systems = sorted({r.system for r in self.rows})
        datasets = sorted({r.dataset for r in self.rows})
        cells = {(r.dataset, r.system): r.wer_pct for r in self.rows}
        lines = ["| dataset | " + " | ".join(systems) + " |"]
        lines.append("|" + " --- |" * (len(systems) + 1))
        for ds in datasets:
            vals = [cells.get((ds, sys), "-") for sys in systems]
            lines.append(f"| {ds} | " + " | ".join(vals) + " |")
        return "\n".join(lines) + "\n"


class ReportAccumulator:
    """Micro-averaged WER per (dataset, system); merging partials is exact.

    Error and reference-token counts are integers, so splitting a corpus
    into shards, accumulating each, and merging gives byte-identical
    reports to a single pass.
    """

    def __init__(self) -> None:
        self._cells: dict[tuple[str, str], _Cell] = {}
        self.skipped_no_ref = 0

    def add(
        self,
        dataset: str,
        system: str,
        ref: Sequence[str] | None,
        hyp: Sequence[str] | None,
    ) -> None:
        if ref is None or len(ref) == 0:
            self.skipped_no_ref += 1
            return
        cell = self._cells.setdefault((dataset, system), _Cell())
        if hyp is None:
            cell.missing += 1
            return
        bd = edit_distance(ref, hyp)
        cell.errors += bd.distance
        cell.ref_len += bd.ref_len
        cell.utts += 1

    def merge(self, other: ReportAccumulator) -> None:
        for key, cell in other._cells.items():
            self._cells.setdefault(key, _Cell()).merge(cell)
        self.skipped_no_ref += other.skipped_no_ref

    def report(self, *, totals: bool = True) -> CorpusReport:
        rows: list[ReportRow] = []
        for (dataset, system) in sorted(self._cells):
            cell = self._cells[(dataset, system)]
            rows.append(
                ReportRow(dataset, system, cell.wer_pct, cell.errors, cell.ref_len, cell.utts, cell.missing)
            )
        if totals and len({ds for ds, _ in self._cells}) > 1:
            by_system: dict[str, _Cell] = {}
            for (_, system), cell in self._cells.items():
                by_system.setdefault(system, _Cell()).merge(cell)
            for system in sorted(by_system):
                cell = by_system[system]
                rows.append(
                    ReportRow(
                        "TOTAL", system, cell.wer_pct, cell.errors, cell.ref_len, cell.utts, cell.missing
                    )
                )
        return CorpusReport(rows=tuple(rows), skipped_no_ref=self.skipped_no_ref)


def corpus_report(
    rows: Iterable[tuple[str, str, Sequence[str] | None, Sequence[str] | None]],
    *,
    totals: bool = True,
) -> CorpusReport:
    """One-shot report over an iterable of (dataset, system, ref, hyp) rows."""
    acc = ReportAccumulator()
    for dataset, system, ref, hyp in rows:
        acc.add(dataset, system, ref, hyp)
    return acc.report(totals=totals)
