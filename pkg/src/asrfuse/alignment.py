"""Word-level alignment and confusion networks.

align_pair produces a deterministic minimum-cost alignment of two token
sequences; mark_confusion_regions folds it into a segment sequence of
exact-match anchors and confusion regions; align_third threads a third
hypothesis through those segments, populating each region's third
alternative and demoting anchors the third source disagrees with.

Determinism rules, applied everywhere:
  * traceback ties break match > substitution > deletion > insertion;
  * the third pass never spends an edit on an anchor that a region
    could absorb at equal cost;
  * remaining span ties go to the earlier segment (left-greedy).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

from .core import validate_token

MATCH = "match"
SUB = "sub"
DEL = "del"
INS = "ins"

_OPS = (MATCH, SUB, DEL, INS)

# Characters reserved by the rendering grammar; tokens carrying them are
# rejected when a network is built so rendered output always parses back.
RESERVED_CHARS = frozenset("{}<>[]|")


class AlignmentError(ValueError):
    """Contract violation in alignment inputs."""


def _check_net_token(tok: str) -> str:
    validate_token(tok)
    bad = RESERVED_CHARS.intersection(tok)
    if bad:
        raise AlignmentError(f"token {tok!r} contains reserved characters {sorted(bad)}")
    return tok


@dataclass(frozen=True)
class AlignmentColumn:
    """One aligned position: a-side token, b-side token, and the edit op."""

    a: str | None
    b: str | None
    op: str

    def __post_init__(self) -> None:
        if self.op not in _OPS:
            raise AlignmentError(f"unknown op {self.op!r}")
        if self.op in (MATCH, SUB) and (self.a is None or self.b is None):
            raise AlignmentError(f"{self.op} column needs both tokens")
        if self.op == MATCH and self.a != self.b:
            raise AlignmentError(f"match column with differing tokens {self.a!r} != {self.b!r}")
        if self.op == SUB and self.a == self.b:
            raise AlignmentError(f"sub column with equal tokens {self.a!r}")
        if self.op == DEL and (self.a is None or self.b is not None):
            raise AlignmentError("del column must hold only an a-side token")
        if self.op == INS and (self.b is None or self.a is not None):
            raise AlignmentError("ins column must hold only a b-side token")


@dataclass(frozen=True)
class PairAlignment:
    columns: tuple[AlignmentColumn, ...]

    @property
    def cost(self) -> int:
        return sum(1 for col in self.columns if col.op != MATCH)

    def a_tokens(self) -> tuple[str, ...]:
        return tuple(col.a for col in self.columns if col.a is not None)

    def b_tokens(self) -> tuple[str, ...]:
        return tuple(col.b for col in self.columns if col.b is not None)


@dataclass(frozen=True)
class Anchor:
    """A token every aligned source agrees on."""

    token: str

    def __post_init__(self) -> None:
        _check_net_token(self.token)


@dataclass(frozen=True)
class Region:
    """A span where sources disagree; alternatives may be empty tuples.

    alt3 is None until a third hypothesis has been aligned in; () means
    the third source proposed nothing for the span.
    """

    alt1: tuple[str, ...]
    alt2: tuple[str, ...]
    alt3: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        for alt in (self.alt1, self.alt2) if self.alt3 is None else (self.alt1, self.alt2, self.alt3):
            for tok in alt:
                _check_net_token(tok)
        present = [self.alt1, self.alt2] if self.alt3 is None else [self.alt1, self.alt2, self.alt3]
        if all(alt == present[0] for alt in present[1:]):
            raise AlignmentError(
                f"region alternatives are all identical ({present[0]!r}); this should be anchors"
            )


Segment = Union[Anchor, Region]


@dataclass(frozen=True)
class ConfusionNetwork:
    """Ordered anchors and regions; the unit the renderer and arbiter consume."""

    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        prev_region = False
        third: set[bool] = set()
        for seg in self.segments:
            if isinstance(seg, Region):
                if prev_region:
                    raise AlignmentError("adjacent regions must be merged")
                prev_region = True
                third.add(seg.alt3 is not None)
            elif isinstance(seg, Anchor):
                prev_region = False
            else:
                raise AlignmentError(f"segment of unexpected type {type(seg).__name__}")
        if len(third) > 1:
            raise AlignmentError("alt3 must be populated on every region or on none")

    @property
    def has_third(self) -> bool:
        """True when every region carries a third alternative (anchors-only counts)."""
        return all(seg.alt3 is not None for seg in self.segments if isinstance(seg, Region))

    def regions(self) -> list[Region]:
        return [seg for seg in self.segments if isinstance(seg, Region)]

    def first_tokens(self) -> tuple[str, ...]:
        return self._side_tokens(1)

    def second_tokens(self) -> tuple[str, ...]:
        return self._side_tokens(2)

    def third_tokens(self) -> tuple[str, ...]:
        if not self.has_third:
            raise AlignmentError("network has no third alternatives yet")
        return self._side_tokens(3)

    def _side_tokens(self, side: int) -> tuple[str, ...]:
        out: list[str] = []
        for seg in self.segments:
            if isinstance(seg, Anchor):
                out.append(seg.token)
            else:
                out.extend((seg.alt1, seg.alt2, seg.alt3)[side - 1])
        return tuple(out)


def align_pair(a: Sequence[str], b: Sequence[str]) -> PairAlignment:
    """Minimum-cost alignment of token sequences *a* and *b* with unit costs.

    The backward traceback applies the match > sub > del > ins tie-break,
    which makes the resulting column list (not just its cost) a pure
    function of the inputs.
    """
    la, lb = len(a), len(b)
    table = [list(range(lb + 1))]
    for i in range(1, la + 1):
        ai = a[i - 1]
        prev = table[i - 1]
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
        table.append(cur)
    cols: list[AlignmentColumn] = []
    i, j = la, lb
    while i > 0 or j > 0:
        cell = table[i][j]
        if i > 0 and j > 0 and a[i - 1] == b[j - 1] and cell == table[i - 1][j - 1]:
            cols.append(AlignmentColumn(a[i - 1], b[j - 1], MATCH))
            i -= 1
            j -= 1
        elif i > 0 and j > 0 and a[i - 1] != b[j - 1] and cell == table[i - 1][j - 1] + 1:
            cols.append(AlignmentColumn(a[i - 1], b[j - 1], SUB))
            i -= 1
            j -= 1
        elif i > 0 and cell == table[i - 1][j] + 1:
            cols.append(AlignmentColumn(a[i - 1], None, DEL))
            i -= 1
        else:
            cols.append(AlignmentColumn(None, b[j - 1], INS))
            j -= 1
    cols.reverse()
    return PairAlignment(columns=tuple(cols))


def mark_confusion_regions(alignment: PairAlignment) -> ConfusionNetwork:
    """Fold an alignment into anchors (match columns) and maximal regions.

    Maximality of the non-match runs guarantees no two regions end up
    adjacent, and minimality of the alignment guarantees a region's two
    alternatives are never the same token list.
    """
    segments: list[Segment] = []
    run_a: list[str] = []
    run_b: list[str] = []
    in_run = False

    def flush() -> None:
        nonlocal in_run
        if in_run:
            segments.append(Region(alt1=tuple(run_a), alt2=tuple(run_b)))
            run_a.clear()
            run_b.clear()
            in_run = False

    for col in alignment.columns:
        if col.op == MATCH:
            flush()
            segments.append(Anchor(col.a))
        else:
            in_run = True
            if col.a is not None:
                run_a.append(col.a)
            if col.b is not None:
                run_b.append(col.b)
    flush()
    return ConfusionNetwork(segments=tuple(segments))


# Costs below pack (edit_ops, ops_spent_on_anchors) into one int so a
# single min drives both objectives, edit cost dominating.
_SHIFT = 1 << 20
_INF = 1 << 60


def _branches(seg: Segment) -> tuple[tuple[tuple[str, ...], ...], bool]:
    if isinstance(seg, Anchor):
        return ((seg.token,),), True
    return (seg.alt1, seg.alt2), False


def assign_third_spans(
    segments: Sequence[Segment], c: Sequence[str]
) -> tuple[list[tuple[int, int]], int]:
    """Split *c* into one contiguous span per segment, minimizing edit cost.

    A span's cost against an anchor is its edit distance to the anchor
    token; against a region, the smaller edit distance to either
    alternative.  Ties prefer keeping anchors untouched, then the
    left-greedy split.  Returns ([(start, end)...], total_edit_cost).
    """
    n = len(c)
    m = len(segments)
    if m == 0:
        if n:
            raise AlignmentError("cannot assign tokens to an empty network")
        return [], 0

    # suffix[k][j]: packed cost of aligning segments k.. against c[j:]
    suffix: list[list[int]] = [[]] * (m + 1)
    last = [_INF] * (n + 1)
    last[n] = 0
    suffix[m] = last
    for k in range(m - 1, -1, -1):
        branches, is_anchor = _branches(segments[k])
        op = _SHIFT + 1 if is_anchor else _SHIFT
        nxt = suffix[k + 1]
        best = [_INF] * (n + 1)
        for br in branches:
            # row for position len(br): exit now or absorb trailing c tokens
            row = [0] * (n + 1)
            row[n] = nxt[n]
            for j in range(n - 1, -1, -1):
                v = row[j + 1] + op
                if nxt[j] < v:
                    v = nxt[j]
                row[j] = v
            for p in range(len(br) - 1, -1, -1):
                tok = br[p]
                prev = row
                row = [0] * (n + 1)
                row[n] = prev[n] + op
                for j in range(n - 1, -1, -1):
                    v = prev[j + 1] + (0 if c[j] == tok else op)
                    alt = prev[j] + op
                    if alt < v:
                        v = alt
                    alt = row[j + 1] + op
                    if alt < v:
                        v = alt
                    row[j] = v
            for j in range(n + 1):
                if row[j] < best[j]:
                    best[j] = row[j]
        suffix[k] = best

    spans: list[tuple[int, int]] = []
    start = 0
    for k in range(m):
        branches, is_anchor = _branches(segments[k])
        op = _SHIFT + 1 if is_anchor else _SHIFT
        target = suffix[k][start]
        nxt = suffix[k + 1]
        width = n - start + 1
        seg_cost = [_INF] * width
        for br in branches:
            row = [i * op for i in range(width)]
            for p in range(1, len(br) + 1):
                tok = br[p - 1]
                new = [0] * width
                new[0] = row[0] + op
                for idx in range(1, width):
                    v = row[idx - 1] + (0 if c[start + idx - 1] == tok else op)
                    alt = row[idx] + op
                    if alt < v:
                        v = alt
                    alt = new[idx - 1] + op
                    if alt < v:
                        v = alt
                    new[idx] = v
                row = new
            for idx in range(width):
                if row[idx] < seg_cost[idx]:
                    seg_cost[idx] = row[idx]
        for idx in range(width - 1, -1, -1):
            if seg_cost[idx] + nxt[start + idx] == target:
                spans.append((start, start + idx))
                start += idx
                break
        else:  # pragma: no cover - suffix table guarantees a witness
            raise AssertionError("span reconstruction lost the optimal path")
    assert start == n
    return spans, suffix[0][0] >> 20


def align_third(net: ConfusionNetwork, c: Sequence[str]) -> ConfusionNetwork:
    """Thread hypothesis *c* through *net*, filling every region's alt3.

    Anchors that *c* reproduces exactly stay anchors; an anchor it
    diverges from becomes a region whose first two alternatives are the
    anchor token.  Adjacent regions produced that way are merged so the
    network invariant holds.
    """
    if any(seg.alt3 is not None for seg in net.segments if isinstance(seg, Region)):
        raise AlignmentError("network already carries third alternatives")
    for tok in c:
        _check_net_token(tok)
    if not net.segments:
        if not c:
            return net
        return ConfusionNetwork(segments=(Region(alt1=(), alt2=(), alt3=tuple(c)),))

    spans, _ = assign_third_spans(net.segments, c)
    merged: list[Segment] = []
    for seg, (start, end) in zip(net.segments, spans):
        span = tuple(c[start:end])
        if isinstance(seg, Anchor):
            if span == (seg.token,):
                merged.append(seg)
                continue
            new = Region(alt1=(seg.token,), alt2=(seg.token,), alt3=span)
        else:
            new = Region(alt1=seg.alt1, alt2=seg.alt2, alt3=span)
        if merged and isinstance(merged[-1], Region):
            prev = merged[-1]
            merged[-1] = Region(
                alt1=prev.alt1 + new.alt1, alt2=prev.alt2 + new.alt2, alt3=prev.alt3 + new.alt3
            )
        else:
            merged.append(new)
    return ConfusionNetwork(segments=tuple(merged))
