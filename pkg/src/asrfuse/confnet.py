"""Textual confusion-network rendering and its inverse parser.

Grammar, space-separated items:

    net    := item (" " item)*
    item   := token | region
    region := "{" alts "}" "|" "<" alts ">" "|" "[" alts "]"
    alts   := token (" " token)* | ""

Anchors render as bare tokens; a region renders its three alternatives
in braces, angle brackets, and square brackets.  Alternatives may be
empty.  Tokens never contain the bracket characters (enforced when a
network is constructed), so parsing is unambiguous.
"""

from __future__ import annotations

from .alignment import Anchor, AlignmentError, ConfusionNetwork, Region

RESERVED = "{}<>[]|"


class ConfnetParseError(ValueError):
    """Parse failure with the byte offset where it happened."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"offset {offset}: {message}")
        self.offset = offset


def render(net: ConfusionNetwork, *, omit_missing_third: bool = False) -> str:
    """Render *net* to its textual form with canonical single spacing.

    Networks whose regions lack a third alternative only render when
    omit_missing_third is set, and then drop the "|[...]" slot; that
    two-slot form is for inspection and is not parseable.
    """
    parts: list[str] = []
    for seg in net.segments:
        if isinstance(seg, Anchor):
            parts.append(seg.token)
            continue
        first = "{" + " ".join(seg.alt1) + "}"
        second = "<" + " ".join(seg.alt2) + ">"
        if seg.alt3 is None:
            if not omit_missing_third:
                raise AlignmentError(
                    "region lacks a third alternative; align a third hypothesis "
                    "or render with omit_missing_third=True"
                )
            parts.append(f"{first}|{second}")
        else:
            third = "[" + " ".join(seg.alt3) + "]"
            parts.append(f"{first}|{second}|{third}")
    return " ".join(parts)


def _scan_alts(text: str, pos: int, closer: str) -> tuple[tuple[str, ...], int]:
    """Read alternative tokens up to *closer*, returning (tokens, pos past closer)."""
    end = text.find(closer, pos)
    if end < 0:
        raise ConfnetParseError(f"unterminated alternative, expected {closer!r}", len(text))
    inner = text[pos:end]
    for ch in inner:
        if ch in RESERVED:
            raise ConfnetParseError(
                f"reserved character {ch!r} inside alternative", pos + inner.index(ch)
            )
    return tuple(inner.split()), end + 1


def _expect(text: str, pos: int, literal: str) -> int:
    if not text.startswith(literal, pos):
        found = text[pos : pos + 1] or "end of input"
        raise ConfnetParseError(f"expected {literal!r}, found {found!r}", pos)
    return pos + len(literal)


def parse(text: str) -> ConfusionNetwork:
    """Parse a rendered confusion network back into its structured form."""
    segments: list[Anchor | Region] = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        start = pos
        ch = text[pos]
        if ch == "{":
            alt1, pos = _scan_alts(text, pos + 1, "}")
            pos = _expect(text, pos, "|<")
            alt2, pos = _scan_alts(text, pos, ">")
            pos = _expect(text, pos, "|[")
            alt3, pos = _scan_alts(text, pos, "]")
            if pos < n and not text[pos].isspace():
                raise ConfnetParseError(f"unexpected {text[pos]!r} after region", pos)
            if segments and isinstance(segments[-1], Region):
                raise ConfnetParseError("adjacent regions are not a valid network", start)
            try:
                segments.append(Region(alt1=alt1, alt2=alt2, alt3=alt3))
            except (AlignmentError, ValueError) as exc:
                raise ConfnetParseError(str(exc), start) from exc
        elif ch in RESERVED:
            raise ConfnetParseError(f"unexpected {ch!r} at item start", pos)
        else:
            end = pos
            while end < n and not text[end].isspace():
                if text[end] in RESERVED:
                    raise ConfnetParseError(f"reserved character {text[end]!r} in token", end)
                end += 1
            segments.append(Anchor(text[pos:end]))
            pos = end
    try:
        return ConfusionNetwork(segments=tuple(segments))
    except AlignmentError as exc:
        raise ConfnetParseError(str(exc), 0) from exc
