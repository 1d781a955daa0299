"""Text cleaning, typed entity markers and the cross-encoder input template."""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from esci_rank.dataset.records import QueryProductRecord

# Emoticons, Misc Symbols & Pictographs, Transport & Map, Dingbats, C0/C1 controls.
_STRIP_RANGES = (
    (0x1F600, 0x1F64F),
    (0x1F300, 0x1F5FF),
    (0x1F680, 0x1F6FF),
    (0x2700, 0x27BF),
    (0x0000, 0x001F),
    (0x007F, 0x009F),
)
_TO_SPACE = {"\t", "\n", "\r"}

_TAG = re.compile(r"</?[A-Za-z!?][^<>]*>")
_WS = re.compile(r"\s+")


def _strip_char(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _STRIP_RANGES)


def clean_text(raw: str) -> str:
    """Remove markup tags, emoji and control characters, then normalize whitespace.

    The result is a fixed point: ``clean_text(clean_text(x)) == clean_text(x)``.
    """
    chars = []
    for ch in raw:
        if ch in _TO_SPACE:
            chars.append(" ")
        elif not _strip_char(ch):
            chars.append(ch)
    text = "".join(chars)
    # stripping one tag can splice the remains of an enclosing one into a new tag
    while True:
        stripped = _TAG.sub(" ", text)
        if stripped == text:
            break
        text = stripped
    return _WS.sub(" ", text).strip()


def clean_record(record: QueryProductRecord) -> QueryProductRecord:
    return replace(
        record,
        query=clean_text(record.query),
        title=clean_text(record.title),
        description=clean_text(record.description),
        bullet_points=clean_text(record.bullet_points),
        brand=clean_text(record.brand),
        color=clean_text(record.color),
    )


class SpanError(ValueError):
    pass


@dataclass(frozen=True)
class EntitySpan:
    """A typed entity over UTF-8 byte offsets ``[start, end)`` of some text."""

    start: int
    end: int
    entity_type: str


def _check_spans(data: bytes, spans: Sequence[EntitySpan]) -> list[EntitySpan]:
    ordered = sorted(spans, key=lambda s: (s.start, s.end))
    for s in ordered:
        if not (0 <= s.start < s.end <= len(data)):
            raise SpanError(f"span {s} out of range for text of {len(data)} bytes")
        if not s.entity_type or any(c in s.entity_type for c in "[]/ "):
            raise SpanError(f"span {s} has an invalid entity type")
        for offset in (s.start, s.end):
            # UTF-8 continuation bytes are 0b10xxxxxx
            if offset < len(data) and (data[offset] & 0xC0) == 0x80:
                raise SpanError(f"span {s} splits a multi-byte character")
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.start < prev.end:
            raise SpanError(f"span {cur} overlaps span {prev}")
    return ordered


def mark_entities(text: str, spans: Sequence[EntitySpan]) -> str:
    """Wrap each span in ``[Type] ... [/Type]`` markers."""
    data = text.encode("utf-8")
    ordered = _check_spans(data, spans)
    for s in reversed(ordered):
        t = s.entity_type.encode("utf-8")
        data = data[: s.start] + b" [" + t + b"] " + data[s.start : s.end] + b" [/" + t + b"] " + data[s.end :]
    return _WS.sub(" ", data.decode("utf-8")).strip()


_MARKER = re.compile(r"\[/?[^\[\]/\s]+\]")


def strip_markers(text: str) -> str:
    return _WS.sub(" ", _MARKER.sub(" ", text)).strip()


def tag_entities(text: str, lexicon: dict[str, Iterable[str]]) -> list[EntitySpan]:
    """Rule-based tagger: case-insensitive whole-word matches of lexicon phrases.

    ``lexicon`` maps an entity type to surface strings. Longer matches win and
    earlier types win ties; results never overlap.
    """
    lowered = text.lower()
    candidates = []
    for order, (entity_type, phrases) in enumerate(lexicon.items()):
        for phrase in {p.strip().lower() for p in phrases if p and p.strip()}:
            pattern = re.compile(r"(?<!\w)" + re.escape(phrase) + r"(?!\w)")
            for m in pattern.finditer(lowered):
                candidates.append((m.start(), m.end(), order, entity_type))
    # char offsets of the lowered string match the original only when lowering keeps lengths
    if len(lowered) != len(text):
        return []
    candidates.sort(key=lambda c: (-(c[1] - c[0]), c[2], c[0]))
    taken: list[tuple[int, int, str]] = []
    for start, end, _, entity_type in candidates:
        if all(end <= a or start >= b for a, b, _ in taken):
            taken.append((start, end, entity_type))
    taken.sort()
    return [
        EntitySpan(len(text[:a].encode("utf-8")), len(text[:b].encode("utf-8")), t) for a, b, t in taken
    ]


def mark_record(record: QueryProductRecord) -> QueryProductRecord:
    """Mark the record's own brand and color where they occur in its query."""
    spans = tag_entities(record.query, {"Brand": [record.brand], "Color": [record.color]})
    return replace(record, query=mark_entities(record.query, spans))


def build_input(record: QueryProductRecord) -> str:
    return (
        "[CLS]"
        + record.query
        + "[SEP]"
        + "color:"
        + record.color
        + " brand:"
        + record.brand
        + " description:"
        + record.title
        + " "
        + record.bullet_points
        + " "
        + record.description
        + "[SEP]"
    )
