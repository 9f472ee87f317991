"""RTRA records and their plain-text ``.rtra`` format.

A serialized record looks like::

    Query: Is it a malignant lesion?
    Rearrange: Selected:
    1. [T1 text 0123456789abcdef] Cryptococcus neoformans ...
    2. [I1 image fedcba9876543210] <Image 4> CT scan showing ...
    Initial: ...
    Rethink:
    1. ...
    Final: ...
    Citations:
    - [T1] claim sentence
    Flags: rearrange_backfill:image

Field text is escaped so every field stays on one line (``\\n`` for
newlines, ``\\\\`` for backslashes). A record with no usable evidence has
``Rearrange: <None>``. The parser also accepts hand transcriptions whose
items carry no ``[label modality digest]`` prefix.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..core import Query, text_digest
from ..errors import RecordParseError

NONE_MARK = "<None>"
DIGEST_LEN = 16

_ITEM_RE = re.compile(r"^(\d+)\. (.*)$")
_TAGGED_RE = re.compile(r"^\[([A-Za-z]\w*) (text|image) ([0-9a-f]{%d})\] (.*)$" % DIGEST_LEN)
_CITE_RE = re.compile(r"^- \[([A-Za-z]\w*)\] (.*)$")


@dataclass(frozen=True)
class SelectedEvidence:
    label: str
    modality: str
    digest: str
    text: str

    def __post_init__(self) -> None:
        if self.modality not in ("text", "image"):
            raise ValueError(f"evidence modality must be text or image, got {self.modality!r}")


@dataclass(frozen=True)
class Citation:
    span: str
    evidence_id: str


@dataclass(frozen=True)
class RtraRecord:
    query: Query
    rearrange_selected: tuple[SelectedEvidence, ...] | None
    initial: str = ""
    rethink_points: tuple[str, ...] = ()
    final: str = ""
    citations: tuple[Citation, ...] = ()
    degraded_flags: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.rearrange_selected is not None:
            object.__setattr__(self, "rearrange_selected", tuple(self.rearrange_selected))
            kinds = {e.modality for e in self.rearrange_selected}
            if kinds != {"text", "image"}:
                raise ValueError("selected evidence needs at least one text and one image entry")
            if not self.final.strip():
                raise ValueError("final answer must be non-empty")
        object.__setattr__(self, "rethink_points", tuple(self.rethink_points))
        object.__setattr__(self, "citations", tuple(self.citations))
        object.__setattr__(self, "degraded_flags", tuple(self.degraded_flags))

    @property
    def is_none(self) -> bool:
        return self.rearrange_selected is None

    @property
    def evidence_ids(self) -> list[str]:
        return [e.label for e in self.rearrange_selected or ()]

    def coverage(self) -> dict[str, int]:
        """How many citations point at each selected evidence id."""
        counts = {label: 0 for label in self.evidence_ids}
        for c in self.citations:
            if c.evidence_id in counts:
                counts[c.evidence_id] += 1
        return counts


def escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\r", "\\r").replace("\n", "\\n")


def unescape(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            out.append({"n": "\n", "r": "\r", "\\": "\\"}.get(nxt, "\\" + nxt))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def _field(name: str, value: str) -> str:
    return f"{name}: {escape(value)}" if value else f"{name}:"


def serialize_record(rec: RtraRecord) -> str:
    lines = [f"Query: {escape(rec.query.text)}"]
    if rec.rearrange_selected is None:
        lines.append(f"Rearrange: {NONE_MARK}")
    else:
        lines.append("Rearrange: Selected:")
        for i, ev in enumerate(rec.rearrange_selected, 1):
            lines.append(f"{i}. [{ev.label} {ev.modality} {ev.digest}] {escape(ev.text)}")
    lines.append(_field("Initial", rec.initial))
    lines.append("Rethink:")
    for i, point in enumerate(rec.rethink_points, 1):
        lines.append(f"{i}. {escape(point)}")
    lines.append(_field("Final", rec.final))
    if rec.citations:
        lines.append("Citations:")
        for c in rec.citations:
            lines.append(f"- [{c.evidence_id}] {escape(c.span)}")
    if rec.degraded_flags:
        lines.append("Flags: " + ", ".join(rec.degraded_flags))
    return "\n".join(lines) + "\n"


_SECTIONS = ("Query", "Rearrange", "Initial", "Rethink", "Final", "Citations", "Flags")
_HEADER_RE = re.compile(r"^(Human Query|Query|Rearrange|Initial|Rethink|Final|Citations|Flags):(?: (.*))?$")


def _untagged_evidence(n: int, text: str, counters: dict[str, int]) -> SelectedEvidence:
    modality = "image" if text.startswith("<Image") else "text"
    counters[modality] += 1
    label = ("I" if modality == "image" else "T") + str(counters[modality])
    return SelectedEvidence(label, modality, text_digest(text)[:DIGEST_LEN], text)


def parse_record(text: str) -> RtraRecord:
    """Inverse of :func:`serialize_record`; raises RecordParseError on malformed input."""
    sections: dict[str, tuple[str, list[str]]] = {}
    order: list[str] = []
    current: str | None = None
    # Only "\n" separates lines; other Unicode line breaks are ordinary field text.
    for raw in text.split("\n"):
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        m = _HEADER_RE.match(line)
        if m:
            name = "Query" if m.group(1) == "Human Query" else m.group(1)
            if name in sections:
                raise RecordParseError(f"duplicate section {name!r}")
            sections[name] = ((m.group(2) or ""), [])
            order.append(name)
            current = name
        elif current is None:
            raise RecordParseError(f"text before the first section: {line!r}")
        else:
            sections[current][1].append(line)

    for required in ("Query", "Rearrange", "Initial", "Rethink", "Final"):
        if required not in sections:
            raise RecordParseError(f"missing section {required!r}")
    ranks = [_SECTIONS.index(name) for name in order]
    if ranks != sorted(ranks):
        raise RecordParseError(f"sections out of order: {order}")
    for name in ("Query", "Initial", "Final", "Flags"):
        if name in sections and sections[name][1]:
            raise RecordParseError(f"section {name!r} must fit on one line")

    try:
        query = Query(unescape(sections["Query"][0]))
    except ValueError as exc:
        raise RecordParseError(str(exc)) from exc

    head, body = sections["Rearrange"]
    selected: tuple[SelectedEvidence, ...] | None
    if head.strip() == NONE_MARK:
        if body:
            raise RecordParseError("a <None> rearrange section cannot list items")
        selected = None
    elif head.strip() == "Selected:":
        items = []
        counters = {"text": 0, "image": 0}
        for line in body:
            m = _ITEM_RE.match(line.lstrip())
            if not m:
                raise RecordParseError(f"bad evidence item: {line!r}")
            tagged = _TAGGED_RE.match(m.group(2))
            if tagged:
                label, modality, digest, content = tagged.groups()
                items.append(SelectedEvidence(label, modality, digest, unescape(content)))
            else:
                items.append(_untagged_evidence(int(m.group(1)), unescape(m.group(2)), counters))
        selected = tuple(items)
    else:
        raise RecordParseError(f"bad rearrange header: {head!r}")

    points = []
    if sections["Rethink"][0].strip():
        raise RecordParseError("rethink points go on their own lines")
    for line in sections["Rethink"][1]:
        m = _ITEM_RE.match(line.lstrip())
        if not m:
            raise RecordParseError(f"bad rethink point: {line!r}")
        points.append(unescape(m.group(2)))

    citations = []
    if "Citations" in sections:
        for line in sections["Citations"][1]:
            m = _CITE_RE.match(line.lstrip())
            if not m:
                raise RecordParseError(f"bad citation line: {line!r}")
            citations.append(Citation(unescape(m.group(2)), m.group(1)))

    flags: tuple[str, ...] = ()
    if "Flags" in sections and sections["Flags"][0].strip():
        flags = tuple(f.strip() for f in sections["Flags"][0].split(", "))

    try:
        return RtraRecord(
            query=query,
            rearrange_selected=selected,
            initial=unescape(sections["Initial"][0]),
            rethink_points=tuple(points),
            final=unescape(sections["Final"][0]),
            citations=tuple(citations),
            degraded_flags=flags,
        )
    except ValueError as exc:
        raise RecordParseError(str(exc)) from exc
