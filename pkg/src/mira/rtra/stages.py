"""The Rearrange -> Initial -> Rethink -> Final chain."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Sequence

from ..core import Embedding, Query, RetrievedEntry, rank_key
from ..errors import MiraError
from ..fusion import select_knowledge
from .generators import Generator
from .record import DIGEST_LEN, Citation, RtraRecord, SelectedEvidence

log = logging.getLogger(__name__)

SYSTEM_PREAMBLE = (
    "You are a careful medical assistant. Answer using the labelled evidence; "
    "cite evidence by its bracketed label, e.g. [T1]."
)
NO_REVISION = "no revision available"
Y0 = "y0"
CITATION_RE = re.compile(r"\[([A-Za-z]\w*)\]")
_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")
_WORD_RE = re.compile(r"[a-z0-9]+")
_NUMBERED = re.compile(r"^\s*\d+[.)]\s*(.*\S)\s*$")
MAX_EXTRA_KNOWLEDGE = 4

STOPWORDS = frozenset(
    """a an the and or but if then else of to in on at by for with from as is are was were be been being
    this that these those it its it's into over under about than such can could may might must should would
    will shall do does did not no nor so very also there their them they he she his her we our you your i
    which who whom whose what when where why how all any both each few more most other some only own same
    too just have has had having""".split()
)


@dataclass(frozen=True)
class Evidence:
    """A candidate with its stable slot label (T1, I2, A1, ...)."""

    label: str
    entry: RetrievedEntry

    @property
    def modality(self) -> str:
        return self.entry.modality

    @property
    def score(self) -> float:
        return self.entry.score

    @property
    def text(self) -> str:
        if self.entry.modality == "image":
            assert self.entry.image is not None
            return f"<Image {self.entry.image.id}> {self.entry.caption}".rstrip()
        assert self.entry.content_text is not None
        return " ".join(self.entry.content_text.split())

    def selected(self) -> SelectedEvidence:
        return SelectedEvidence(self.label, self.modality, self.entry.content_digest[:DIGEST_LEN], self.text)


def label_pool(
    retrieved_texts: Sequence[RetrievedEntry],
    retrieved_images: Sequence[RetrievedEntry],
    api_text: RetrievedEntry | None,
    overflow: Sequence[RetrievedEntry] = (),
) -> list[Evidence]:
    """Label bundle slots first (T1.., I1.., A1), then overflow candidates by rank."""
    pool: list[Evidence] = []
    n_text = n_image = 0
    for e in retrieved_texts:
        n_text += 1
        pool.append(Evidence(f"T{n_text}", e))
    for e in retrieved_images:
        n_image += 1
        pool.append(Evidence(f"I{n_image}", e))
    if api_text is not None:
        pool.append(Evidence("A1", api_text))
    for e in sorted(overflow, key=rank_key):
        if e.modality == "text":
            n_text += 1
            pool.append(Evidence(f"T{n_text}", e))
        else:
            n_image += 1
            pool.append(Evidence(f"I{n_image}", e))
    return pool


def _ev_key(ev: Evidence) -> tuple[float, str]:
    return rank_key(ev.entry)


def rearrange(pool: Sequence[Evidence], threshold: float) -> tuple[list[Evidence] | None, list[str]]:
    """Keep candidates scoring at least ``threshold``.

    A modality with nothing above the threshold is back-filled with its single
    best candidate (and flagged). Returns ``None`` only when the pool has no
    candidate at all of some modality.
    """
    flags: list[str] = []
    kept = [ev for ev in pool if ev.score >= threshold]
    for modality in ("text", "image"):
        if any(ev.modality == modality for ev in kept):
            continue
        options = [ev for ev in pool if ev.modality == modality]
        if not options:
            return None, [f"rearrange_none:missing_{modality}"]
        kept.append(min(options, key=_ev_key))
        flags.append(f"rearrange_backfill:{modality}")
    texts = sorted((ev for ev in kept if ev.modality == "text"), key=_ev_key)
    images = sorted((ev for ev in kept if ev.modality == "image"), key=_ev_key)
    return texts + images, flags


def _evidence_lines(evidence: Sequence[Evidence]) -> list[str]:
    return [f"[{ev.label}] {ev.text}" for ev in evidence]


def _image_line(image_digest: str | None) -> list[str]:
    return [f"[input image] sha256:{image_digest[:DIGEST_LEN]}"] if image_digest else []


def initial_prompt(
    q: Query, selected: Sequence[Evidence], primary: Evidence | None, image_digest: str | None = None
) -> str:
    lines = ["### stage: initial", SYSTEM_PREAMBLE]
    lines += _image_line(image_digest)
    lines += _evidence_lines(selected)
    if primary is not None:
        lines.append(f"Primary evidence: [{primary.label}]")
    lines.append(f"Question: {q.text}")
    return "\n".join(lines)


def rethink_prompt(q: Query, y0: str, selected: Sequence[Evidence], extra: Sequence[Evidence]) -> str:
    lines = [
        "### stage: rethink",
        SYSTEM_PREAMBLE,
        "Reassess the initial answer against the evidence. Reply with numbered critique points; "
        f"every point must cite [{Y0}] or an evidence label.",
        f"Initial answer [{Y0}]: {' '.join(y0.split())}",
        "Evidence:",
    ]
    lines += _evidence_lines(selected)
    if extra:
        lines.append("Additional knowledge:")
        lines += _evidence_lines(extra)
    lines.append(f"Question: {q.text}")
    return "\n".join(lines)


def final_prompt(q: Query, y0: str, points: Sequence[str], selected: Sequence[Evidence]) -> str:
    lines = [
        "### stage: final",
        SYSTEM_PREAMBLE,
        "Rewrite the initial answer so that it addresses every critique point.",
        f"Initial answer [{Y0}]: {' '.join(y0.split())}",
        "Critique:",
    ]
    lines += [f"{i}. {p}" for i, p in enumerate(points, 1)]
    lines.append("Evidence:")
    lines += _evidence_lines(selected)
    lines.append(f"Question: {q.text}")
    return "\n".join(lines)


def _call(gen: Generator, prompt: str, images: Sequence[bytes], retries: int = 1) -> str | None:
    for attempt in range(retries + 1):
        try:
            out = gen.generate(prompt, images)
        except (MiraError, OSError, ValueError) as exc:
            log.warning("generator call failed (attempt %d): %s", attempt + 1, exc)
            continue
        if out and out.strip():
            return out.strip()
        log.warning("generator returned empty text (attempt %d)", attempt + 1)
    return None


def generate_initial(
    q: Query,
    selected: Sequence[Evidence] | None,
    generator: Generator,
    *,
    primary: Evidence | None = None,
    images: Sequence[bytes] = (),
    image_digest: str | None = None,
) -> tuple[str, list[str]]:
    """Initial chain-of-thought answer y0. Empty string plus a flag on failure."""
    if not selected:
        raise ValueError("generate_initial needs selected evidence")
    out = _call(generator, initial_prompt(q, selected, primary, image_digest), images)
    if out is None:
        return "", ["initial_failed"]
    return out, []


def parse_points(text: str) -> list[str]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    numbered = [m.group(1) for m in map(_NUMBERED.match, lines) if m]
    return numbered if numbered else [ln.strip() for ln in lines]


def rethink(
    q: Query,
    y0: str,
    selected: Sequence[Evidence],
    pool: Sequence[Evidence],
    generator: Generator,
) -> tuple[list[str], list[str]]:
    """Numbered critique points of y0, each citing [y0] or an evidence label."""
    if not y0.strip():
        raise ValueError("rethink needs a non-empty initial answer")
    chosen = {ev.label for ev in selected}
    extra = [ev for ev in pool if ev.label not in chosen][:MAX_EXTRA_KNOWLEDGE]
    valid = {Y0} | chosen | {ev.label for ev in extra}
    out = _call(generator, rethink_prompt(q, y0, selected, extra), ())
    if out is None:
        return [NO_REVISION], ["rethink_fallback:generator"]
    points = [p for p in parse_points(out) if set(CITATION_RE.findall(p)) & valid]
    if not points:
        return [NO_REVISION], ["rethink_fallback:uncited"]
    return points, []


def content_words(text: str) -> set[str]:
    return {w for w in _WORD_RE.findall(text.lower()) if w not in STOPWORDS and len(w) > 2}


def sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_SPLIT.split(text.strip()) if s.strip()]


def extract_citations(final: str, selected: Sequence[Evidence]) -> list[Citation]:
    """Map claim sentences of ``final`` to evidence labels.

    Explicit ``[label]`` tokens win. When the answer carries none, each
    sentence cites the evidence sharing the most content words with it.
    Finally every selected modality gets at least one citation: a modality
    left uncited is attached to its best-overlapping sentence.
    """
    labels = {ev.label for ev in selected}
    sents = sentences(final)
    cites: list[Citation] = []
    for sent in sents:
        for label in dict.fromkeys(CITATION_RE.findall(sent)):
            if label in labels:
                cites.append(Citation(sent, label))
    vocab = [(ev, content_words(ev.text)) for ev in selected]
    sent_words = [content_words(s) for s in sents]
    if not cites:
        for sent, words in zip(sents, sent_words):
            best_label, best_overlap = None, 0
            for ev, ev_words in vocab:
                overlap = len(words & ev_words)
                if overlap > best_overlap:
                    best_label, best_overlap = ev.label, overlap
            if best_label is not None:
                cites.append(Citation(sent, best_label))
    if not sents:
        return cites
    cited = {c.evidence_id for c in cites}
    for modality in ("text", "image"):
        options = [(ev, w) for ev, w in vocab if ev.modality == modality]
        if not options or any(ev.label in cited for ev, _ in options):
            continue
        best = (-1, 0, 0)  # (overlap, -option index, -sentence index)
        for i, (ev, ev_words) in enumerate(options):
            for j, words in enumerate(sent_words):
                key = (len(words & ev_words), -i, -j)
                if key > best:
                    best = key
        ev, j = options[-best[1]][0], -best[2]
        cites.append(Citation(sents[j], ev.label))
        cited.add(ev.label)
    return cites


def finalize(
    q: Query,
    y0: str,
    points: Sequence[str],
    selected: Sequence[Evidence],
    generator: Generator,
) -> tuple[str, list[Citation], list[str]]:
    """Refined answer y* with citations. Falls back to y0 if generation fails."""
    if not points:
        raise ValueError("finalize needs at least one critique point")
    out = _call(generator, final_prompt(q, y0, points, selected), ())
    flags: list[str] = []
    if out is None:
        out, flags = y0, ["finalize_fallback"]
    return out, extract_citations(out, selected), flags


def extractive_answer(selected: Sequence[Evidence]) -> str:
    """Last-resort answer when no generator produced anything."""
    parts = []
    for ev in selected:
        first = sentences(ev.text)[:1] or [ev.text]
        parts.append(f"[{ev.label}] {first[0]}")
    return "No generated answer is available. Retrieved evidence: " + " ".join(parts)


@dataclass
class StageGenerators:
    """One generator per stage; rethink/final default to the initial one."""

    initial: Generator
    rethink: Generator | None = None
    final: Generator | None = None

    def for_rethink(self) -> Generator:
        return self.rethink or self.initial

    def for_final(self) -> Generator:
        return self.final or self.initial


def run_rtra(
    q: Query,
    pool: Sequence[Evidence],
    generators: StageGenerators,
    *,
    threshold: float,
    f_v: Embedding | None = None,
    f_t: Embedding | None = None,
    images: Sequence[bytes] = (),
    image_digest: str | None = None,
    flags: Sequence[str] = (),
) -> RtraRecord:
    """Run the four stages over a labelled evidence pool and build the record."""
    all_flags = list(flags)
    selected, rflags = rearrange(pool, threshold)
    all_flags += rflags
    if selected is None:
        return RtraRecord(q, None, degraded_flags=tuple(dict.fromkeys(all_flags)))

    primary = None
    if f_v is not None or f_t is not None:
        best = select_knowledge(f_v, f_t, [ev.entry for ev in selected])
        primary = next(ev for ev in selected if ev.entry is best)

    y0, f = generate_initial(q, selected, generators.initial, primary=primary, images=images, image_digest=image_digest)
    all_flags += f
    if not y0:
        final = extractive_answer(selected)
        all_flags.append("final_extractive")
        return RtraRecord(
            q,
            tuple(ev.selected() for ev in selected),
            initial="",
            final=final,
            citations=tuple(extract_citations(final, selected)),
            degraded_flags=tuple(dict.fromkeys(all_flags)),
        )

    points, f = rethink(q, y0, selected, pool, generators.for_rethink())
    all_flags += f
    final, cites, f = finalize(q, y0, points, selected, generators.for_final())
    all_flags += f
    return RtraRecord(
        q,
        tuple(ev.selected() for ev in selected),
        initial=y0,
        rethink_points=tuple(points),
        final=final,
        citations=tuple(cites),
        degraded_flags=tuple(dict.fromkeys(all_flags)),
    )
