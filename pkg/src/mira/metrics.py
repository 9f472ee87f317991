"""Evaluation metrics for generated reports and question answers.

Tokenization is fixed. Text is lowercased and split on Unicode whitespace;
each token loses leading and trailing punctuation, and empty tokens are
dropped.
"""

from __future__ import annotations

import math
import re
import string
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

UNIT_SEP = "\x1f"
KINDS = ("report", "vqa_conv", "vqa_detail")


def _strip_punct(tok: str) -> str:
    start, end = 0, len(tok)
    while start < end and unicodedata.category(tok[start]).startswith("P"):
        start += 1
    while end > start and unicodedata.category(tok[end - 1]).startswith("P"):
        end -= 1
    return tok[start:end]


def tokenize(text: str) -> list[str]:
    toks = (_strip_punct(t) for t in text.lower().split())
    return [t for t in toks if t]


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class BleuScore:
    score: float
    precisions: tuple[float, ...]
    brevity_penalty: float


def bleu_details(candidate: Sequence[str], references: Sequence[Sequence[str]], n: int = 4) -> BleuScore:
    """Sentence BLEU with clipped multi-reference counts and closest-length brevity penalty."""
    if n not in (1, 2, 3, 4):
        raise ValueError("n must be 1, 2, 3 or 4")
    if not references:
        raise ValueError("need at least one reference")
    c = len(candidate)
    if c == 0:
        return BleuScore(0.0, (0.0,) * n, 0.0)
    precisions = []
    for order in range(1, n + 1):
        cand = _ngrams(candidate, order)
        total = sum(cand.values())
        if total == 0:
            precisions.append(0.0)
            continue
        max_ref: Counter = Counter()
        for ref in references:
            for gram, count in _ngrams(ref, order).items():
                max_ref[gram] = max(max_ref[gram], count)
        clipped = sum(min(count, max_ref[gram]) for gram, count in cand.items())
        precisions.append(clipped / total)
    r = min((len(ref) for ref in references), key=lambda length: (abs(length - c), length))
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    if min(precisions) == 0.0:
        return BleuScore(0.0, tuple(precisions), bp)
    geo = math.exp(math.fsum(math.log(p) for p in precisions) / n)
    return BleuScore(bp * geo, tuple(precisions), bp)


def bleu(candidate: Sequence[str], references: Sequence[Sequence[str]], n: int = 4) -> float:
    return bleu_details(candidate, references, n).score


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class RougeScore:
    f: float
    precision: float
    recall: float


def rouge_l_details(
    candidate: Sequence[str], references: Sequence[Sequence[str]], beta: float = 1.2
) -> RougeScore:
    """LCS F-measure, best over references."""
    best = RougeScore(0.0, 0.0, 0.0)
    if not candidate:
        return best
    for ref in references:
        if not ref:
            continue
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(candidate), lcs / len(ref)
        f = (1 + beta**2) * p * r / (r + beta**2 * p)
        if f > best.f:
            best = RougeScore(f, p, r)
    return best


def rouge_l(candidate: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    return rouge_l_details(candidate, references).f


def normalize_answer(text: str) -> str:
    out = " ".join(text.lower().split())
    return out.rstrip(string.punctuation + " ").strip()


def exact_match(candidate: str, reference: str, normalize: bool = True) -> int:
    if normalize:
        return int(normalize_answer(candidate) == normalize_answer(reference))
    return int(candidate == reference)


@dataclass(frozen=True)
class EvalPair:
    kind: str
    candidate: str
    references: tuple[str, ...]
    judge_score: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "references", tuple(self.references))
        if self.kind not in KINDS:
            raise ValueError(f"unknown pair kind {self.kind!r}")
        if not self.references:
            raise ValueError("a pair needs at least one reference")
        if self.judge_score is not None and not 0.0 <= self.judge_score <= 1.0:
            raise ValueError("judge score must lie in [0, 1]")


@dataclass(frozen=True)
class Accuracy:
    ratio: float
    count: int
    total: int

    def __str__(self) -> str:
        return f"{self.ratio:.2f}({self.count})"


def correctness_split(pairs: Sequence[EvalPair], threshold: float = 0.5) -> tuple[Accuracy, Accuracy]:
    """(conversation accuracy by exact match, detail accuracy by judge score > threshold)."""
    conv = [p for p in pairs if p.kind == "vqa_conv"]
    detail = [p for p in pairs if p.kind == "vqa_detail"]
    for p in detail:
        if p.judge_score is None:
            raise ValueError("detail pair is missing its judge score")
    conv_hits = sum(max(exact_match(p.candidate, r) for r in p.references) for p in conv)
    detail_hits = sum(1 for p in detail if p.judge_score is not None and p.judge_score > threshold)
    return (
        Accuracy(conv_hits / len(conv) if conv else 0.0, conv_hits, len(conv)),
        Accuracy(detail_hits / len(detail) if detail else 0.0, detail_hits, len(detail)),
    )


def parse_corpus(text: str) -> list[EvalPair]:
    """One pair per line: ``kind<TAB>candidate<TAB>refs joined by \\x1f[<TAB>c_s]``."""
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (3, 4):
            raise ValueError(f"line {lineno}: expected 3 or 4 tab-separated fields, got {len(cols)}")
        score = float(cols[3]) if len(cols) == 4 and cols[3].strip() else None
        try:
            pairs.append(EvalPair(cols[0].strip(), cols[1], tuple(cols[2].split(UNIT_SEP)), score))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    return pairs


def load_corpus(path: str | Path) -> list[EvalPair]:
    return parse_corpus(Path(path).read_text(encoding="utf-8"))


Judge = Callable[[EvalPair], float]


@dataclass
class EvalReport:
    bleu: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    rouge_l: float = 0.0
    n_report: int = 0
    conv: Accuracy = field(default_factory=lambda: Accuracy(0.0, 0, 0))
    detail: Accuracy = field(default_factory=lambda: Accuracy(0.0, 0, 0))
    threshold: float = 0.5

    def render(self) -> str:
        head = ["BLEU1", "BLEU2", "BLEU3", "BLEU4", "ROUGE_L"]
        vals = [f"{v:.3f}" for v in (*self.bleu, self.rouge_l)]
        widths = [max(len(h), len(v)) for h, v in zip(head, vals)]
        lines = [
            f"Report generation ({self.n_report} pairs)",
            "  ".join(h.rjust(w) for h, w in zip(head, widths)),
            "  ".join(v.rjust(w) for v, w in zip(vals, widths)),
            "",
            "Question answering",
            f"Conv ({self.conv.total} in total)  Details ({self.detail.total} in total, c_s>{self.threshold:g})",
            f"{str(self.conv):<{len(f'Conv ({self.conv.total} in total)')}}  {self.detail}",
        ]
        return "\n".join(lines) + "\n"


def evaluate(pairs: Iterable[EvalPair], threshold: float = 0.5, judge: Judge | None = None) -> EvalReport:
    """Average sentence-level BLEU/ROUGE-L over report pairs plus the QA split."""
    pairs = list(pairs)
    if judge is not None:
        pairs = [
            EvalPair(p.kind, p.candidate, p.references, judge(p))
            if p.kind == "vqa_detail" and p.judge_score is None
            else p
            for p in pairs
        ]
    reports = [p for p in pairs if p.kind == "report"]
    bleus = [0.0] * 4
    rouge = 0.0
    for p in reports:
        cand = tokenize(p.candidate)
        refs = [tokenize(r) for r in p.references]
        for n in range(1, 5):
            bleus[n - 1] += bleu(cand, refs, n)
        rouge += rouge_l(cand, refs)
    k = len(reports) or 1
    conv, detail = correctness_split(pairs, threshold)
    return EvalReport(
        bleu=tuple(b / k for b in bleus),  # type: ignore[arg-type]
        rouge_l=rouge / k,
        n_report=len(reports),
        conv=conv,
        detail=detail,
        threshold=threshold,
    )


_SCORE_RE = re.compile(r"[-+]?\d*\.?\d+(?:[eE][-+]?\d+)?")


def judge_prompt(pair: EvalPair) -> str:
    return (
        "### stage: judge\n"
        "Score how correct the candidate answer is against the reference on a scale from 0 to 1. "
        "Reply with the number only.\n"
        f"Reference: {pair.references[0]}\n"
        f"Candidate: {pair.candidate}"
    )


def parse_judge_score(text: str) -> float:
    m = _SCORE_RE.search(text)
    if not m:
        raise ValueError(f"judge reply has no score: {text!r}")
    return min(1.0, max(0.0, float(m.group(0))))


class GeneratorJudge:
    """Judge backed by any generator-contract provider."""

    def __init__(self, generator):
        self.generator = generator

    def __call__(self, pair: EvalPair) -> float:
        return parse_judge_score(self.generator.generate(judge_prompt(pair)))
