"""Accuracy metrics, BLEU, and weighted-reference DeltaBLEU."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .cases import ConditionName, Reference
from .errors import EmptyHypothesis, ZeroDenominator
from .judge import ExactJudge, Judge
from .reranker import RankOutcome

_TOKEN = re.compile(r"\w+|[^\w\s]")


class Smoothing(str, Enum):
    NONE = "none"
    ADD_ONE = "add_one"  # (m + 1) / (l + 1) for n >= 2


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class _Stats:
    matches: list[float]
    totals: list[int]
    hyp_len: int
    ref_len: int

    def __iadd__(self, other: "_Stats") -> "_Stats":
        self.matches = [a + b for a, b in zip(self.matches, other.matches)]
        self.totals = [a + b for a, b in zip(self.totals, other.totals)]
        self.hyp_len += other.hyp_len
        self.ref_len += other.ref_len
        return self


def _closest_ref_len(c: int, lengths: list[int]) -> int:
    return min(lengths, key=lambda r: (abs(r - c), r))


def _segment_stats(
    hypothesis: str,
    refs: Sequence[tuple[str, float]],
    max_n: int,
    weighted: bool,
) -> _Stats:
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    if not refs:
        raise ValueError("at least one reference is required")
    hyp = tokenize(hypothesis)
    if not hyp:
        raise EmptyHypothesis("hypothesis has no tokens")
    ref_tokens = [(tokenize(text), w) for text, w in refs]

    matches: list[float] = []
    totals: list[int] = []
    for n in range(1, max_n + 1):
        hyp_counts = _ngrams(hyp, n)
        ref_counts = [(_ngrams(toks, n), w) for toks, w in ref_tokens]
        matched = 0.0
        for gram, count in hyp_counts.items():
            present = [(rc[gram], w) for rc, w in ref_counts if rc[gram] > 0]
            if not present:
                continue
            clipped = min(count, max(c for c, _ in present))
            if weighted:
                matched += max(w for _, w in present) * clipped
            else:
                matched += clipped
        matches.append(max(matched, 0.0))
        totals.append(sum(hyp_counts.values()))

    lengths = [len(t) for t, _ in ref_tokens]
    # weighted refs use the shortest length so an added reference can't lower BP
    ref_len = min(lengths) if weighted else _closest_ref_len(len(hyp), lengths)
    return _Stats(matches, totals, len(hyp), ref_len)


def _score(stats: _Stats, smoothing: Smoothing) -> float:
    log_sum = 0.0
    for n, (m, total) in enumerate(zip(stats.matches, stats.totals), start=1):
        if smoothing is Smoothing.ADD_ONE and n >= 2:
            p = (m + 1.0) / (total + 1.0)
        else:
            p = m / total if total else 0.0
        if p <= 0.0:
            return 0.0
        log_sum += math.log(p)
    c, r = stats.hyp_len, stats.ref_len
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / len(stats.matches))


def bleu(
    hypothesis: str,
    references: Sequence[str],
    max_n: int = 4,
    smoothing: Smoothing | str = Smoothing.ADD_ONE,
) -> float:
    """Sentence BLEU with clipped n-gram precision and brevity penalty."""
    refs = [(r, 1.0) for r in references]
    return _score(_segment_stats(hypothesis, refs, max_n, weighted=False), Smoothing(smoothing))


def _weighted(refs: Iterable[Reference | tuple[str, float]]) -> list[tuple[str, float]]:
    out = []
    for r in refs:
        text, w = (r.text, r.weight) if isinstance(r, Reference) else r
        if not -1.0 <= w <= 1.0:
            raise ValueError(f"reference weight {w} outside [-1, 1]")
        out.append((text, float(w)))
    return out


def delta_bleu(
    hypothesis: str,
    weighted_refs: Sequence[Reference | tuple[str, float]],
    max_n: int = 4,
    smoothing: Smoothing | str = Smoothing.ADD_ONE,
) -> float:
    """BLEU where each clipped n-gram match counts with the largest weight
    among the references containing that n-gram.

    Negative totals are floored at zero. The brevity penalty uses the shortest
    reference. One reference of weight 1 gives exactly ``bleu``.
    """
    stats = _segment_stats(hypothesis, _weighted(weighted_refs), max_n, weighted=True)
    return _score(stats, Smoothing(smoothing))


def corpus_bleu(
    hypotheses: Sequence[str],
    references: Sequence[Sequence[str]],
    max_n: int = 4,
    smoothing: Smoothing | str = Smoothing.ADD_ONE,
) -> float:
    return _corpus(hypotheses, [[(r, 1.0) for r in refs] for refs in references], max_n, smoothing, False)


def corpus_delta_bleu(
    hypotheses: Sequence[str],
    weighted_refs: Sequence[Sequence[Reference | tuple[str, float]]],
    max_n: int = 4,
    smoothing: Smoothing | str = Smoothing.ADD_ONE,
) -> float:
    return _corpus(hypotheses, [_weighted(refs) for refs in weighted_refs], max_n, smoothing, True)


def _corpus(hypotheses, refs_list, max_n, smoothing, weighted) -> float:
    if len(hypotheses) != len(refs_list):
        raise ValueError("hypotheses and references differ in length")
    if not hypotheses:
        raise ZeroDenominator("empty corpus")
    total = _Stats([0.0] * max_n, [0] * max_n, 0, 0)
    for hyp, refs in zip(hypotheses, refs_list):
        total += _segment_stats(hyp, refs, max_n, weighted)
    return _score(total, Smoothing(smoothing))


# -- accuracy -----------------------------------------------------------------


def retrieval_accuracy(retrieved_gt: int, total_known_gt: int) -> float:
    """Share of known-ground-truth cases whose truth was among the candidates."""
    if total_known_gt == 0:
        raise ZeroDenominator("no cases with known ground truth")
    if not 0 <= retrieved_gt <= total_known_gt:
        raise ValueError(f"retrieved_gt={retrieved_gt} outside [0, {total_known_gt}]")
    return retrieved_gt / total_known_gt


@dataclass(frozen=True)
class Match:
    hit: bool
    source: str  # "exact" or "llm"


def find_match(items: Iterable[ConditionName], truth: ConditionName, judge: Judge | None = None) -> Match:
    """Is ``truth`` among ``items``? Exact name identity is tried first, so
    the judge is consulted only when no item matches by name."""
    items = list(items)
    if any(i.normalized == truth.normalized for i in items):
        return Match(True, "exact")
    if judge is None or isinstance(judge, ExactJudge):
        return Match(False, "exact")
    used_model = False
    for item in items:
        verdict = judge.judge(item, truth)
        used_model |= verdict.rule_applied > 0
        if verdict.similar:
            return Match(True, "llm" if used_model else "exact")
    return Match(False, "llm" if used_model else "exact")


def count_topk_hits(
    outcomes: Iterable[RankOutcome],
    ground_truths: Mapping[str, ConditionName],
    k: int,
    judge: Judge | None = None,
) -> int:
    if k not in (1, 2):
        raise ValueError("k must be 1 or 2")
    hits = 0
    for outcome in outcomes:
        if outcome.case_id not in ground_truths:
            raise KeyError(f"no ground truth for case {outcome.case_id!r}")
        hits += find_match(outcome.topk(k), ground_truths[outcome.case_id], judge).hit
    return hits


def topk_accuracy(
    outcomes: Sequence[RankOutcome],
    ground_truths: Mapping[str, ConditionName],
    k: int,
    judge: Judge | None = None,
) -> float:
    outcomes = list(outcomes)
    if not outcomes:
        raise ZeroDenominator("no rank outcomes")
    return count_topk_hits(outcomes, ground_truths, k, judge) / len(outcomes)
