"""Score-based re-ranking of a candidate set (naive and guideline-grounded CoT)."""

from __future__ import annotations

import hashlib
import random
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from .cases import ConditionName, DermCase, normalize_condition
from .errors import EmptyName, MissingCandidateScore, OutOfRangeScore, ScoreParseError, TooFewCandidates
from .gateway import Backend, Conversation, GatewayConfig, Stage, complete, user
from .prompts import PromptLibrary, default_library
from .retrieval import CandidateSet
from .textmatch import find_mentions, strip_markup

SCORE_INSTRUCTION = (
    "After your reasoning, write one line per candidate in exactly this form:\n"
    "SCORE <name>: <integer 1-10>"
)
MIN_SCORE, MAX_SCORE = 1, 10


class RankStrategy(str, Enum):
    NAIVE_COT = "naive"
    EXPERT_WITH_CONTEXT = "expert_context"
    EXPERT_IMAGE_ONLY = "expert_image"
    MAC = "mac"


_TEMPLATES = {
    RankStrategy.NAIVE_COT: "rerank_naive",
    RankStrategy.EXPERT_WITH_CONTEXT: "rerank_expert_context",
    RankStrategy.EXPERT_IMAGE_ONLY: "rerank_expert_image",
}


@dataclass(frozen=True)
class ScoredCandidate:
    name: ConditionName
    score: int

    def __post_init__(self) -> None:
        if not MIN_SCORE <= self.score <= MAX_SCORE:
            raise OutOfRangeScore(self.name.normalized, self.score)


@dataclass(frozen=True)
class RankOutcome:
    strategy: RankStrategy
    ranking: tuple[ConditionName, ...]
    scores: tuple[ScoredCandidate, ...] = ()
    tie_broken: bool = False
    case_id: str = ""
    transcript_ref: str = ""
    extra: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if not self.ranking:
            raise ValueError("empty ranking")

    @property
    def top1(self) -> ConditionName:
        return self.ranking[0]

    @property
    def top2(self) -> tuple[ConditionName, ...]:
        return self.ranking[:2]

    def topk(self, k: int) -> tuple[ConditionName, ...]:
        return self.ranking[:k]

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "case_id": self.case_id,
            "strategy": self.strategy.value,
            "scores": [{"name": s.name.normalized, "score": s.score} for s in self.scores],
            "ranking": [n.normalized for n in self.ranking],
            "top1": self.top1.normalized,
            "top2": [n.normalized for n in self.top2],
            "tie_broken": self.tie_broken,
            "transcript_ref": self.transcript_ref,
        }
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RankOutcome":
        def cn(s: str) -> ConditionName:
            return ConditionName(s, s)

        return cls(
            strategy=RankStrategy(d["strategy"]),
            ranking=tuple(cn(n) for n in d["ranking"]),
            scores=tuple(ScoredCandidate(cn(s["name"]), int(s["score"])) for s in d.get("scores", [])),
            tie_broken=bool(d.get("tie_broken", False)),
            case_id=d.get("case_id", ""),
            transcript_ref=d.get("transcript_ref", ""),
        )


# -- score parsing ------------------------------------------------------------

_SCORE_LINE = re.compile(r"^[\s*_#>-]*SCORE\s+(.+?)\s*[:=]\s*[*_]*\s*(-?\d+)", re.MULTILINE)
_INT = re.compile(r"(?<![\w.])(\d{1,3})(?![\d.]\d)")


def _to_int(digits: str) -> int:
    if len(digits.lstrip("-")) > 9:
        return -(10**9) if digits.startswith("-") else 10**9
    return int(digits)


def _match_candidate(raw: str, candidates: CandidateSet) -> ConditionName | None:
    try:
        name = normalize_condition(strip_markup(raw).strip("'\"<>[]"))
    except EmptyName:
        return None
    for c in candidates:
        if c.normalized == name.normalized:
            return c
    return None


def _primary_scores(response: str, candidates: CandidateSet) -> list[ScoredCandidate]:
    out: dict[str, ScoredCandidate] = {}
    for m in _SCORE_LINE.finditer(response):
        cand = _match_candidate(m.group(1), candidates)
        if cand is None or cand.normalized in out:
            continue
        value = _to_int(m.group(2))
        if not MIN_SCORE <= value <= MAX_SCORE:
            raise OutOfRangeScore(cand.normalized, value)
        out[cand.normalized] = ScoredCandidate(cand, value)
    return list(out.values())


def _fallback_scores(response: str, candidates: CandidateSet) -> list[ScoredCandidate]:
    by_name = {c.normalized: c for c in candidates}
    found: list[tuple[int, ScoredCandidate]] = []
    seen: set[str] = set()
    offset = 0
    for line in response.splitlines(keepends=True):
        mentions = find_mentions(line, by_name)
        for i, mention in enumerate(mentions):
            if mention.name in seen:
                continue
            stop = mentions[i + 1].start if i + 1 < len(mentions) else len(line)
            for m in _INT.finditer(line, mention.end, stop):
                value = int(m.group(1))
                if MIN_SCORE <= value <= MAX_SCORE:
                    seen.add(mention.name)
                    found.append((offset + mention.start, ScoredCandidate(by_name[mention.name], value)))
                    break
        offset += len(line)
    found.sort(key=lambda t: t[0])
    return [s for _, s in found]


def parse_scores(response: str, candidates: CandidateSet) -> list[ScoredCandidate]:
    """Read per-candidate 1-10 scores, in the order they appear.

    ``SCORE <name>: <int>`` lines are authoritative. Candidates without such a
    line are looked for in prose: the candidate's name followed, on the same
    line and before the next candidate name, by an integer in 1-10.
    """
    if not isinstance(response, str):
        raise ScoreParseError("response is not text")
    primary = _primary_scores(response, candidates)
    have = {s.name.normalized for s in primary}
    if len(have) < len(candidates):
        primary += [s for s in _fallback_scores(response, candidates) if s.name.normalized not in have]
    if not primary:
        raise ScoreParseError("no candidate scores found")
    return primary


# -- ranking ------------------------------------------------------------------


def case_rng(seed: int, case_id: str) -> random.Random:
    """Per-case generator, so tie-breaks don't depend on batch scheduling."""
    digest = hashlib.sha256(f"{seed}:{case_id}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _complete_scores(scores: list[ScoredCandidate], candidates: CandidateSet) -> dict[str, int]:
    table = {s.name.normalized: s.score for s in scores}
    missing = [c.normalized for c in candidates if c.normalized not in table]
    if missing:
        raise MissingCandidateScore(missing)
    return table


def order_by_score(
    candidates: CandidateSet,
    table: dict[str, int],
    rng: random.Random | None = None,
) -> tuple[list[ConditionName], bool]:
    """Descending score, ties in input order.

    With ``rng`` the first place goes to a uniform pick among tied maxima.
    Returns the ranking and whether such a pick was needed.
    """
    ordered = sorted(candidates, key=lambda c: -table[c.normalized])
    best = table[ordered[0].normalized]
    tied = [c for c in ordered if table[c.normalized] == best]
    if rng is None or len(tied) < 2:
        return ordered, False
    winner = rng.choice(tied)
    return [winner] + [c for c in ordered if c is not winner], True


def build_rank_prompt(
    case: DermCase,
    candidates: CandidateSet,
    strategy: RankStrategy,
    prompts: PromptLibrary | None = None,
) -> Conversation:
    prompts = prompts or default_library()
    listing = "\n".join(f"- {c.normalized}" for c in candidates)
    template = prompts[_TEMPLATES[strategy]]
    if strategy is RankStrategy.EXPERT_IMAGE_ONLY:
        text = template.render(candidates=listing)
    else:
        text = template.render(query=case.query, candidates=listing)
    return Conversation.of(user(text, *case.images, SCORE_INSTRUCTION))


def _rank(
    strategy: RankStrategy,
    case: DermCase,
    candidates: CandidateSet,
    backend: Backend,
    config: GatewayConfig,
    prompts: PromptLibrary | None,
    rng: random.Random | None,
) -> RankOutcome:
    if len(candidates) < 2:
        raise TooFewCandidates(f"re-ranking needs at least 2 candidates, got {len(candidates)}")
    conversation = build_rank_prompt(case, candidates, strategy, prompts)
    response = complete(conversation, config, backend, case_id=case.case_id, stage=Stage.RERANK)
    scores = parse_scores(response, candidates)
    table = _complete_scores(scores, candidates)
    ranking, tie_broken = order_by_score(candidates, table, rng)
    by_input = tuple(ScoredCandidate(c, table[c.normalized]) for c in candidates)
    return RankOutcome(
        strategy=strategy,
        ranking=tuple(ranking),
        scores=by_input,
        tie_broken=tie_broken,
        case_id=case.case_id,
        transcript_ref=f"manifest.jsonl#{case.case_id}/{Stage.RERANK.value}",
    )


def rank_naive(
    case: DermCase,
    candidates: CandidateSet,
    backend: Backend,
    config: GatewayConfig,
    rng_seed: int = 0,
    prompts: PromptLibrary | None = None,
) -> RankOutcome:
    return _rank(
        RankStrategy.NAIVE_COT, case, candidates, backend, config, prompts, case_rng(rng_seed, case.case_id)
    )


def rank_expert_with_context(
    case: DermCase,
    candidates: CandidateSet,
    backend: Backend,
    config: GatewayConfig,
    prompts: PromptLibrary | None = None,
) -> RankOutcome:
    return _rank(RankStrategy.EXPERT_WITH_CONTEXT, case, candidates, backend, config, prompts, None)


def rank_expert_image_only(
    case: DermCase,
    candidates: CandidateSet,
    backend: Backend,
    config: GatewayConfig,
    prompts: PromptLibrary | None = None,
) -> RankOutcome:
    return _rank(RankStrategy.EXPERT_IMAGE_ONLY, case, candidates, backend, config, prompts, None)
