"""Candidate retrieval: ask the vision model for a differential list."""

from __future__ import annotations

import ast
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable

from .cases import ConditionName, DermCase, normalize_condition
from .errors import DermPipeError, EmptyName, NoCandidatesFound
from .gateway import Backend, Conversation, GatewayConfig, Stage, complete, user
from .prompts import PromptLibrary, default_library
from .textmatch import strip_markup

log = logging.getLogger(__name__)

LIST_INSTRUCTION = "End your answer with a JSON array of the condition names only."
DEFAULT_MAX_CANDIDATES = 10


class RetrievalStrategy(str, Enum):
    IMAGE_ONLY = "image_only"
    NAIVE_COT = "naive_cot"
    EXPERT_COT = "expert_cot"

    @property
    def template(self) -> str:
        return f"retrieval_{self.value}"


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple[ConditionName, ...]
    strategy: RetrievalStrategy
    source_case: str

    def __post_init__(self) -> None:
        if not self.candidates:
            raise ValueError("a candidate set needs at least one candidate")
        keys = [c.normalized for c in self.candidates]
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate candidates: {keys}")

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    @property
    def names(self) -> list[str]:
        return [c.normalized for c in self.candidates]

    def __contains__(self, item: object) -> bool:
        if isinstance(item, ConditionName):
            item = item.normalized
        return item in self.names

    def to_dict(self) -> dict[str, Any]:
        return {
            "source_case": self.source_case,
            "strategy": self.strategy.value,
            "candidates": [{"name": c.normalized, "raw": c.raw} for c in self.candidates],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CandidateSet":
        return cls(
            candidates=tuple(ConditionName(c["raw"], c["name"]) for c in d["candidates"]),
            strategy=RetrievalStrategy(d["strategy"]),
            source_case=d["source_case"],
        )

    @classmethod
    def of(cls, names: Iterable[str], source_case: str = "", strategy=RetrievalStrategy.NAIVE_COT) -> "CandidateSet":
        return cls(tuple(dedupe(normalize_condition(n) for n in names)), RetrievalStrategy(strategy), source_case)


def dedupe(names: Iterable[ConditionName]) -> list[ConditionName]:
    seen: set[str] = set()
    out = []
    for n in names:
        if n.normalized not in seen:
            seen.add(n.normalized)
            out.append(n)
    return out


def build_retrieval_prompt(
    case: DermCase,
    strategy: RetrievalStrategy,
    prompts: PromptLibrary | None = None,
) -> Conversation:
    prompts = prompts or default_library()
    strategy = RetrievalStrategy(strategy)
    if strategy is RetrievalStrategy.IMAGE_ONLY:
        text = prompts.render(strategy.template)
    else:
        text = prompts.render(strategy.template, query=case.query)
    return Conversation.of(user(text, *case.images, LIST_INSTRUCTION))


# -- parsing ------------------------------------------------------------------

_FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)
_LIST_ITEM = re.compile(r"^\s*[*_]*\s*(?:\d{1,3}\s*[.:)]|[-*•])[*_]*\s+(.*\S)")
_ITEM_SPLIT = re.compile(r"\s*(?::|\s[-–—]\s)")
_MAX_BRACKET_TRIES = 32


def _as_names(value: Any) -> list[ConditionName] | None:
    if not isinstance(value, list) or not value or not all(isinstance(v, str) for v in value):
        return None
    names = []
    for v in value:
        try:
            names.append(normalize_condition(v))
        except EmptyName:
            continue
    return names or None


def _load_array(text: str) -> list[ConditionName] | None:
    text = text.strip()
    if not text.startswith("["):
        return None
    try:
        return _as_names(json.loads(text))
    except (ValueError, RecursionError):
        pass
    try:
        # model answers often use Python list syntax: ['a', 'b']
        return _as_names(ast.literal_eval(text))
    except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
        return None


def _from_fences(response: str) -> list[ConditionName] | None:
    for block in reversed(_FENCE.findall(response)):
        names = _load_array(block)
        if names:
            return names
    return None


def _from_trailing_array(response: str) -> list[ConditionName] | None:
    body = response.rstrip().rstrip("`").rstrip()
    if not body.endswith("]"):
        return None
    pos = len(body)
    for _ in range(_MAX_BRACKET_TRIES):
        pos = body.rfind("[", 0, pos)
        if pos < 0:
            return None
        names = _load_array(body[pos:])
        if names:
            return names
    return None


def _from_list_lines(response: str) -> list[ConditionName]:
    names = []
    for line in response.splitlines():
        m = _LIST_ITEM.match(line)
        if not m:
            continue
        item = strip_markup(_ITEM_SPLIT.split(m.group(1), maxsplit=1)[0])
        try:
            names.append(normalize_condition(item))
        except EmptyName:
            continue
    return names


def parse_candidate_list(response: str) -> list[ConditionName]:
    """Extract condition names from a retrieval answer.

    Tries the last fenced JSON array, then a bare array closing the answer,
    then numbered / bulleted list lines. Output is normalized and
    deduplicated in order of first appearance.
    """
    if not isinstance(response, str):
        raise NoCandidatesFound("response is not text")
    names = _from_fences(response) or _from_trailing_array(response) or _from_list_lines(response)
    names = dedupe(names)
    if not names:
        raise NoCandidatesFound("no condition list found in response")
    return names


# -- retrieval ----------------------------------------------------------------


def retrieve(
    case: DermCase,
    strategy: RetrievalStrategy,
    backend: Backend,
    config: GatewayConfig,
    *,
    max_candidates: int = DEFAULT_MAX_CANDIDATES,
    prompts: PromptLibrary | None = None,
) -> CandidateSet:
    strategy = RetrievalStrategy(strategy)
    conversation = build_retrieval_prompt(case, strategy, prompts)
    response = complete(conversation, config, backend, case_id=case.case_id, stage=Stage.RETRIEVAL)
    names = parse_candidate_list(response)
    return CandidateSet(tuple(names[:max_candidates]), strategy, case.case_id)


@dataclass(frozen=True)
class RetrievalResult:
    case_id: str
    candidates: CandidateSet | None = None
    error: Exception | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def retrieve_batch(
    cases: Iterable[DermCase],
    strategy: RetrievalStrategy,
    backend: Backend,
    config: GatewayConfig,
    *,
    max_candidates: int = DEFAULT_MAX_CANDIDATES,
    prompts: PromptLibrary | None = None,
    max_workers: int = 4,
) -> list[RetrievalResult]:
    """Retrieve for every case; one case failing never stops the others."""

    def one(case: DermCase) -> RetrievalResult:
        try:
            cs = retrieve(case, strategy, backend, config, max_candidates=max_candidates, prompts=prompts)
            return RetrievalResult(case.case_id, candidates=cs)
        except DermPipeError as exc:
            log.warning("retrieval failed for %s: %s", case.case_id, exc)
            return RetrievalResult(case.case_id, error=exc)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(one, list(cases)))
