"""Rule-based similarity judging of two condition names."""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass
from typing import Protocol

from .cases import ConditionName
from .errors import JudgeParseError
from .gateway import Backend, Conversation, GatewayConfig, Stage, assistant, complete, user
from .prompts import PromptLibrary, default_library

_VERDICT = re.compile(r"VERDICT\s*:\s*(SIMILAR|DIFFERENT)\s*[,;]?\s*RULE\s*:\s*(\d+|NONE)", re.IGNORECASE)
_REASK = "Your answer did not end with the required line. Reply with only: VERDICT: SIMILAR|DIFFERENT, RULE: <n>|NONE"
RULES_CHECKED = 4


@dataclass(frozen=True)
class SimilarityVerdict:
    similar: bool
    rule_applied: int  # 0 = decided without a model call
    rationale: str = ""


class Judge(Protocol):
    def judge(self, a: ConditionName, b: ConditionName) -> SimilarityVerdict: ...


class ExactJudge:
    """Name identity only; never calls a model."""

    def judge(self, a: ConditionName, b: ConditionName) -> SimilarityVerdict:
        same = a.normalized == b.normalized
        return SimilarityVerdict(same, 0, "normalized names equal" if same else "normalized names differ")


def parse_verdict(text: str) -> SimilarityVerdict:
    matches = list(_VERDICT.finditer(text or ""))
    if not matches:
        raise JudgeParseError("no VERDICT line")
    m = matches[-1]
    similar = m.group(1).upper() == "SIMILAR"
    rule = m.group(2).upper()
    if similar:
        if rule == "NONE" or not 1 <= int(rule[:3]) <= RULES_CHECKED:
            raise JudgeParseError(f"SIMILAR verdict needs a rule 1-4, got {rule}")
        return SimilarityVerdict(True, int(rule), text.strip())
    # a DIFFERENT verdict means every rule was checked and none applied
    if rule != "NONE" and not 1 <= int(rule[:3]) <= RULES_CHECKED:
        raise JudgeParseError(f"rule {rule} out of range")
    return SimilarityVerdict(False, RULES_CHECKED if rule == "NONE" else int(rule), text.strip())


def judge_similarity(
    a: ConditionName,
    b: ConditionName,
    backend: Backend,
    config: GatewayConfig,
    *,
    prompts: PromptLibrary | None = None,
    case_id: str = "",
) -> SimilarityVerdict:
    if a.normalized == b.normalized:
        return SimilarityVerdict(True, 0, "same name")
    prompts = prompts or default_library()
    conversation = Conversation.of(user(prompts.render("judge", a=a.normalized, b=b.normalized)))
    reply = complete(conversation, config, backend, case_id=case_id, stage=Stage.JUDGE)
    try:
        return parse_verdict(reply)
    except JudgeParseError:
        pass
    conversation = conversation.append(assistant(reply), user(_REASK))
    reply = complete(conversation, config, backend, case_id=case_id, stage=Stage.JUDGE)
    return parse_verdict(reply)


class LlmJudge:
    """Model-backed judge with a cache keyed by the unordered name pair."""

    def __init__(self, backend: Backend, config: GatewayConfig, prompts: PromptLibrary | None = None) -> None:
        self.backend = backend
        self.config = config
        self.prompts = prompts
        self._cache: dict[frozenset[str], SimilarityVerdict] = {}
        self._lock = threading.Lock()

    def judge(self, a: ConditionName, b: ConditionName) -> SimilarityVerdict:
        if a.normalized == b.normalized:
            return SimilarityVerdict(True, 0, "same name")
        key = frozenset((a.normalized, b.normalized))
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        first, second = sorted(key)
        verdict = judge_similarity(
            ConditionName(first, first),
            ConditionName(second, second),
            self.backend,
            self.config,
            prompts=self.prompts,
            case_id=f"judge:{first}|{second}",
        )
        with self._lock:
            self._cache.setdefault(key, verdict)
        return verdict
