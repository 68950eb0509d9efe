"""Style alignment of final answers, and rule learning by hill climbing."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from .cases import DermCase
from .errors import CriticParseError, ParseError
from .gateway import Backend, Conversation, GatewayConfig, Stage, complete, user
from .metrics import corpus_delta_bleu, delta_bleu
from .prompts import PromptLibrary, default_library

log = logging.getLogger(__name__)

MAX_RULES = 20


class Provenance(str, Enum):
    BUNDLED = "bundled"
    LEARNED = "learned"


@dataclass(frozen=True)
class StyleRule:
    index: int
    title: str
    example: str = ""
    explanation: str = ""

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError("rule index starts at 1")
        if not self.title.strip():
            raise ValueError("rule title is empty")

    def render(self) -> str:
        lines = [f"{self.index}. {self.title}"]
        if self.example:
            lines.append(f"- Example: “{self.example}”")
        if self.explanation:
            lines.append(f"- Explanation: {self.explanation}")
        return "\n".join(lines)


@dataclass(frozen=True)
class RuleSet:
    rules: tuple[StyleRule, ...]
    version: int = 1
    provenance: Provenance = Provenance.BUNDLED

    def __post_init__(self) -> None:
        if not 1 <= len(self.rules) <= MAX_RULES:
            raise ValueError(f"a rule set holds 1-{MAX_RULES} rules, got {len(self.rules)}")
        if [r.index for r in self.rules] != list(range(1, len(self.rules) + 1)):
            raise ValueError("rule indices must run 1..n in order")

    @classmethod
    def from_rules(cls, items: Sequence[dict[str, Any]], version: int = 1, provenance=Provenance.LEARNED) -> "RuleSet":
        """Build from title/example/explanation dicts, numbering them 1..n."""
        rules = tuple(
            StyleRule(
                i,
                str(item["title"]).strip(),
                str(item.get("example", "")).strip(),
                str(item.get("explanation", "")).strip(),
            )
            for i, item in enumerate(items, start=1)
        )
        return cls(rules, version, Provenance(provenance))

    def render(self) -> str:
        return "\n\n".join(r.render() for r in self.rules)

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "provenance": self.provenance.value,
            "rules": [
                {"index": r.index, "title": r.title, "example": r.example, "explanation": r.explanation}
                for r in self.rules
            ],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RuleSet":
        rules = tuple(
            StyleRule(int(r["index"]), r["title"], r.get("example", ""), r.get("explanation", "")) for r in d["rules"]
        )
        return cls(rules, int(d.get("version", 1)), Provenance(d.get("provenance", "learned")))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RuleSet":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def bumped(self, provenance: Provenance | None = None) -> "RuleSet":
        return replace(self, version=self.version + 1, provenance=provenance or self.provenance)


def bundled_rules() -> RuleSet:
    raw = resources.files("dermpipe").joinpath("data/rules_bundled.json").read_text(encoding="utf-8")
    return RuleSet.from_dict(json.loads(raw))


@dataclass(frozen=True)
class ApoTrainPair:
    case_id: str
    draft: str
    reference: str

    def __post_init__(self) -> None:
        if not self.draft.strip() or not self.reference.strip():
            raise ValueError(f"{self.case_id}: draft and reference must be non-empty")


def load_pairs(path: str | Path) -> list[ApoTrainPair]:
    """Read a JSONL file of {case_id, draft, reference} objects."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pairs.append(ApoTrainPair(str(obj["case_id"]), obj["draft"], obj["reference"]))
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, f"invalid JSON: {exc.msg}") from exc
            except (KeyError, TypeError, AttributeError) as exc:
                raise ParseError(lineno, f"expected case_id, draft and reference: {exc}") from exc
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from exc
    return pairs


# -- rewriting ----------------------------------------------------------------


def draft_response(
    case: DermCase,
    diagnosis: str,
    backend: Backend,
    config: GatewayConfig,
    prompts: PromptLibrary | None = None,
) -> str:
    """Unstyled patient reply stating the diagnosis and a treatment plan."""
    prompts = prompts or default_library()
    text = prompts.render("aligner_draft", query=case.query, diagnosis=diagnosis)
    return complete(Conversation.of(user(text)), config, backend, case_id=case.case_id, stage=Stage.ALIGN, agent="drafter")


def apply_rules(
    draft: str,
    rules: RuleSet,
    backend: Backend,
    config: GatewayConfig,
    *,
    prompts: PromptLibrary | None = None,
    case_id: str = "",
) -> str:
    """Rewrite ``draft`` under ``rules``; an empty reply keeps the draft."""
    if not draft.strip():
        raise ValueError("draft is empty")
    prompts = prompts or default_library()
    text = prompts.render("aligner", rules=rules.render(), draft=draft)
    reply = complete(Conversation.of(user(text)), config, backend, case_id=case_id, stage=Stage.ALIGN, agent="aligner")
    if not reply.strip():
        log.warning("empty aligner reply for %r; keeping the draft", case_id)
        return draft
    return reply


# -- APO ----------------------------------------------------------------------


@dataclass(frozen=True)
class ApoConfig:
    max_iterations: int = 5
    min_gain: float = 0.01  # on the [0, 1] DeltaBLEU scale
    worst_k: int = 3
    max_rules: int = MAX_RULES
    max_workers: int = 4

    def __post_init__(self) -> None:
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.worst_k < 1 or self.max_workers < 1:
            raise ValueError("worst_k and max_workers must be >= 1")
        if not 1 <= self.max_rules <= MAX_RULES:
            raise ValueError(f"max_rules must be in 1..{MAX_RULES}")


@dataclass
class ApoIteration:
    iteration: int
    current_score: float
    candidate_score: float | None
    accepted: bool
    error: str = ""


@dataclass
class ApoResult:
    rules: RuleSet
    initial_score: float | None
    final_score: float | None
    iterations: list[ApoIteration] = field(default_factory=list)

    @property
    def skipped(self) -> int:
        return sum(1 for it in self.iterations if it.error)


_FENCED = re.compile(r"```(?:json)?[^\n`]*\n(.*?)```", re.DOTALL)


def parse_critic_reply(text: str, version: int, max_rules: int = MAX_RULES) -> RuleSet:
    """The replacement RuleSet in a critic reply (last fenced JSON block, or
    the whole reply when it is bare JSON)."""
    blocks = _FENCED.findall(text or "")
    raw = blocks[-1] if blocks else (text or "").strip()
    try:
        obj = json.loads(raw)
    except (ValueError, RecursionError) as exc:
        raise CriticParseError(f"critic reply is not JSON: {exc}") from exc
    items = obj.get("rules") if isinstance(obj, dict) else obj
    if not isinstance(items, list) or not items:
        raise CriticParseError("critic reply has no rule list")
    if len(items) > max_rules:
        raise CriticParseError(f"critic proposed {len(items)} rules, cap is {max_rules}")
    if not all(isinstance(i, dict) and isinstance(i.get("title"), str) for i in items):
        raise CriticParseError("every rule needs a string title")
    try:
        return RuleSet.from_rules(items, version=version, provenance=Provenance.LEARNED)
    except ValueError as exc:
        raise CriticParseError(str(exc)) from exc


def align_all(
    pairs: Sequence[ApoTrainPair],
    rules: RuleSet,
    backend: Backend,
    config: GatewayConfig,
    *,
    prompts: PromptLibrary | None = None,
    max_workers: int = 4,
) -> list[str]:
    def one(pair: ApoTrainPair) -> str:
        return apply_rules(pair.draft, rules, backend, config, prompts=prompts, case_id=pair.case_id)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(one, pairs))


def score_outputs(outputs: Sequence[str], pairs: Sequence[ApoTrainPair]) -> float:
    return corpus_delta_bleu(outputs, [[(p.reference, 1.0)] for p in pairs])


def _examples(pairs, outputs, k: int) -> str:
    scored = sorted(
        zip(pairs, outputs),
        key=lambda po: (delta_bleu(po[1], [(po[0].reference, 1.0)]), po[0].case_id),
    )
    chunks = []
    for pair, out in scored[:k]:
        chunks.append(f"[{pair.case_id}]\nDraft: {pair.draft}\nRewritten: {out}\nDermatologist: {pair.reference}")
    return "\n\n".join(chunks)


def apo_optimize(
    pairs: Sequence[ApoTrainPair],
    initial: RuleSet,
    backend: Backend,
    config: GatewayConfig,
    apo: ApoConfig | None = None,
    *,
    prompts: PromptLibrary | None = None,
) -> ApoResult:
    """Greedy hill climb over rule sets scored by corpus DeltaBLEU.

    A critic's proposal replaces the current set only if it gains at least
    ``min_gain``, so the returned score never drops below the initial one.
    """
    apo = apo or ApoConfig()
    prompts = prompts or default_library()
    pairs = list(pairs)
    if not pairs or apo.max_iterations == 0:
        return ApoResult(initial, None, None)

    current = initial
    outputs = align_all(pairs, current, backend, config, prompts=prompts, max_workers=apo.max_workers)
    score = score_outputs(outputs, pairs)
    result = ApoResult(initial, score, score)
    for it in range(1, apo.max_iterations + 1):
        critic_prompt = prompts.render(
            "apo_critic",
            rules_json=json.dumps(current.to_dict()["rules"], indent=2, ensure_ascii=False),
            examples=_examples(pairs, outputs, apo.worst_k),
            max_rules=apo.max_rules,
        )
        reply = complete(
            Conversation.of(user(critic_prompt)), config, backend, case_id=f"apo:{it}", stage=Stage.APO, agent="critic"
        )
        try:
            candidate = parse_critic_reply(reply, current.version + 1, apo.max_rules)
        except CriticParseError as exc:
            log.info("APO iteration %d skipped: %s", it, exc)
            result.iterations.append(ApoIteration(it, score, None, False, str(exc)))
            continue
        cand_outputs = align_all(pairs, candidate, backend, config, prompts=prompts, max_workers=apo.max_workers)
        cand_score = score_outputs(cand_outputs, pairs)
        accepted = cand_score - score >= apo.min_gain
        result.iterations.append(ApoIteration(it, score, cand_score, accepted))
        if accepted:
            current, outputs, score = candidate, cand_outputs, cand_score
    result.rules = current
    result.final_score = score
    return result
