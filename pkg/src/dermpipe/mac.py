"""Multi-agent conversation re-ranker.

A Coordinator hands each candidate disease to one Diagnostic Specialist.
Specialists argue for their disease and critique the others, the Coordinator
compiles the findings, and an Admin either asks named specialists to refine
their evidence or settles on a final diagnosis. The engine drives this as an
explicit state machine with a hard cap on model calls.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Sequence, Union

from .cases import ConditionName, DermCase, normalize_condition
from .errors import (
    AmbiguousDecision,
    AmbiguousDiagnosis,
    CallBudgetExceeded,
    DermPipeError,
    EmptyName,
    IllegalTransition,
    IncompleteFinding,
    MacAborted,
    NoDiagnosisFound,
    TooFewCandidates,
    TooManyCandidates,
    UnknownSpecialist,
)
from .gateway import (
    Backend,
    ChatMessage,
    Conversation,
    GatewayConfig,
    Stage,
    assistant,
    complete,
    system,
    user,
)
from .prompts import PromptLibrary, default_library
from .reranker import RankOutcome, RankStrategy
from .retrieval import CandidateSet
from .textmatch import find_mentions, strip_markup

log = logging.getLogger(__name__)

COORDINATOR = "Coordinator"
ADMIN = "Admin"
OBSERVER = "Observer"


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class MacConfig:
    min_candidates: int = 3
    max_candidates: int = 5
    max_revision_rounds: int = 2
    termination_token: str = "TERMINATE"
    role_prompts: dict[str, str] = field(default_factory=dict)
    specialist_names: tuple[str, ...] = ()
    describe_images: bool = True

    def __post_init__(self) -> None:
        if not 2 <= self.min_candidates <= self.max_candidates:
            raise ValueError("need 2 <= min_candidates <= max_candidates")
        if self.max_revision_rounds < 0:
            raise ValueError("max_revision_rounds must be >= 0")
        token = self.termination_token
        if not token or token != token.upper() or not any(ch.isalpha() for ch in token):
            raise ValueError("termination_token must be non-empty and uppercase")
        unknown = set(self.role_prompts) - {"coordinator", "admin", "specialist"}
        if unknown:
            raise ValueError(f"unknown roles in role_prompts: {sorted(unknown)}")

    def call_budget(self, n: int) -> int:
        """Upper bound on model calls for one run with ``n`` candidates.

        assignment + n specialists + compilation
        + (rounds + 1) x (admin evaluation + up to n refinements) + forced final
        """
        return 1 + n + 1 + (self.max_revision_rounds + 1) * (1 + n) + 1


# -- state machine ------------------------------------------------------------


class Phase(str, Enum):
    INIT = "Init"
    ASSIGNMENT = "Assignment"
    SPECIALIST_ANALYSIS = "SpecialistAnalysis"
    COMPILATION = "Compilation"
    ADMIN_EVALUATION = "AdminEvaluation"
    REVISION = "Revision"
    FINAL_DIAGNOSIS = "FinalDiagnosis"
    TERMINATED = "Terminated"


@dataclass(frozen=True)
class MacState:
    phase: Phase
    index: int | None = None  # specialist index or revision round

    def __str__(self) -> str:
        return self.phase.value if self.index is None else f"{self.phase.value}({self.index})"

    @classmethod
    def parse(cls, label: str) -> "MacState":
        m = re.fullmatch(r"(\w+)(?:\((\d+)\))?", label)
        if not m:
            raise IllegalTransition(f"bad state label {label!r}")
        try:
            phase = Phase(m.group(1))
        except ValueError:
            raise IllegalTransition(f"unknown phase {m.group(1)!r}") from None
        return cls(phase, int(m.group(2)) if m.group(2) else None)


def legal_successors(state: MacState, n: int, rounds_done: int, max_rounds: int) -> list[MacState]:
    p = state.phase
    if p is Phase.INIT:
        return [MacState(Phase.ASSIGNMENT)]
    if p is Phase.ASSIGNMENT:
        return [MacState(Phase.SPECIALIST_ANALYSIS, 0)]
    if p is Phase.SPECIALIST_ANALYSIS:
        i = state.index or 0
        if i + 1 < n:
            return [MacState(Phase.SPECIALIST_ANALYSIS, i + 1)]
        return [MacState(Phase.COMPILATION)]
    if p is Phase.COMPILATION:
        return [MacState(Phase.ADMIN_EVALUATION)]
    if p is Phase.ADMIN_EVALUATION:
        nxt = [MacState(Phase.FINAL_DIAGNOSIS)]
        if rounds_done < max_rounds:
            nxt.insert(0, MacState(Phase.REVISION, rounds_done + 1))
        return nxt
    if p is Phase.REVISION:
        return [MacState(Phase.ADMIN_EVALUATION)]
    if p is Phase.FINAL_DIAGNOSIS:
        return [MacState(Phase.TERMINATED)]
    return []


def validate_transitions(states: Sequence[MacState | str], n: int, max_rounds: int) -> None:
    """Raise IllegalTransition unless ``states`` is a legal path from Init."""
    path = [s if isinstance(s, MacState) else MacState.parse(s) for s in states]
    if not path or path[0] != MacState(Phase.INIT):
        raise IllegalTransition("a run must start in Init")
    rounds = 0
    for prev, cur in zip(path, path[1:]):
        if cur not in legal_successors(prev, n, rounds, max_rounds):
            raise IllegalTransition(f"{prev} -> {cur}")
        if cur.phase is Phase.REVISION:
            rounds += 1


class _Machine:
    def __init__(self, n: int, max_rounds: int) -> None:
        self.n = n
        self.max_rounds = max_rounds
        self.state = MacState(Phase.INIT)
        self.history = [self.state]
        self.rounds = 0

    def advance(self, nxt: MacState) -> None:
        if nxt not in legal_successors(self.state, self.n, self.rounds, self.max_rounds):
            raise IllegalTransition(f"{self.state} -> {nxt}")
        if nxt.phase is Phase.REVISION:
            self.rounds += 1
        self.state = nxt
        self.history.append(nxt)


# -- transcript types ---------------------------------------------------------


@dataclass(frozen=True)
class Assignment:
    specialist_name: str
    disease: ConditionName


@dataclass(frozen=True)
class SpecialistFinding:
    specialist_name: str
    disease: ConditionName
    evidence: str
    critiques: dict[str, str]  # other candidate (normalized) -> critique

    def to_dict(self) -> dict[str, Any]:
        return {
            "specialist_name": self.specialist_name,
            "disease": self.disease.normalized,
            "evidence": self.evidence,
            "critiques": dict(self.critiques),
        }


@dataclass
class RefinementRound:
    instructions: str
    targets: list[str]
    refined_evidence: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class RequestRevision:
    targets: tuple[str, ...]
    instructions: str


@dataclass(frozen=True)
class Finalize:
    diagnosis_text: str


AdminDecision = Union[RequestRevision, Finalize]


@dataclass
class LoggedMessage:
    message: ChatMessage
    state: MacState


@dataclass
class MacTranscript:
    case_id: str
    candidates: CandidateSet
    clinical_observation: str = ""
    observation_source: str = "provided"
    assignments: list[Assignment] = field(default_factory=list)
    findings: list[SpecialistFinding] = field(default_factory=list)
    consolidation: str = ""
    consolidation_fallback: bool = False
    refinement_rounds: list[RefinementRound] = field(default_factory=list)
    final_diagnosis: ConditionName | None = None
    terminated: bool = False
    forced_finalize: bool = False
    states: list[MacState] = field(default_factory=list)
    log: list[LoggedMessage] = field(default_factory=list)
    llm_calls: int = 0
    call_budget: int = 0

    @property
    def messages(self) -> Conversation:
        return Conversation(tuple(m.message for m in self.log))

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "candidates": self.candidates.names,
            "clinical_observation": self.clinical_observation,
            "observation_source": self.observation_source,
            "assignments": [
                {"specialist_name": a.specialist_name, "disease": a.disease.normalized} for a in self.assignments
            ],
            "findings": [f.to_dict() for f in self.findings],
            "consolidation": self.consolidation,
            "consolidation_fallback": self.consolidation_fallback,
            "refinement_rounds": [
                {"instructions": r.instructions, "targets": r.targets, "refined_evidence": r.refined_evidence}
                for r in self.refinement_rounds
            ],
            "final_diagnosis": self.final_diagnosis.normalized if self.final_diagnosis else None,
            "terminated": self.terminated,
            "forced_finalize": self.forced_finalize,
            "llm_calls": self.llm_calls,
            "call_budget": self.call_budget,
            "states": [str(s) for s in self.states],
            "messages": [
                {
                    "state": str(m.state),
                    "role": m.message.role.value,
                    "speaker": m.message.speaker_name,
                    "text": m.message.text,
                }
                for m in self.log
            ],
        }


# -- assignment ---------------------------------------------------------------


def check_candidate_count(candidates: CandidateSet, config: MacConfig) -> None:
    n = len(candidates)
    if n > config.max_candidates:
        raise TooManyCandidates(f"MAC supports at most {config.max_candidates} candidates, got {n}")
    if n < config.min_candidates:
        raise TooFewCandidates(f"MAC needs at least {config.min_candidates} candidates, got {n}")


def assign_diseases(candidates: CandidateSet, config: MacConfig) -> list[Assignment]:
    """One specialist per candidate, in candidate order."""
    check_candidate_count(candidates, config)
    names = list(config.specialist_names) or [f"Specialist_{i}" for i in range(1, len(candidates) + 1)]
    if len(names) < len(candidates):
        raise ValueError(f"{len(candidates)} candidates but only {len(names)} specialist names")
    if len(set(names)) != len(names):
        raise ValueError("specialist names must be distinct")
    return [Assignment(name, disease) for name, disease in zip(names, candidates)]


# -- termination & diagnosis parsing -----------------------------------------


def detect_termination(message: str, token: str = "TERMINATE") -> bool:
    """Exact, case-sensitive substring test."""
    if not token or token != token.upper():
        raise ValueError("token must be non-empty and uppercase")
    return token in (message or "")


_FINAL_LINE = re.compile(r"^[\s*_#>-]*FINAL_DIAGNOSIS[*_]*\s*:[*_]*\s*(.*?)\s*$", re.MULTILINE)


def _candidate_from_fragment(fragment: str, candidates: CandidateSet) -> ConditionName | None:
    try:
        name = normalize_condition(strip_markup(fragment).strip("'\"[]<>"))
    except EmptyName:
        return None
    for c in candidates:
        if c.normalized == name.normalized:
            return c
    distinct = {m.name for m in find_mentions(fragment, candidates.names)}
    if len(distinct) == 1:
        return _by_name(candidates, distinct.pop())
    return None


def _by_name(candidates: CandidateSet, name: str) -> ConditionName:
    for c in candidates:
        if c.normalized == name:
            return c
    raise KeyError(name)


def extract_final_diagnosis(admin_text: str, candidates: CandidateSet) -> ConditionName:
    """The diagnosis named by a finalizing Admin message.

    A ``FINAL_DIAGNOSIS: <name>`` line naming a candidate wins. Otherwise the
    whole text is scanned for candidate names, longest match first, and exactly
    one distinct candidate must be mentioned.
    """
    text = admin_text if isinstance(admin_text, str) else ""
    for m in reversed(list(_FINAL_LINE.finditer(text))):
        hit = _candidate_from_fragment(m.group(1), candidates)
        if hit is not None:
            return hit
    mentioned: list[str] = []
    for m in find_mentions(text, candidates.names):
        if m.name not in mentioned:
            mentioned.append(m.name)
    if len(mentioned) == 1:
        return _by_name(candidates, mentioned[0])
    if len(mentioned) > 1:
        raise AmbiguousDiagnosis(mentioned)
    raise NoDiagnosisFound("no candidate named in the final message")


# -- specialist output parsing -----------------------------------------------

_EVIDENCE_HDR = re.compile(r"^[\s*_#>-]*EVIDENCE\b[^:\n]*:[*_]*\s*(.*)$")
_CRITIQUE_HDR = re.compile(r"^[\s*_#>-]*CRITIQUE\s+(.+?)[*_]*\s*:[*_]*\s*(.*)$")
_SUPPORT_HDR = re.compile(r"^[\s*_#>-]*supporting evidence\b[^:\n]*:[*_]*\s*(.*)$", re.IGNORECASE)
_CRITIQUES_HDR = re.compile(r"^[\s*_#>-]*critiques?\b[^:\n]*:[*_]*\s*$", re.IGNORECASE)
_ITEM = re.compile(r"^\s*(?:\d{1,3}[.)]|[-*•])\s+(.*)$")


def _match_other(fragment: str, others: dict[str, ConditionName]) -> str | None:
    try:
        key = normalize_condition(strip_markup(fragment).strip("'\"[]<>")).normalized
    except EmptyName:
        return None
    if key in others:
        return key
    distinct = {m.name for m in find_mentions(fragment, others)}
    return distinct.pop() if len(distinct) == 1 else None


def _parse_marked(lines: list[str], others: dict[str, ConditionName]) -> tuple[str, dict[str, str]]:
    evidence: list[str] = []
    critiques: dict[str, list[str]] = {}
    current: list[str] | None = None
    for line in lines:
        if m := _EVIDENCE_HDR.match(line):
            current = evidence
            current.append(m.group(1))
            continue
        if m := _CRITIQUE_HDR.match(line):
            key = _match_other(m.group(1), others)
            if key is None:
                current = None
                continue
            current = critiques.setdefault(key, [])
            current.append(m.group(2))
            continue
        if current is not None:
            current.append(line)
    return _join(evidence), {k: _join(v) for k, v in critiques.items() if _join(v)}


def _parse_prose(lines: list[str], others: dict[str, ConditionName]) -> tuple[str, dict[str, str]]:
    evidence: list[str] = []
    critiques: dict[str, list[str]] = {}
    mode = None
    current: list[str] | None = None
    for line in lines:
        if m := _SUPPORT_HDR.match(line):
            mode, current = "evidence", evidence
            evidence.append(m.group(1))
            continue
        if _CRITIQUES_HDR.match(line):
            mode, current = "critiques", None
            continue
        if mode == "critiques":
            if m := _ITEM.match(line):
                head, sep, rest = m.group(1).partition(":")
                key = _match_other(head, others) if sep else None
                if key is None:
                    current = None
                    continue
                current = critiques.setdefault(key, [])
                current.append(rest)
                continue
            if not line.strip():
                current = None
                continue
        if current is not None:
            current.append(line)
    return _join(evidence), {k: _join(v) for k, v in critiques.items() if _join(v)}


def _join(parts: list[str]) -> str:
    return strip_markup("\n".join(parts).strip()) if parts else ""


def parse_specialist_reply(reply: str, disease: ConditionName, candidates: CandidateSet) -> tuple[str, dict[str, str]]:
    """Evidence text and critiques keyed by the other candidates' names.

    Marker lines (``EVIDENCE:`` / ``CRITIQUE <name>:``) are read first; the
    free-form "Supporting Evidence ... / Critiques ..." layout fills any gaps.
    """
    others = {c.normalized: c for c in candidates if c.normalized != disease.normalized}
    lines = (reply or "").splitlines()
    evidence, critiques = _parse_marked(lines, others)
    if not evidence or len(critiques) < len(others):
        prose_evidence, prose_critiques = _parse_prose(lines, others)
        evidence = evidence or prose_evidence
        for k, v in prose_critiques.items():
            critiques.setdefault(k, v)
    ordered = {k: critiques[k] for k in others if k in critiques}
    return evidence, ordered


def render_consolidation(findings: Sequence[SpecialistFinding]) -> str:
    """Deterministic compilation used when the Coordinator returns nothing."""
    lines = ["Compiled findings:"]
    for i, f in enumerate(findings, start=1):
        lines.append(f"{i}. {f.disease.normalized}")
        lines.append(f"- Supporting Evidence ({f.specialist_name}): {f.evidence}")
        against = [
            f"{other.specialist_name}: {other.critiques[f.disease.normalized]}"
            for other in findings
            if f.disease.normalized in other.critiques
        ]
        lines.append("- Consolidated Critiques: " + (" | ".join(against) if against else "none"))
    return "\n".join(lines)


_REVISE_LINE = re.compile(r"^[\s*_#>-]*REVISE[*_]*\s*:[*_]*\s*(.*?)\s*$", re.MULTILINE)
_TARGET_SPLIT = re.compile(r"\s*(?:,|;|&|\band\b)\s*")


def parse_admin_decision(text: str, specialists: Sequence[str], token: str) -> AdminDecision:
    """Classify an Admin message.

    Raises AmbiguousDecision when both or neither marker is present and
    UnknownSpecialist when a REVISE target is not a specialist.
    """
    text = text or ""
    revise = list(_REVISE_LINE.finditer(text))
    terminate = detect_termination(text, token)
    if bool(revise) == terminate:
        raise AmbiguousDecision("expected exactly one of a REVISE line or " + token)
    if terminate:
        return Finalize(text)
    lookup = {s.lower(): s for s in specialists}
    targets: list[str] = []
    for m in revise:
        for raw in _TARGET_SPLIT.split(m.group(1)):
            name = raw.strip(" .'\"*`")
            if not name:
                continue
            if name.lower() not in lookup:
                raise UnknownSpecialist(f"no specialist named {name!r}")
            if lookup[name.lower()] not in targets:
                targets.append(lookup[name.lower()])
    if not targets:
        raise AmbiguousDecision("REVISE line names no specialist")
    return RequestRevision(tuple(targets), text)


# -- engine -------------------------------------------------------------------


def _specialist_instruction(disease: ConditionName, others: Sequence[str]) -> str:
    lines = [
        "Structure your answer with these markers, each at the start of its own line:",
        f"EVIDENCE: <evidence supporting {disease.normalized}>",
    ]
    lines += [f"CRITIQUE {o}: <why {o} fits this case worse>" for o in others]
    return "\n".join(lines)


def _decision_instruction(token: str) -> str:
    return (
        "End your message in one of two ways:\n"
        '- to ask specialists for stronger evidence, add a line "REVISE: <comma-separated specialist names>" '
        "and say what each of them must address;\n"
        '- to conclude, add a line "FINAL_DIAGNOSIS: <one of the probable diseases>" '
        f"and finish with {token}."
    )


@dataclass
class _Ctx:
    case: DermCase
    candidates: CandidateSet
    config: MacConfig
    gateway: GatewayConfig
    backend: Backend
    prompts: PromptLibrary
    transcript: MacTranscript
    machine: _Machine
    task_text: str

    def role_prompt(self, role: str, **fields: str) -> str:
        raw = self.config.role_prompts.get(role)
        if raw is not None:
            return raw.format(**fields)
        return self.prompts.render(f"mac_{role}", **fields)

    def call(self, conversation: Conversation, agent: str) -> str:
        t = self.transcript
        if t.llm_calls >= t.call_budget:
            raise CallBudgetExceeded(f"call budget of {t.call_budget} exhausted")
        t.llm_calls += 1
        return complete(conversation, self.gateway, self.backend, case_id=self.case.case_id, stage=Stage.MAC, agent=agent)

    def log(self, message: ChatMessage) -> None:
        self.transcript.log.append(LoggedMessage(message, self.machine.state))

    def enter(self, state: MacState) -> None:
        self.machine.advance(state)
        self.transcript.states = list(self.machine.history)


def run_specialist(
    assignment: Assignment,
    case: DermCase,
    clinical_observation: str,
    candidates: CandidateSet,
    backend: Backend,
    config: MacConfig | None = None,
    *,
    gateway: GatewayConfig | None = None,
    prompts: PromptLibrary | None = None,
) -> SpecialistFinding:
    """Standalone specialist turn (no call budget)."""
    ctx = _standalone_ctx(case, candidates, clinical_observation, backend, config, gateway, prompts)
    ctx.transcript.call_budget = 2
    finding, _ = _specialist_turn(ctx, assignment)
    return finding


def _specialist_turn(ctx: _Ctx, assignment: Assignment) -> tuple[SpecialistFinding, Conversation]:
    disease = assignment.disease
    if disease not in ctx.candidates:
        raise ValueError(f"{disease.normalized} is not a candidate")
    others = [c.normalized for c in ctx.candidates if c.normalized != disease.normalized]
    brief = (
        f"{ctx.task_text}\n\nClinical observation: {ctx.transcript.clinical_observation}\n"
        f"Case study: {ctx.case.query}\n"
        f"Probable diseases: {ctx.candidates.names}\n"
        f"Your assigned diagnosis: {disease.normalized}"
    )
    conversation = Conversation.of(
        system(ctx.role_prompt("specialist", name=assignment.specialist_name)),
        user(brief, *ctx.case.images, _specialist_instruction(disease, others), speaker=COORDINATOR),
    )
    reply = ctx.call(conversation, assignment.specialist_name)
    ctx.log(assistant(reply, assignment.specialist_name))
    conversation = conversation.append(assistant(reply, assignment.specialist_name))
    evidence, critiques = parse_specialist_reply(reply, disease, ctx.candidates)

    missing = _missing(evidence, critiques, others)
    if missing:
        reask = user(
            "Your answer is missing these sections: "
            + "; ".join(missing)
            + ". Reply with the missing sections, using the same markers.",
            speaker=COORDINATOR,
        )
        ctx.log(reask)
        conversation = conversation.append(reask)
        reply = ctx.call(conversation, assignment.specialist_name)
        ctx.log(assistant(reply, assignment.specialist_name))
        conversation = conversation.append(assistant(reply, assignment.specialist_name))
        more_evidence, more_critiques = parse_specialist_reply(reply, disease, ctx.candidates)
        evidence = evidence or more_evidence
        for k, v in more_critiques.items():
            critiques.setdefault(k, v)
        critiques = {k: critiques[k] for k in others if k in critiques}
        missing = _missing(evidence, critiques, others)
        if missing:
            raise IncompleteFinding(assignment.specialist_name, missing)
    finding = SpecialistFinding(assignment.specialist_name, disease, evidence, critiques)
    return finding, conversation


def _missing(evidence: str, critiques: dict[str, str], others: Sequence[str]) -> list[str]:
    out = [] if evidence else ["EVIDENCE"]
    out += [f"CRITIQUE {o}" for o in others if o not in critiques]
    return out


def consolidate(
    findings: Sequence[SpecialistFinding],
    backend: Backend,
    config: MacConfig | None = None,
    *,
    gateway: GatewayConfig | None = None,
    prompts: PromptLibrary | None = None,
    case_id: str = "",
) -> str:
    """Coordinator compilation of all findings (falls back to a template render)."""
    config = config or MacConfig()
    prompts = prompts or default_library()
    gateway = gateway or GatewayConfig()
    if len(findings) < config.min_candidates:
        raise TooFewCandidates(f"{len(findings)} findings, the debate needs at least {config.min_candidates}")
    text, _ = _consolidation_call(
        findings,
        lambda conv: complete(conv, gateway, backend, case_id=case_id, stage=Stage.MAC, agent=COORDINATOR),
        config.role_prompts.get("coordinator") or prompts.render("mac_coordinator"),
    )
    return text


def _consolidation_call(findings, send, coordinator_prompt: str) -> tuple[str, bool]:
    rendered = render_consolidation(findings)
    conversation = Conversation.of(
        system(coordinator_prompt),
        user(
            "All specialists have reported. Compile the supporting evidence and the critiques for each "
            "probable disease and present them to the Admin.\n\n" + rendered
        ),
    )
    reply = send(conversation)
    if reply.strip():
        return reply, False
    log.warning("empty Coordinator compilation; using the template render")
    return rendered, True


def admin_evaluate(
    consolidation: str,
    transcript: MacTranscript,
    backend: Backend,
    config: MacConfig | None = None,
    *,
    gateway: GatewayConfig | None = None,
    prompts: PromptLibrary | None = None,
) -> AdminDecision:
    """One Admin decision on a compilation; one re-ask on an unclear reply."""
    config = config or MacConfig()
    prompts = prompts or default_library()
    gateway = gateway or GatewayConfig()
    if not consolidation.strip():
        raise ValueError("consolidation is empty")
    specialists = [a.specialist_name for a in transcript.assignments]
    conversation = Conversation.of(
        system(config.role_prompts.get("admin") or prompts.render("mac_admin")),
        user(f"{consolidation}\n\n{_decision_instruction(config.termination_token)}", speaker=COORDINATOR),
    )

    def send(conv: Conversation) -> str:
        return complete(conv, gateway, backend, case_id=transcript.case_id, stage=Stage.MAC, agent=ADMIN)

    decision, _ = _decide(conversation, send, specialists, config.termination_token, lambda m: None)
    return decision


def _decide(conversation, send, specialists, token, log_message) -> tuple[AdminDecision, Conversation]:
    reply = send(conversation)
    log_message(assistant(reply, ADMIN))
    conversation = conversation.append(assistant(reply, ADMIN))
    try:
        return parse_admin_decision(reply, specialists, token), conversation
    except AmbiguousDecision:
        pass
    reask = user(
        "Your message must contain exactly one of: a REVISE line naming specialists, or a "
        f"FINAL_DIAGNOSIS line followed by {token}. Please answer again.",
        speaker=COORDINATOR,
    )
    log_message(reask)
    conversation = conversation.append(reask)
    reply = send(conversation)
    log_message(assistant(reply, ADMIN))
    conversation = conversation.append(assistant(reply, ADMIN))
    return parse_admin_decision(reply, specialists, token), conversation


def _standalone_ctx(case, candidates, observation, backend, config, gateway, prompts) -> _Ctx:
    config = config or MacConfig()
    prompts = prompts or default_library()
    transcript = MacTranscript(case.case_id, candidates, clinical_observation=observation)
    return _Ctx(
        case=case,
        candidates=candidates,
        config=config,
        gateway=gateway or GatewayConfig(),
        backend=backend,
        prompts=prompts,
        transcript=transcript,
        machine=_Machine(len(candidates), config.max_revision_rounds),
        task_text=_task_text(case, candidates, observation, config, prompts),
    )


def _task_text(case, candidates, observation, config, prompts) -> str:
    return prompts.render(
        "mac_task",
        observation=observation,
        case_study=case.query,
        candidates=candidates.names,
        token=config.termination_token,
    )


def describe_observation(
    case: DermCase,
    backend: Backend,
    gateway: GatewayConfig,
    prompts: PromptLibrary | None = None,
) -> tuple[str, str]:
    """Clinical observation for the debate and where it came from.

    Returns (text, "image_description"), or (query, "query") when the model
    gives an empty description.
    """
    prompts = prompts or default_library()
    conversation = Conversation.of(user(prompts.render("mac_observation"), *case.images))
    text = complete(conversation, gateway, backend, case_id=case.case_id, stage=Stage.MAC, agent=OBSERVER)
    if text.strip():
        return text.strip(), "image_description"
    return case.query, "query"


def run_mac(
    case: DermCase,
    candidates: CandidateSet,
    clinical_observation: str,
    backend: Backend,
    config: MacConfig | None = None,
    *,
    gateway: GatewayConfig | None = None,
    prompts: PromptLibrary | None = None,
    observation_source: str = "provided",
) -> MacTranscript:
    """Run one full debate and return its transcript.

    Any failure after the candidate-count check raises MacAborted carrying
    the partial transcript.
    """
    config = config or MacConfig()
    check_candidate_count(candidates, config)
    ctx = _standalone_ctx(case, candidates, clinical_observation, backend, config, gateway, prompts)
    t = ctx.transcript
    t.observation_source = observation_source
    t.call_budget = config.call_budget(len(candidates))
    t.states = list(ctx.machine.history)
    try:
        _drive(ctx)
    except DermPipeError as exc:
        raise MacAborted(f"{type(exc).__name__}: {exc}", t) from exc
    return t


def _drive(ctx: _Ctx) -> None:
    t, config = ctx.transcript, ctx.config
    token = config.termination_token
    ctx.log(user(ctx.task_text, speaker=ADMIN))

    ctx.enter(MacState(Phase.ASSIGNMENT))
    t.assignments = assign_diseases(ctx.candidates, config)
    roster = "\n".join(f"- {a.specialist_name}: {a.disease.normalized}" for a in t.assignments)
    reply = ctx.call(
        Conversation.of(
            system(ctx.role_prompt("coordinator")),
            user(f"{ctx.task_text}\n\nAnnounce these assignments to the specialists:\n{roster}", speaker=ADMIN),
        ),
        COORDINATOR,
    )
    ctx.log(assistant(reply, COORDINATOR))

    threads: dict[str, Conversation] = {}
    for i, assignment in enumerate(t.assignments):
        ctx.enter(MacState(Phase.SPECIALIST_ANALYSIS, i))
        finding, thread = _specialist_turn(ctx, assignment)
        t.findings.append(finding)
        threads[assignment.specialist_name] = thread

    ctx.enter(MacState(Phase.COMPILATION))
    t.consolidation, t.consolidation_fallback = _consolidation_call(
        t.findings, lambda conv: ctx.call(conv, COORDINATOR), ctx.role_prompt("coordinator")
    )
    ctx.log(assistant(t.consolidation, COORDINATOR))

    specialists = [a.specialist_name for a in t.assignments]
    diseases = {a.specialist_name: a.disease for a in t.assignments}
    admin = Conversation.of(
        system(ctx.role_prompt("admin")),
        user(
            f"{ctx.task_text}\n\n{t.consolidation}\n\n{_decision_instruction(token)}",
            speaker=COORDINATOR,
        ),
    )
    while True:
        ctx.enter(MacState(Phase.ADMIN_EVALUATION))
        decision, admin = _decide(admin, lambda conv: ctx.call(conv, ADMIN), specialists, token, ctx.log)
        if isinstance(decision, Finalize):
            ctx.enter(MacState(Phase.FINAL_DIAGNOSIS))
            final_text = decision.diagnosis_text
            break
        if ctx.machine.rounds >= config.max_revision_rounds:
            ctx.enter(MacState(Phase.FINAL_DIAGNOSIS))
            forced = user(
                f"The limit of {config.max_revision_rounds} revision rounds has been reached. Give your final "
                'diagnosis now, chosen from the probable diseases, on a line "FINAL_DIAGNOSIS: <name>", '
                f"and finish with {token}.",
                speaker=COORDINATOR,
            )
            ctx.log(forced)
            admin = admin.append(forced)
            final_text = ctx.call(admin, ADMIN)
            ctx.log(assistant(final_text, ADMIN))
            t.forced_finalize = True
            break

        ctx.enter(MacState(Phase.REVISION, ctx.machine.rounds + 1))
        round_ = RefinementRound(decision.instructions, list(decision.targets))
        t.refinement_rounds.append(round_)
        for name in decision.targets:
            refined = _refine(ctx, name, diseases[name], threads, decision.instructions)
            round_.refined_evidence[name] = refined
        update = "\n\n".join(
            f"Enhanced evidence from {name} for {diseases[name].normalized}:\n{text}"
            for name, text in round_.refined_evidence.items()
        )
        admin = admin.append(user(f"{update}\n\n{_decision_instruction(token)}", speaker=COORDINATOR))

    t.final_diagnosis = extract_final_diagnosis(final_text, ctx.candidates)
    ctx.enter(MacState(Phase.TERMINATED))
    t.terminated = True


def _refine(ctx: _Ctx, name: str, disease: ConditionName, threads: dict[str, Conversation], instructions: str) -> str:
    request = user(
        f"The Admin asks you to refine your evidence:\n{instructions}\n\n"
        f"Reply with your enhanced evidence for {disease.normalized}.",
        speaker=ADMIN,
    )
    ctx.log(request)
    thread = threads[name].append(request)
    reply = ctx.call(thread, name)
    ctx.log(assistant(reply, name))
    if not reply.strip():
        raise IncompleteFinding(name, ["refined evidence"])
    threads[name] = thread.append(assistant(reply, name))
    return reply.strip()


def mac_rank_outcome(transcript: MacTranscript) -> RankOutcome:
    """RankOutcome view of a finished debate: the verdict first, then the rest in input order."""
    final = transcript.final_diagnosis
    if final is None:
        raise ValueError("transcript has no final diagnosis")
    rest = [c for c in transcript.candidates if c.normalized != final.normalized]
    return RankOutcome(
        strategy=RankStrategy.MAC,
        ranking=(final, *rest),
        case_id=transcript.case_id,
        transcript_ref=f"mac/{transcript.case_id}.json",
    )
