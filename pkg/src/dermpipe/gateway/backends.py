"""Backend protocol plus the offline backends: scripted, replay, recording."""

from __future__ import annotations

import json
import logging
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence

from ..errors import ReplayMiss, ScriptExhausted, SinkError
from .messages import Conversation, canonical_json, hash_canonical

log = logging.getLogger(__name__)


class Stage(str, Enum):
    RETRIEVAL = "retrieval"
    RERANK = "rerank"
    MAC = "mac"
    ALIGN = "align"
    JUDGE = "judge"
    APO = "apo"


@dataclass(frozen=True)
class GatewayConfig:
    endpoint_url: str = "https://api.openai.com/v1/chat/completions"
    model_name: str = "gpt-4-vision-preview"
    temperature: float = 0.0
    max_retries: int = 3
    backoff_base: float = 1.0  # seconds
    rate_limit: float = 60.0  # requests per minute
    seed: int = 0
    image_detail: str = "auto"
    timeout: float = 120.0
    max_tokens: int | None = 4096

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if not 0 <= self.max_retries <= 10:
            raise ValueError(f"max_retries {self.max_retries} outside [0, 10]")
        if self.backoff_base < 0:
            raise ValueError("backoff_base must be >= 0")
        if self.rate_limit <= 0:
            raise ValueError("rate_limit must be positive")


@dataclass(frozen=True)
class ChatRequest:
    conversation: Conversation
    model_name: str
    temperature: float
    seed: int = 0
    case_id: str = ""
    stage: Stage = Stage.RETRIEVAL
    agent: str | None = None


class Backend(Protocol):
    def send(self, request: ChatRequest) -> str: ...


def complete(
    conversation: Conversation,
    config: GatewayConfig,
    backend: Backend,
    *,
    case_id: str = "",
    stage: Stage | str = Stage.RETRIEVAL,
    agent: str | None = None,
) -> str:
    """Send one conversation through ``backend`` and return the assistant text."""
    if not len(conversation):
        raise ValueError("cannot complete an empty conversation")
    request = ChatRequest(
        conversation=conversation,
        model_name=config.model_name,
        temperature=config.temperature,
        seed=config.seed,
        case_id=case_id,
        stage=Stage(stage),
        agent=agent,
    )
    return backend.send(request)


# -- scripted -----------------------------------------------------------------


@dataclass
class ScriptRule:
    """Serve ``responses`` in order to requests matching every set filter."""

    responses: list[str]
    stage: str | None = None
    case_id: str | None = None
    agent: str | None = None
    contains: str | None = None
    repeat_last: bool = False
    _next: int = field(default=0, repr=False)

    def matches(self, request: ChatRequest) -> bool:
        if self.stage is not None and request.stage.value != self.stage:
            return False
        if self.case_id is not None and request.case_id != self.case_id:
            return False
        if self.agent is not None and request.agent != self.agent:
            return False
        if self.contains is not None and self.contains not in request.conversation.plain_text():
            return False
        return True

    @property
    def exhausted(self) -> bool:
        return self._next >= len(self.responses) and not (self.repeat_last and self.responses)

    def take(self) -> str:
        if self._next < len(self.responses):
            out = self.responses[self._next]
            self._next += 1
            return out
        return self.responses[-1]

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScriptRule":
        responses = d.get("responses")
        if responses is None and "response" in d:
            responses = [d["response"]]
        if not isinstance(responses, list) or not all(isinstance(r, str) for r in responses):
            raise ValueError("script rule needs a list of string responses")
        return cls(
            responses=list(responses),
            stage=d.get("stage"),
            case_id=d.get("case_id"),
            agent=d.get("agent"),
            contains=d.get("contains"),
            repeat_last=bool(d.get("repeat_last", False)),
        )


class ScriptedBackend:
    """Deterministic fake LLM.

    ``ScriptedBackend(["r1", "r2"])`` answers FIFO. For keyed scripts pass
    ``rules``; the first matching, non-exhausted rule answers. A ``responder``
    callable, if given, is consulted when no rule matches.
    """

    def __init__(
        self,
        queue: Sequence[str] | None = None,
        *,
        rules: Iterable[ScriptRule] = (),
        responder: Callable[[ChatRequest], str] | None = None,
    ) -> None:
        self.rules: list[ScriptRule] = list(rules)
        if queue is not None:
            self.rules.append(ScriptRule(responses=list(queue)))
        self.responder = responder
        self.calls = 0
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    def send(self, request: ChatRequest) -> str:
        with self._lock:
            self.calls += 1
            self.requests.append(request)
            for rule in self.rules:
                if not rule.exhausted and rule.matches(request):
                    return rule.take()
        if self.responder is not None:
            return self.responder(request)
        raise ScriptExhausted(
            f"no scripted response for case={request.case_id!r} stage={request.stage.value}"
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = data["rules"] if isinstance(data, dict) else data
        return cls(rules=[ScriptRule.from_dict(r) for r in rules])


# -- call records / manifest --------------------------------------------------


@dataclass(frozen=True)
class CallRecord:
    run_id: str
    case_id: str
    stage: Stage
    turn_index: int
    request_hash: str
    request: list[dict[str, Any]]
    response: str
    model_name: str
    temperature: float
    timestamp: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "call",
            "run_id": self.run_id,
            "case_id": self.case_id,
            "stage": self.stage.value,
            "turn_index": self.turn_index,
            "request_hash": self.request_hash,
            "request": self.request,
            "response": self.response,
            "model_name": self.model_name,
            "temperature": self.temperature,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CallRecord":
        return cls(
            run_id=d["run_id"],
            case_id=d["case_id"],
            stage=Stage(d["stage"]),
            turn_index=int(d["turn_index"]),
            request_hash=d["request_hash"],
            request=d["request"],
            response=d["response"],
            model_name=d["model_name"],
            temperature=float(d["temperature"]),
            timestamp=d["timestamp"],
        )

    def hash_is_valid(self) -> bool:
        return hash_canonical(self.request) == self.request_hash


class ManifestWriter:
    """Append-only JSONL sink; appends are serialized across threads."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.touch(exist_ok=True)
        except OSError as exc:
            raise SinkError(f"cannot open manifest {self.path}: {exc}") from exc

    def append(self, obj: dict[str, Any]) -> None:
        line = json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n"
        with self._lock:
            try:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line)
            except OSError as exc:
                raise SinkError(f"manifest write failed: {exc}") from exc


def read_manifest(path: str | Path) -> tuple[dict[str, Any] | None, list[CallRecord], dict[str, Any] | None]:
    """Return (header, call records, footer) from a manifest file."""
    header = footer = None
    records: list[CallRecord] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        kind = obj.get("kind", "call")
        if kind == "header":
            header = obj
        elif kind == "footer":
            footer = obj
        elif kind == "call":
            records.append(CallRecord.from_dict(obj))
    return header, records, footer


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


class RecordingBackend:
    """Delegates to ``inner`` and appends one CallRecord per call to ``sink``.

    A failed append is logged and counted in ``sink_errors``; the response is
    still returned unchanged.
    """

    def __init__(
        self,
        inner: Backend,
        sink: ManifestWriter,
        run_id: str,
        clock: Callable[[], str] = utc_now,
    ) -> None:
        self.inner = inner
        self.sink = sink
        self.run_id = run_id
        self.clock = clock
        self.sink_errors: list[SinkError] = []
        self.records_written = 0
        self._turns: dict[tuple[str, Stage], int] = defaultdict(int)
        self._lock = threading.Lock()

    def send(self, request: ChatRequest) -> str:
        response = self.inner.send(request)
        canonical = request.conversation.canonical()
        with self._lock:
            key = (request.case_id, request.stage)
            turn = self._turns[key]
            self._turns[key] += 1
        record = CallRecord(
            run_id=self.run_id,
            case_id=request.case_id,
            stage=request.stage,
            turn_index=turn,
            request_hash=hash_canonical(canonical),
            request=canonical,
            response=response,
            model_name=request.model_name,
            temperature=request.temperature,
            timestamp=self.clock(),
        )
        try:
            self.sink.append(record.to_dict())
            with self._lock:
                self.records_written += 1
        except SinkError as exc:
            log.error("call record lost: %s", exc)
            with self._lock:
                self.sink_errors.append(exc)
        return response


def record_wrap(backend: Backend, sink: ManifestWriter, run_id: str = "run") -> RecordingBackend:
    return RecordingBackend(backend, sink, run_id)


# -- replay -------------------------------------------------------------------


class ReplayBackend:
    """Serve recorded responses.

    Matching order: an unconsumed record for the same (case, stage) with the
    same request hash; any unconsumed record with that hash; then (unless
    ``strict``) the record at the same (case, stage, turn_index).
    """

    def __init__(self, records: Iterable[CallRecord], *, strict: bool = False) -> None:
        self.records = list(records)
        self.strict = strict
        self.calls = 0
        self._by_key: dict[tuple[str, Stage], list[int]] = defaultdict(list)
        self._by_hash: dict[str, list[int]] = defaultdict(list)
        for i, rec in enumerate(self.records):
            self._by_key[(rec.case_id, rec.stage)].append(i)
            self._by_hash[rec.request_hash].append(i)
        for idxs in self._by_key.values():
            idxs.sort(key=lambda i: self.records[i].turn_index)
        self._used: set[int] = set()
        self._turns: dict[tuple[str, Stage], int] = defaultdict(int)
        self._lock = threading.Lock()

    @classmethod
    def from_manifest(cls, path: str | Path, *, strict: bool = False) -> "ReplayBackend":
        _, records, _ = read_manifest(path)
        return cls(records, strict=strict)

    def _take(self, i: int) -> str:
        self._used.add(i)
        return self.records[i].response

    def send(self, request: ChatRequest) -> str:
        h = request.conversation.request_hash()
        key = (request.case_id, request.stage)
        with self._lock:
            self.calls += 1
            turn = self._turns[key]
            self._turns[key] += 1
            for i in self._by_key.get(key, ()):
                if i not in self._used and self.records[i].request_hash == h:
                    return self._take(i)
            for i in self._by_hash.get(h, ()):
                if i not in self._used:
                    return self._take(i)
            if not self.strict:
                for i in self._by_key.get(key, ()):
                    if self.records[i].turn_index == turn and i not in self._used:
                        return self._take(i)
        raise ReplayMiss(
            f"no recorded response for case={request.case_id!r} "
            f"stage={request.stage.value} turn={turn} hash={h[:12]}"
        )


def dump_records(records: Iterable[CallRecord]) -> str:
    return "".join(canonical_json(r.to_dict()) + "\n" for r in records)
