"""Multimodal chat messages and their canonical (hashable) form."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Union

from ..cases import ImagePayload


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class Text:
    text: str


@dataclass(frozen=True)
class Image:
    image: ImagePayload


Part = Union[Text, Image]


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    parts: tuple[Part, ...]
    speaker_name: str | None = None

    def __post_init__(self) -> None:
        if not self.parts:
            raise ValueError("a message needs at least one part")
        if self.role is not Role.USER and any(isinstance(p, Image) for p in self.parts):
            raise ValueError("image parts are only allowed in user messages")

    @property
    def text(self) -> str:
        return "\n".join(p.text for p in self.parts if isinstance(p, Text))

    @property
    def images(self) -> list[ImagePayload]:
        return [p.image for p in self.parts if isinstance(p, Image)]


def system(text: str) -> ChatMessage:
    return ChatMessage(Role.SYSTEM, (Text(text),))


def user(*parts: str | ImagePayload | Part, speaker: str | None = None) -> ChatMessage:
    out: list[Part] = []
    for p in parts:
        if isinstance(p, str):
            out.append(Text(p))
        elif isinstance(p, ImagePayload):
            out.append(Image(p))
        else:
            out.append(p)
    return ChatMessage(Role.USER, tuple(out), speaker)


def assistant(text: str, speaker: str | None = None) -> ChatMessage:
    return ChatMessage(Role.ASSISTANT, (Text(text),), speaker)


@dataclass(frozen=True)
class Conversation:
    messages: tuple[ChatMessage, ...] = ()

    def __post_init__(self) -> None:
        for i, m in enumerate(self.messages):
            if m.role is Role.SYSTEM and i != 0:
                raise ValueError("a system message may only appear first")

    @classmethod
    def of(cls, *messages: ChatMessage) -> "Conversation":
        return cls(tuple(messages))

    def append(self, *messages: ChatMessage) -> "Conversation":
        return Conversation(self.messages + tuple(messages))

    def __len__(self) -> int:
        return len(self.messages)

    def __iter__(self):
        return iter(self.messages)

    def plain_text(self) -> str:
        """All text parts joined; used for substring checks and script matching."""
        return "\n".join(m.text for m in self.messages)

    def canonical(self) -> list[dict[str, Any]]:
        return [_canonical_message(m) for m in self.messages]

    def request_hash(self) -> str:
        return hash_canonical(self.canonical())


def _canonical_part(part: Part) -> dict[str, Any]:
    if isinstance(part, Text):
        return {"type": "text", "text": part.text}
    img = part.image
    return {
        "type": "image",
        "media_type": img.media_type.value,
        "sha256": hashlib.sha256(img.data).hexdigest(),
    }


def _canonical_message(m: ChatMessage) -> dict[str, Any]:
    return {
        "role": m.role.value,
        "name": m.speaker_name,
        "parts": [_canonical_part(p) for p in m.parts],
    }


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def hash_canonical(canonical: Iterable[dict[str, Any]]) -> str:
    return hashlib.sha256(canonical_json(list(canonical)).encode("utf-8")).hexdigest()
