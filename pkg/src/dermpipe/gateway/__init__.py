from .backends import (
    Backend,
    CallRecord,
    ChatRequest,
    GatewayConfig,
    ManifestWriter,
    RecordingBackend,
    ReplayBackend,
    ScriptedBackend,
    ScriptRule,
    Stage,
    complete,
    read_manifest,
    record_wrap,
)
from .http import HttpBackend, TokenBucket
from .messages import ChatMessage, Conversation, Image, Role, Text, assistant, system, user

__all__ = [
    "Backend",
    "CallRecord",
    "ChatMessage",
    "ChatRequest",
    "Conversation",
    "GatewayConfig",
    "HttpBackend",
    "Image",
    "ManifestWriter",
    "RecordingBackend",
    "ReplayBackend",
    "Role",
    "ScriptRule",
    "ScriptedBackend",
    "Stage",
    "Text",
    "TokenBucket",
    "assistant",
    "complete",
    "read_manifest",
    "record_wrap",
    "system",
    "user",
]
