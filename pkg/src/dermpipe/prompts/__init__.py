"""Versioned prompt templates.

Each template is a ``<name>.txt`` file whose first line is ``## version: N``.
Bundled templates live next to this module; a user directory can override
any subset of them by file name.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

_HEADER = re.compile(r"^##\s*version:\s*(\d+)\s*$")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    version: int
    text: str

    def render(self, /, **fields: Any) -> str:
        return self.text.format(**fields)


def parse_template(name: str, raw: str) -> PromptTemplate:
    lines = raw.splitlines()
    version = 0
    if lines and (m := _HEADER.match(lines[0])):
        version = int(m.group(1))
        lines = lines[1:]
    return PromptTemplate(name=name, version=version, text="\n".join(lines).strip("\n"))


class PromptLibrary:
    def __init__(self, templates: dict[str, PromptTemplate]) -> None:
        self._templates = dict(templates)

    @classmethod
    def load(cls, override_dir: str | Path | None = None) -> "PromptLibrary":
        templates: dict[str, PromptTemplate] = {}
        for entry in resources.files(__package__).iterdir():
            if entry.name.endswith(".txt"):
                name = entry.name[:-4]
                templates[name] = parse_template(name, entry.read_text(encoding="utf-8"))
        if override_dir is not None:
            for path in sorted(Path(override_dir).glob("*.txt")):
                templates[path.stem] = parse_template(path.stem, path.read_text(encoding="utf-8"))
        return cls(templates)

    def __getitem__(self, name: str) -> PromptTemplate:
        return self._templates[name]

    def __contains__(self, name: str) -> bool:
        return name in self._templates

    def versions(self) -> dict[str, int]:
        return {name: t.version for name, t in sorted(self._templates.items())}

    def render(self, template: str, /, **fields: Any) -> str:
        return self._templates[template].render(**fields)


_default: PromptLibrary | None = None


def default_library() -> PromptLibrary:
    global _default
    if _default is None:
        _default = PromptLibrary.load()
    return _default
