"""Cases, condition names, images, and JSONL dataset ingestion."""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable

from .errors import DatasetError, DuplicateCaseId, EmptyName, ParseError

_WS = re.compile(r"\s+")
_TERMINAL_PUNCT = ".,;!?"


def _has_letter(text: str) -> bool:
    return any(ch.isalpha() for ch in text)


def _normalize(raw: str) -> str:
    text = _WS.sub(" ", raw.strip().lower())
    # stripping punctuation can expose more whitespace ("cyst ." -> "cyst ")
    while True:
        stripped = text.rstrip(_TERMINAL_PUNCT).rstrip()
        if stripped == text:
            return text
        text = stripped


@dataclass(frozen=True)
class ConditionName:
    """A skin-condition name plus its comparison key.

    Two names refer to the same condition by identity (judging rule 1) when
    their ``normalized`` forms are equal.
    """

    raw: str
    normalized: str

    def __str__(self) -> str:
        return self.normalized

    def __eq__(self, other: object) -> bool:
        if isinstance(other, ConditionName):
            return self.normalized == other.normalized
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self.normalized)


def normalize_condition(raw: str) -> ConditionName:
    """Lowercase, trim, collapse internal whitespace, drop terminal punctuation.

    Raises:
        EmptyName: if ``raw`` contains no letters.
    """
    if not isinstance(raw, str) or not _has_letter(raw):
        raise EmptyName(f"condition name has no letters: {raw!r}")
    return ConditionName(raw=raw, normalized=_normalize(raw))


class MediaType(str, Enum):
    JPEG = "jpeg"
    PNG = "png"

    @property
    def mime(self) -> str:
        return f"image/{self.value}"


def sniff_media_type(data: bytes) -> MediaType | None:
    if data.startswith(b"\x89PNG\r\n\x1a\n"):
        return MediaType.PNG
    if data.startswith(b"\xff\xd8\xff"):
        return MediaType.JPEG
    return None


@dataclass(frozen=True)
class ImagePayload:
    source_path: str
    media_type: MediaType
    data: bytes = field(repr=False)

    def __post_init__(self) -> None:
        sniffed = sniff_media_type(self.data)
        if sniffed is not self.media_type:
            raise ValueError(
                f"{self.source_path}: declared {self.media_type.value}, "
                f"bytes look like {sniffed.value if sniffed else 'unknown'}"
            )

    @cached_property
    def encoded(self) -> str:
        return base64.b64encode(self.data).decode("ascii")

    @property
    def data_uri(self) -> str:
        return f"data:{self.media_type.mime};base64,{self.encoded}"

    @classmethod
    def from_file(cls, path: str | Path, source_path: str | None = None) -> "ImagePayload":
        path = Path(path)
        data = path.read_bytes()
        media_type = sniff_media_type(data)
        if media_type is None:
            raise ValueError(f"{path}: not a PNG or JPEG file")
        return cls(source_path=source_path or str(path), media_type=media_type, data=data)


class Split(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


@dataclass(frozen=True)
class Reference:
    """A clinician response used as a BLEU/DeltaBLEU reference."""

    text: str
    weight: float = 1.0


@dataclass(frozen=True)
class DermCase:
    case_id: str
    query: str
    images: tuple[ImagePayload, ...]
    ground_truth: ConditionName | None = None
    split: Split = Split.VALIDATION
    references: tuple[Reference, ...] = ()

    def __post_init__(self) -> None:
        if not self.case_id:
            raise ValueError("case_id must be non-empty")
        if not self.images:
            raise ValueError(f"case {self.case_id}: at least one image is required")
        if self.ground_truth is not None and not self.ground_truth.normalized:
            raise ValueError(f"case {self.case_id}: empty ground truth")

    @property
    def has_ground_truth(self) -> bool:
        return self.ground_truth is not None


@dataclass(frozen=True)
class Dataset:
    cases: tuple[DermCase, ...]
    root: Path | None = None

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for case in self.cases:
            if case.case_id in seen:
                raise DuplicateCaseId(case.case_id)
            seen.add(case.case_id)

    @property
    def total(self) -> int:
        return len(self.cases)

    @property
    def with_ground_truth(self) -> int:
        return sum(1 for c in self.cases if c.has_ground_truth)

    def get(self, case_id: str) -> DermCase:
        for case in self.cases:
            if case.case_id == case_id:
                return case
        raise KeyError(case_id)

    def __iter__(self):
        return iter(self.cases)

    def __len__(self) -> int:
        return len(self.cases)


def _parse_record(obj: Any, line: int, root: Path) -> DermCase:
    if not isinstance(obj, dict):
        raise ParseError(line, "record is not a JSON object")
    case_id = obj.get("case_id")
    if not isinstance(case_id, str) or not case_id:
        raise ParseError(line, "case_id must be a non-empty string")
    query = obj.get("query") or ""
    if not isinstance(query, str):
        raise ParseError(line, "query must be a string")
    paths = obj.get("image_paths")
    if not isinstance(paths, list) or not paths or not all(isinstance(p, str) for p in paths):
        raise ParseError(line, "image_paths must be a non-empty list of strings")

    images = []
    for rel in paths:
        try:
            images.append(ImagePayload.from_file(root / rel, source_path=rel))
        except (OSError, ValueError) as exc:
            raise ParseError(line, str(exc)) from exc

    gt_raw = obj.get("ground_truth")
    ground_truth = None
    if gt_raw is not None:
        if not isinstance(gt_raw, str):
            raise ParseError(line, "ground_truth must be a string or null")
        try:
            ground_truth = normalize_condition(gt_raw)
        except EmptyName as exc:
            raise ParseError(line, str(exc)) from exc

    try:
        split = Split(obj.get("split", "validation"))
    except ValueError as exc:
        raise ParseError(line, f"unknown split {obj.get('split')!r}") from exc

    refs = []
    for item in obj.get("references") or []:
        if isinstance(item, str):
            refs.append(Reference(item))
        elif isinstance(item, dict) and isinstance(item.get("text"), str):
            weight = float(item.get("weight", 1.0))
            if not -1.0 <= weight <= 1.0:
                raise ParseError(line, f"reference weight {weight} outside [-1, 1]")
            refs.append(Reference(item["text"], weight))
        else:
            raise ParseError(line, "references must be strings or {text, weight} objects")

    return DermCase(
        case_id=case_id,
        query=query,
        images=tuple(images),
        ground_truth=ground_truth,
        split=split,
        references=tuple(refs),
    )


def load_dataset(path: str | Path, format: str = "jsonl") -> Dataset:
    """Read a JSONL case file.

    Image paths are resolved relative to the file's directory. Cases without
    ground truth are kept; evaluation leaves them out of its denominators.
    """
    if format != "jsonl":
        raise DatasetError(f"unsupported dataset format {format!r}")
    path = Path(path)
    root = path.parent
    cases: list[DermCase] = []
    seen: dict[str, int] = {}
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    for lineno, text in enumerate(lines, start=1):
        if not text.strip():
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(lineno, f"invalid JSON: {exc.msg}") from exc
        case = _parse_record(obj, lineno, root)
        if case.case_id in seen:
            raise DuplicateCaseId(case.case_id, lineno)
        seen[case.case_id] = lineno
        cases.append(case)
    return Dataset(cases=tuple(cases), root=root)


def case_to_record(case: DermCase) -> dict[str, Any]:
    record: dict[str, Any] = {
        "case_id": case.case_id,
        "query": case.query,
        "image_paths": [img.source_path for img in case.images],
        "ground_truth": case.ground_truth.raw if case.ground_truth else None,
        "split": case.split.value,
    }
    if case.references:
        record["references"] = [{"text": r.text, "weight": r.weight} for r in case.references]
    return record


def dump_dataset(cases: Iterable[DermCase], path: str | Path) -> None:
    """Write cases as JSONL. Image files are not copied."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for case in cases:
            fh.write(json.dumps(case_to_record(case), ensure_ascii=False) + "\n")
