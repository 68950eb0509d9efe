from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import pytest

import dermpipe
from dermpipe.cases import DermCase, ImagePayload, MediaType, normalize_condition

DATA = Path(dermpipe.__file__).parent / "data"

_acceptance_lines: list[str] = []


def record_acceptance(line: str) -> None:
    _acceptance_lines.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_lines):
            terminalreporter.write_line(line)


def png_bytes(rgb=(200, 100, 100), size: int = 2) -> bytes:
    def chunk(tag: bytes, body: bytes) -> bytes:
        return struct.pack(">I", len(body)) + tag + body + struct.pack(">I", zlib.crc32(tag + body) & 0xFFFFFFFF)

    raw = zlib.compress((b"\x00" + bytes(rgb) * size) * size)
    ihdr = struct.pack(">IIBBBBB", size, size, 8, 2, 0, 0, 0)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", raw) + chunk(b"IEND", b"")


JPEG_BYTES = b"\xff\xd8\xff\xe0" + b"\x00" * 16 + b"\xff\xd9"


def make_case(case_id: str = "c1", query: str = "itchy rash", gt: str | None = None, rgb=(200, 100, 100)) -> DermCase:
    image = ImagePayload(f"{case_id}.png", MediaType.PNG, png_bytes(rgb))
    return DermCase(case_id, query, (image,), normalize_condition(gt) if gt else None)


def load_appendix():
    """(case, candidates, observation, specialist names, script path)."""
    from dermpipe.retrieval import CandidateSet

    folder = DATA / "appendix"
    raw = json.loads((folder / "case.json").read_text(encoding="utf-8"))
    case = DermCase(
        raw["case_id"],
        raw["query"],
        (ImagePayload.from_file(folder / raw["image_paths"][0]),),
        normalize_condition(raw["ground_truth"]),
    )
    cands = CandidateSet.of(raw["candidates"], raw["case_id"])
    return case, cands, raw["clinical_observation"], tuple(raw["specialist_names"]), folder / "script.json"


@pytest.fixture
def case():
    return make_case()


@pytest.fixture
def data_dir() -> Path:
    return DATA
