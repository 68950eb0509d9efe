"""Random inputs for the model-output parsers: raw bytes, unicode noise, and
near-miss fragments of the formats the parsers look for."""

from __future__ import annotations

import random

NAMES = ["chronic eczema", "psoriasis", "tinea corporis", "eczema", "lichen planus"]
FRAGMENTS = [
    "[", "]", "[[", "```json\n", "```", '"', "'", ",", "\n", ":", "SCORE ", "SCORE", "FINAL_DIAGNOSIS:",
    "FINAL_DIAGNOSIS", "TERMINATE", "1.", "2)", "- ", "* ", "**", "__", "{", "}", "null", "true", "-3", "0",
    "11", "10", "99999999999999999999", "7", "1e3", "3.5", "\\", "\x00", "​", "é", "🙂", "\t", "  ",
    *NAMES, *(n.upper() for n in NAMES), *(f'"{n}"' for n in NAMES),
]


def random_input(rng: random.Random) -> str:
    kind = rng.random()
    if kind < 0.2:
        raw = bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 200)))
        return raw.decode("utf-8", errors=rng.choice(["replace", "ignore", "surrogateescape"]))
    if kind < 0.35:
        return "".join(chr(rng.randint(0, 0x2FFF)) for _ in range(rng.randint(0, 120)))
    return "".join(rng.choice(FRAGMENTS) for _ in range(rng.randint(0, 40)))


def corpus(n: int, seed: int) -> list[str]:
    rng = random.Random(seed)
    return [random_input(rng) for _ in range(n)]
