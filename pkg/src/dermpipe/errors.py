"""Exception hierarchy.

Parser errors all derive from :class:`OutputParseError` so callers (and the
fuzz tests) can tell a structured rejection of model output apart from a bug.
"""

from __future__ import annotations


class DermPipeError(Exception):
    """Base class for every error raised by this package."""


# -- case model ---------------------------------------------------------------


class EmptyName(DermPipeError, ValueError):
    """A condition name contained no letters."""


class DatasetError(DermPipeError):
    """The dataset file could not be turned into a valid Dataset."""


class ParseError(DatasetError):
    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateCaseId(DatasetError):
    def __init__(self, case_id: str, line: int | None = None) -> None:
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"duplicate case_id {case_id!r}{where}")
        self.case_id = case_id


# -- gateway ------------------------------------------------------------------


class GatewayError(DermPipeError):
    """Any failure to obtain a completion."""


class TransportError(GatewayError):
    pass


class RateLimited(TransportError):
    pass


class ReplayMiss(GatewayError):
    pass


class ScriptExhausted(ReplayMiss):
    pass


class SinkError(DermPipeError):
    pass


# -- model-output parsers -----------------------------------------------------


class OutputParseError(DermPipeError, ValueError):
    """Model output did not match any accepted grammar."""


class NoCandidatesFound(OutputParseError):
    pass


class ScoreParseError(OutputParseError):
    pass


class MissingCandidateScore(ScoreParseError):
    def __init__(self, missing: list[str]) -> None:
        super().__init__("no score for: " + ", ".join(missing))
        self.missing = list(missing)


class OutOfRangeScore(ScoreParseError):
    def __init__(self, name: str, value: int) -> None:
        super().__init__(f"score {value} for {name!r} outside [1, 10]")
        self.name = name
        self.value = value


class JudgeParseError(OutputParseError):
    pass


class CriticParseError(OutputParseError):
    pass


# -- reranking / MAC ----------------------------------------------------------


class MacError(DermPipeError):
    pass


class RerankError(DermPipeError):
    pass


class TooFewCandidates(RerankError, MacError):
    pass


class TooManyCandidates(RerankError, MacError):
    pass


class IncompleteFinding(MacError, OutputParseError):
    def __init__(self, specialist: str, missing: list[str]) -> None:
        super().__init__(f"{specialist}: missing " + ", ".join(missing))
        self.specialist = specialist
        self.missing = list(missing)


class AmbiguousDecision(MacError, OutputParseError):
    pass


class UnknownSpecialist(MacError, OutputParseError):
    pass


class NoDiagnosisFound(MacError, OutputParseError):
    pass


class AmbiguousDiagnosis(MacError, OutputParseError):
    def __init__(self, matches: list[str]) -> None:
        super().__init__("several candidates named: " + ", ".join(matches))
        self.matches = list(matches)


class IllegalTransition(MacError):
    pass


class CallBudgetExceeded(MacError):
    pass


class MacAborted(MacError):
    """A MAC run failed part-way; ``transcript`` holds what was produced."""

    def __init__(self, message: str, transcript) -> None:
        super().__init__(message)
        self.transcript = transcript


# -- evaluation / runner ------------------------------------------------------


class ZeroDenominator(DermPipeError, ZeroDivisionError):
    pass


class EmptyHypothesis(DermPipeError, ValueError):
    pass


class ConfigError(DermPipeError):
    pass


class MissingArtifacts(DermPipeError):
    pass
