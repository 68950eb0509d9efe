"""Scoring a finished run directory against the dataset's ground truth."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .cases import ConditionName, Dataset
from .errors import MissingArtifacts, ZeroDenominator
from .judge import Judge
from .metrics import corpus_bleu, corpus_delta_bleu, find_match, retrieval_accuracy
from .reranker import RankOutcome
from .retrieval import CandidateSet


@dataclass
class CaseEval:
    case_id: str
    judged: bool
    judgment_source: str = "exact"
    retrieved: bool = False
    top1: bool = False
    top2: bool = False


@dataclass
class EvalReport:
    retrieval_strategy: str
    rerank_strategy: str
    retrieved_gt: int
    total_known_gt: int
    total_cases: int
    accuracy: float
    top1_hits: int
    top2_hits: int
    top1_accuracy: float
    top2_accuracy: float
    bleu: float | None = None
    delta_bleu: float | None = None
    aligned_with_references: int = 0
    per_case: list[CaseEval] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not 0 <= self.retrieved_gt <= self.total_known_gt <= self.total_cases:
            raise ValueError("need retrieved_gt <= total_known_gt <= total_cases")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        def table(header: list[str], row: list[str]) -> list[str]:
            widths = [max(len(h), len(c)) for h, c in zip(header, row)]
            return [
                "  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip(),
                "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip(),
            ]

        def num(x: float | None) -> str:
            return "n/a" if x is None else f"{x:.6f}"

        lines = ["Retrieval"]
        lines += table(
            ["Method", "Retrieved GT", "Known GT", "Accuracy"],
            [self.retrieval_strategy, str(self.retrieved_gt), str(self.total_known_gt), num(self.accuracy)],
        )
        lines += ["", "Re-ranking"]
        lines += table(
            ["Method", "Top-1", "Top-2", "Top-1 hits", "Top-2 hits"],
            [
                self.rerank_strategy,
                num(self.top1_accuracy),
                num(self.top2_accuracy),
                str(self.top1_hits),
                str(self.top2_hits),
            ],
        )
        lines += ["", "Alignment"]
        lines += table(
            ["Cases", "BLEU", "DeltaBLEU"],
            [str(self.aligned_with_references), num(self.bleu), num(self.delta_bleu)],
        )
        return "\n".join(lines) + "\n"


def _read_json(path: Path) -> dict[str, Any] | None:
    if not path.is_file():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def evaluate_run(
    run_dir: str | Path,
    dataset: Dataset,
    judge: Judge | None = None,
    *,
    retrieval_strategy: str = "",
    rerank_strategy: str = "",
) -> EvalReport:
    """Score the artifacts under ``run_dir``.

    Cases without ground truth are left out of every denominator. A case
    with ground truth but no artifact (it failed) counts as a miss.
    """
    run_dir = Path(run_dir)
    if not (run_dir / "candidates").is_dir() or not (run_dir / "rankings").is_dir():
        raise MissingArtifacts(f"{run_dir} has no candidates/ and rankings/ directories")
    known = [c for c in dataset if c.ground_truth is not None]
    if not known:
        raise ZeroDenominator("no cases with known ground truth")

    per_case: list[CaseEval] = []
    retrieved = top1 = top2 = 0
    for case in known:
        truth: ConditionName = case.ground_truth  # type: ignore[assignment]
        row = CaseEval(case.case_id, judged=True)
        sources = []
        cand = _read_json(run_dir / "candidates" / f"{case.case_id}.json")
        if cand is not None:
            cs = CandidateSet.from_dict(cand)
            retrieval_strategy = retrieval_strategy or cs.strategy.value
            m = find_match(cs, truth, judge)
            row.retrieved = m.hit
            sources.append(m.source)
        rank = _read_json(run_dir / "rankings" / f"{case.case_id}.json")
        if rank is not None:
            outcome = RankOutcome.from_dict(rank)
            rerank_strategy = rerank_strategy or outcome.strategy.value
            m1 = find_match(outcome.topk(1), truth, judge)
            m2 = m1 if m1.hit else find_match(outcome.topk(2), truth, judge)
            row.top1, row.top2 = m1.hit, m2.hit
            sources += [m1.source, m2.source]
        row.judgment_source = "llm" if "llm" in sources else "exact"
        retrieved += row.retrieved
        top1 += row.top1
        top2 += row.top2
        per_case.append(row)
    for case in dataset:
        if case.ground_truth is None:
            per_case.append(CaseEval(case.case_id, judged=False))
    per_case.sort(key=lambda r: r.case_id)

    hyps, refs = [], []
    for case in dataset:
        if not case.references:
            continue
        aligned = _read_json(run_dir / "aligned" / f"{case.case_id}.json")
        if aligned is None or not aligned.get("aligned", "").strip():
            continue
        hyps.append(aligned["aligned"])
        refs.append(case.references)
    bleu = delta = None
    if hyps:
        bleu = corpus_bleu(hyps, [[r.text for r in rs] for rs in refs])
        delta = corpus_delta_bleu(hyps, refs)

    n = len(known)
    return EvalReport(
        retrieval_strategy=retrieval_strategy or "unknown",
        rerank_strategy=rerank_strategy or "unknown",
        retrieved_gt=retrieved,
        total_known_gt=n,
        total_cases=len(dataset),
        accuracy=retrieval_accuracy(retrieved, n),
        top1_hits=top1,
        top2_hits=top2,
        top1_accuracy=top1 / n,
        top2_accuracy=top2 / n,
        bleu=bleu,
        delta_bleu=delta,
        aligned_with_references=len(hyps),
        per_case=per_case,
    )


def write_report(report: EvalReport, run_dir: str | Path) -> None:
    run_dir = Path(run_dir)
    (run_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    (run_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
