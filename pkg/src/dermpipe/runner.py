"""Run orchestration: retrieve, re-rank, align every case and persist the results."""

from __future__ import annotations

import json
import logging
import secrets
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from .aligner import RuleSet, apply_rules, bundled_rules, draft_response
from .cases import Dataset, DermCase, load_dataset
from .config import PipelineConfig
from .errors import ConfigError, MacAborted, SinkError, TransportError
from .evaluate import EvalReport, evaluate_run, write_report
from .gateway import Backend, HttpBackend, ManifestWriter, RecordingBackend, ReplayBackend, ScriptedBackend
from .gateway.backends import utc_now
from .judge import ExactJudge, Judge, LlmJudge
from .mac import describe_observation, mac_rank_outcome, run_mac
from .prompts import PromptLibrary
from .reranker import RankOutcome, RankStrategy, rank_expert_image_only, rank_expert_with_context, rank_naive
from .retrieval import retrieve

log = logging.getLogger(__name__)

ARTIFACT_DIRS = ("candidates", "rankings", "mac", "aligned")
INFRA_ERRORS = (TransportError, SinkError)


def new_run_id() -> str:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    return f"{stamp}-{secrets.token_hex(3)}"


def write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def make_backend(mode: str, config: PipelineConfig) -> Backend:
    """Backend for ``mode`` (live, replay or scripted); raises ConfigError."""
    if mode == "live":
        return HttpBackend(config.gateway)
    if mode == "replay":
        if config.replay_manifest is None:
            raise ConfigError("replay mode needs a manifest (--manifest or replay_manifest)")
        if not Path(config.replay_manifest).is_file():
            raise ConfigError(f"manifest not found: {config.replay_manifest}")
        return ReplayBackend.from_manifest(config.replay_manifest)
    if mode == "scripted":
        if config.script_path is None:
            raise ConfigError("scripted mode needs a script (--script or script_path)")
        try:
            return ScriptedBackend.from_file(config.script_path)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"bad script {config.script_path}: {exc}") from exc
    raise ConfigError(f"unknown backend mode {mode!r}")


@dataclass
class CaseResult:
    case_id: str
    ok: bool
    reason: str = ""
    infrastructure: bool = False

    @property
    def status(self) -> dict[str, str]:
        return {"status": "ok"} if self.ok else {"status": "failed", "reason": self.reason}


@dataclass
class Pipeline:
    config: PipelineConfig
    backend: Backend
    run_dir: Path
    prompts: PromptLibrary = field(default_factory=PromptLibrary.load)
    rules: RuleSet = field(default_factory=bundled_rules)

    def run_case(self, case: DermCase) -> CaseResult:
        try:
            self._run_case(case)
            return CaseResult(case.case_id, True)
        except INFRA_ERRORS as exc:
            log.error("case %s: infrastructure failure: %s", case.case_id, exc)
            return CaseResult(case.case_id, False, f"{type(exc).__name__}: {exc}", infrastructure=True)
        except MacAborted as exc:
            write_json(self.run_dir / "mac" / f"{case.case_id}.json", exc.transcript.to_dict())
            infra = isinstance(exc.__cause__, INFRA_ERRORS)
            return CaseResult(case.case_id, False, str(exc), infrastructure=infra)
        except Exception as exc:  # one case must never take the run down
            log.warning("case %s failed: %s", case.case_id, exc)
            return CaseResult(case.case_id, False, f"{type(exc).__name__}: {exc}")

    def _run_case(self, case: DermCase) -> None:
        cfg, gw = self.config, self.config.gateway
        candidates = retrieve(
            case, cfg.retrieval_strategy, self.backend, gw, max_candidates=cfg.max_candidates, prompts=self.prompts
        )
        write_json(self.run_dir / "candidates" / f"{case.case_id}.json", candidates.to_dict())

        outcome = self._rerank(case, candidates)
        write_json(self.run_dir / "rankings" / f"{case.case_id}.json", outcome.to_dict())

        diagnosis = outcome.top1.normalized
        draft = draft_response(case, diagnosis, self.backend, gw, self.prompts)
        aligned = apply_rules(draft, self.rules, self.backend, gw, prompts=self.prompts, case_id=case.case_id)
        write_json(
            self.run_dir / "aligned" / f"{case.case_id}.json",
            {"case_id": case.case_id, "diagnosis": diagnosis, "draft": draft, "aligned": aligned},
        )

    def _rerank(self, case: DermCase, candidates) -> RankOutcome:
        cfg, gw = self.config, self.config.gateway
        strategy = cfg.rerank_strategy
        if strategy is RankStrategy.NAIVE_COT:
            return rank_naive(case, candidates, self.backend, gw, cfg.seed, self.prompts)
        if strategy is RankStrategy.EXPERT_WITH_CONTEXT:
            return rank_expert_with_context(case, candidates, self.backend, gw, self.prompts)
        if strategy is RankStrategy.EXPERT_IMAGE_ONLY:
            return rank_expert_image_only(case, candidates, self.backend, gw, self.prompts)
        if cfg.mac.describe_images:
            observation, source = describe_observation(case, self.backend, gw, self.prompts)
        else:
            observation, source = case.query, "query"
        transcript = run_mac(
            case, candidates, observation, self.backend, cfg.mac, gateway=gw, prompts=self.prompts,
            observation_source=source,
        )
        write_json(self.run_dir / "mac" / f"{case.case_id}.json", transcript.to_dict())
        return mac_rank_outcome(transcript)


@dataclass
class RunSummary:
    run_id: str
    run_dir: Path
    results: list[CaseResult]
    calls: int
    report: EvalReport | None = None
    report_error: str = ""
    sink_errors: int = 0

    @property
    def infrastructure_failure(self) -> bool:
        return self.sink_errors > 0 or any(r.infrastructure for r in self.results)

    @property
    def exit_code(self) -> int:
        return 1 if self.infrastructure_failure else 0


def make_judge(mode: str, backend: Backend | None, config: PipelineConfig, prompts: PromptLibrary) -> Judge:
    if mode == "exact":
        return ExactJudge()
    if backend is None:
        raise ConfigError("llm judge mode needs a backend")
    return LlmJudge(backend, config.gateway, prompts)


def execute_run(
    config: PipelineConfig,
    backend: Backend,
    *,
    run_id: str | None = None,
    dataset: Dataset | None = None,
    prompts: PromptLibrary | None = None,
    rules: RuleSet | None = None,
    clock=utc_now,
) -> RunSummary:
    """Run the whole dataset, recording every model call in the manifest."""
    if dataset is None:
        config.check_paths("dataset_path")
        dataset = load_dataset(config.dataset_path)
    prompts = prompts or PromptLibrary.load(config.prompts_dir)
    if rules is None:
        rules = RuleSet.load(config.rules_path) if config.rules_path else bundled_rules()

    run_id = run_id or new_run_id()
    run_dir = Path(config.out_dir) / run_id
    for sub in ARTIFACT_DIRS:
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    sink = ManifestWriter(run_dir / "manifest.jsonl")
    sink.append(
        {
            "kind": "header",
            "run_id": run_id,
            "created": clock(),
            "seed": config.seed,
            "config": config.to_dict(),
            "prompt_versions": prompts.versions(),
            "rules_version": rules.version,
        }
    )
    recorder = RecordingBackend(backend, sink, run_id, clock)
    pipeline = Pipeline(config, recorder, run_dir, prompts, rules)

    with ThreadPoolExecutor(max_workers=config.max_concurrency) as pool:
        results = list(pool.map(pipeline.run_case, dataset))

    summary = RunSummary(run_id, run_dir, results, recorder.records_written, sink_errors=len(recorder.sink_errors))
    try:
        judge = make_judge(config.judge_mode, recorder, config, prompts)
        summary.report = evaluate_run(run_dir, dataset, judge)
        write_report(summary.report, run_dir)
    except Exception as exc:
        summary.report_error = f"{type(exc).__name__}: {exc}"
        log.warning("no report for %s: %s", run_id, summary.report_error)

    sink.append(
        {
            "kind": "footer",
            "run_id": run_id,
            "finished": clock(),
            "calls": recorder.records_written,
            "per_case_status": {r.case_id: r.status for r in sorted(results, key=lambda r: r.case_id)},
        }
    )
    return summary


def compare_runs(a: str | Path, b: str | Path) -> list[str]:
    """Relative paths of artifacts that differ (or exist on one side only)."""
    a, b = Path(a), Path(b)
    names: set[str] = set()
    for root in (a, b):
        for sub in ARTIFACT_DIRS:
            names.update(str(p.relative_to(root)) for p in (root / sub).glob("*.json"))
        names.update(n for n in ("report.json", "report.txt") if (root / n).exists())
    diffs = []
    for name in sorted(names):
        pa, pb = a / name, b / name
        if not (pa.is_file() and pb.is_file()) or pa.read_bytes() != pb.read_bytes():
            diffs.append(name)
    return diffs
