"""``dermpipe`` command line.

Exit codes: 0 success, 1 infrastructure failure (transport, manifest sink)
or replay mismatch, 2 configuration / usage / input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import tempfile
from pathlib import Path
from typing import Sequence

from .aligner import ApoConfig, RuleSet, apo_optimize, bundled_rules, load_pairs
from .cases import load_dataset
from .config import PipelineConfig, load_config
from .errors import DatasetError, DermPipeError, MissingArtifacts, ZeroDenominator
from .evaluate import evaluate_run, write_report
from .gateway import read_manifest
from .prompts import PromptLibrary
from .reranker import RankStrategy
from .retrieval import RetrievalStrategy
from .runner import INFRA_ERRORS, compare_runs, execute_run, make_backend, make_judge

log = logging.getLogger("dermpipe")

EXIT_OK, EXIT_INFRA, EXIT_USAGE = 0, 1, 2


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    # SUPPRESS lets the flags appear before or after the subcommand
    g.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="TOML or JSON config file")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    g.add_argument("--backend", choices=("live", "replay", "scripted"), default=argparse.SUPPRESS)
    g.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output root directory")
    g.add_argument("--script", type=Path, default=argparse.SUPPRESS, help="scripted-backend response file")
    g.add_argument("--manifest", type=Path, default=argparse.SUPPRESS, help="manifest to replay")
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="dermpipe", parents=[common], description="Dermatology diagnosis pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, helptext in (("run", "run the pipeline"), ("record", "run and keep the manifest for replay")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--dataset", type=Path)
        p.add_argument("--rules", type=Path, help="RuleSet JSON overriding the bundled rules")
        p.add_argument("--prompts", type=Path, help="directory of prompt overrides")
        p.add_argument("--retrieval", choices=[s.value for s in RetrievalStrategy])
        p.add_argument("--rerank", choices=[s.value for s in RankStrategy])
        p.add_argument("--max-candidates", type=int)
        p.add_argument("--judge", choices=("exact", "llm"))
        p.add_argument("--concurrency", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="score a run directory")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--dataset", type=Path, help="defaults to the dataset recorded in the run manifest")
    p.add_argument("--judge", choices=("exact", "llm"), default="exact")

    p = sub.add_parser("apo", parents=[common], help="learn alignment rules")
    p.add_argument("--pairs", type=Path, required=True, help="JSONL of {case_id, draft, reference}")
    p.add_argument("--rules", type=Path, help="starting RuleSet (default: bundled)")
    p.add_argument("--output", type=Path, help="where to write the new RuleSet")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--min-gain", type=float)

    p = sub.add_parser("replay-verify", parents=[common], help="replay a run and compare artifacts byte for byte")
    p.add_argument("run_dir", type=Path)
    return parser


def _abs(path: Path | None) -> Path | None:
    return None if path is None else path.resolve()


def _config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    return cfg.with_overrides(
        seed=getattr(args, "seed", None),
        out_dir=getattr(args, "out", None),
        script_path=_abs(getattr(args, "script", None)),
        replay_manifest=_abs(getattr(args, "manifest", None)),
    )


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config(args)
    cfg = cfg.with_overrides(
        dataset_path=_abs(args.dataset),
        rules_path=_abs(args.rules),
        prompts_dir=_abs(args.prompts),
        retrieval_strategy=RetrievalStrategy(args.retrieval) if args.retrieval else None,
        rerank_strategy=RankStrategy(args.rerank) if args.rerank else None,
        max_candidates=args.max_candidates,
        judge_mode=args.judge,
        max_concurrency=args.concurrency,
    )
    mode = getattr(args, "backend", "live")
    if args.command == "record" and mode == "replay":
        print("record needs a live or scripted backend", file=sys.stderr)
        return EXIT_USAGE
    cfg.check_paths("dataset_path")
    dataset = load_dataset(cfg.dataset_path)
    backend = make_backend(mode, cfg)
    summary = execute_run(cfg, backend, dataset=dataset)

    failed = [r for r in summary.results if not r.ok]
    print(f"run {summary.run_id}: {len(summary.results) - len(failed)} ok, {len(failed)} failed, {summary.calls} calls")
    for r in failed:
        print(f"  {r.case_id}: {r.reason}")
    print(f"artifacts: {summary.run_dir}")
    if args.command == "record":
        print(f"manifest: {summary.run_dir / 'manifest.jsonl'}")
    if summary.report is not None:
        print(summary.report.to_text(), end="")
    elif summary.report_error:
        print(f"no report: {summary.report_error}")
    return summary.exit_code


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    dataset_path = args.dataset
    manifest = args.run_dir / "manifest.jsonl"
    if dataset_path is None and manifest.is_file():
        header, _, _ = read_manifest(manifest)
        if header is not None:
            recorded = PipelineConfig.from_dict(header["config"])
            cfg = dataclasses.replace(recorded, out_dir=cfg.out_dir)
            dataset_path = recorded.dataset_path
    if dataset_path is None:
        print("no dataset given and none recorded in the run", file=sys.stderr)
        return EXIT_USAGE
    dataset = load_dataset(dataset_path)
    backend = make_backend(getattr(args, "backend", "live"), cfg) if args.judge == "llm" else None
    judge = make_judge(args.judge, backend, cfg, PromptLibrary.load(cfg.prompts_dir))
    report = evaluate_run(args.run_dir, dataset, judge)
    write_report(report, args.run_dir)
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_apo(args: argparse.Namespace) -> int:
    cfg = _config(args)
    apo = cfg.apo
    if args.max_iterations is not None or args.min_gain is not None:
        apo = ApoConfig(
            max_iterations=apo.max_iterations if args.max_iterations is None else args.max_iterations,
            min_gain=apo.min_gain if args.min_gain is None else args.min_gain,
            worst_k=apo.worst_k,
            max_rules=apo.max_rules,
            max_workers=apo.max_workers,
        )
    pairs = load_pairs(args.pairs)
    rules_path = args.rules or cfg.rules_path
    initial = RuleSet.load(rules_path) if rules_path else bundled_rules()
    backend = make_backend(getattr(args, "backend", "live"), cfg)
    result = apo_optimize(pairs, initial, backend, cfg.gateway, apo, prompts=PromptLibrary.load(cfg.prompts_dir))

    learned = result.rules if result.rules is not initial else initial.bumped()
    output = args.output or Path(cfg.out_dir) / f"rules_v{learned.version}.json"
    output.parent.mkdir(parents=True, exist_ok=True)
    learned.save(output)

    def fmt(x: float | None) -> str:
        return "n/a" if x is None else f"{x:.6f}"

    print(f"DeltaBLEU before={fmt(result.initial_score)} after={fmt(result.final_score)}")
    accepted = sum(it.accepted for it in result.iterations)
    print(f"iterations={len(result.iterations)} accepted={accepted} skipped={result.skipped}")
    print(f"rules: {output} (version {learned.version})")
    return EXIT_OK


def cmd_replay_verify(args: argparse.Namespace) -> int:
    manifest = args.run_dir / "manifest.jsonl"
    if not manifest.is_file():
        print(f"no manifest in {args.run_dir}", file=sys.stderr)
        return EXIT_USAGE
    header, _, _ = read_manifest(manifest)
    if header is None:
        print(f"{manifest} has no header", file=sys.stderr)
        return EXIT_USAGE
    recorded = PipelineConfig.from_dict(header["config"])
    out = getattr(args, "out", None) or Path(tempfile.mkdtemp(prefix="dermpipe-replay-"))
    cfg = recorded.with_overrides(out_dir=out, replay_manifest=manifest)
    backend = make_backend("replay", cfg)
    backend.strict = True
    summary = execute_run(cfg, backend)
    diffs = compare_runs(args.run_dir, summary.run_dir)
    if diffs:
        print(f"replay differs from {args.run_dir} in {len(diffs)} file(s):")
        for d in diffs:
            print(f"  {d}")
        return EXIT_INFRA
    print(f"replay identical: {summary.run_dir}")
    return summary.exit_code


COMMANDS = {
    "run": cmd_run,
    "record": cmd_run,
    "evaluate": cmd_evaluate,
    "apo": cmd_apo,
    "replay-verify": cmd_replay_verify,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except INFRA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFRA
    except (DatasetError, MissingArtifacts, ZeroDenominator, DermPipeError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
