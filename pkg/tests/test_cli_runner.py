from __future__ import annotations

import json
import shutil
from pathlib import Path

import pytest

from dermpipe.cases import Dataset, load_dataset, normalize_condition
from dermpipe.cli import main
from dermpipe.config import load_config
from dermpipe.errors import MissingArtifacts, ZeroDenominator
from dermpipe.evaluate import evaluate_run
from dermpipe.gateway import ScriptedBackend, ScriptRule, read_manifest
from dermpipe.judge import ExactJudge, LlmJudge
from dermpipe.gateway import GatewayConfig
from dermpipe.reranker import RankOutcome, RankStrategy
from dermpipe.retrieval import CandidateSet
from dermpipe.runner import compare_runs, execute_run

from .conftest import DATA, make_case

DEMO = DATA / "demo"


def only_run(out: Path) -> Path:
    (run,) = [p for p in out.iterdir() if p.is_dir()]
    return run


def demo_run(out: Path, capsys=None) -> Path:
    code = main(["run", "--config", str(DEMO / "config.toml"), "--backend", "scripted", "--out", str(out)])
    assert code == 0
    return only_run(out)


# -- synthetic run directories -------------------------------------------------


def fixture_run(root: Path, rows):
    """rows: (case_id, truth | None, candidates, ranking) -> (run_dir, dataset)."""
    cases = []
    for case_id, truth, cands, ranking in rows:
        cases.append(make_case(case_id, gt=truth))
        cs = CandidateSet.of(cands, case_id)
        (root / "candidates").mkdir(parents=True, exist_ok=True)
        (root / "candidates" / f"{case_id}.json").write_text(json.dumps(cs.to_dict()))
        if ranking:
            out = RankOutcome(RankStrategy.NAIVE_COT, tuple(normalize_condition(n) for n in ranking), case_id=case_id)
            (root / "rankings").mkdir(parents=True, exist_ok=True)
            (root / "rankings" / f"{case_id}.json").write_text(json.dumps(out.to_dict()))
    (root / "rankings").mkdir(exist_ok=True)
    return root, Dataset(tuple(cases))


def test_eval_40_of_47_plus_unknown_gt_excluded(tmp_path):
    rows = []
    for i in range(47):
        cands = ["eczema", "acne"] if i < 40 else ["acne", "wart"]
        rows.append((f"k{i:02d}", "eczema", cands, ["acne", "eczema"]))
    rows += [("u1", None, ["acne"], ["acne"]), ("u2", None, ["wart"], None)]
    run_dir, ds = fixture_run(tmp_path, rows)
    report = evaluate_run(run_dir, ds, ExactJudge())
    assert (report.retrieved_gt, report.total_known_gt, report.total_cases) == (40, 47, 49)
    assert abs(report.accuracy - 0.851063) < 1e-6
    assert report.top1_hits == 0 and report.top2_hits == 47
    assert sum(not r.judged for r in report.per_case) == 2


def test_failed_case_counts_as_miss(tmp_path):
    run_dir, ds = fixture_run(tmp_path, [("a", "eczema", ["eczema"], ["eczema"])])
    ds = Dataset(ds.cases + (make_case("b", gt="acne"),))
    report = evaluate_run(run_dir, ds)
    assert (report.retrieved_gt, report.total_known_gt, report.top1_hits) == (1, 2, 1)


def test_eval_errors(tmp_path):
    with pytest.raises(MissingArtifacts):
        evaluate_run(tmp_path, Dataset((make_case("a", gt="x"),)))
    run_dir, ds = fixture_run(tmp_path, [("a", None, ["eczema"], ["eczema"])])
    with pytest.raises(ZeroDenominator):
        evaluate_run(run_dir, ds)


def test_exact_and_llm_judge_agree_on_exact_corpus(tmp_path):
    rows = [(f"c{i}", "eczema", ["eczema", "acne"], ["eczema", "acne"]) for i in range(5)]
    run_dir, ds = fixture_run(tmp_path, rows)
    backend = ScriptedBackend([])
    a = evaluate_run(run_dir, ds, ExactJudge())
    b = evaluate_run(run_dir, ds, LlmJudge(backend, GatewayConfig()))
    assert a.to_json() == b.to_json() and backend.calls == 0


def test_llm_judge_counts_similar_names(tmp_path):
    run_dir, ds = fixture_run(tmp_path, [("c1", "herpetic eczema", ["seborrheic eczema", "acne"], ["seborrheic eczema"])])
    backend = ScriptedBackend(["VERDICT: SIMILAR, RULE: 3"])
    report = evaluate_run(run_dir, ds, LlmJudge(backend, GatewayConfig()))
    assert report.retrieved_gt == 1 and report.top1_hits == 1 and backend.calls == 1
    assert report.per_case[0].judgment_source == "llm"


# -- end-to-end runs -------------------------------------------------------------


def test_demo_run_layout_and_counts(tmp_path, capsys):
    run = demo_run(tmp_path)
    stdout = capsys.readouterr().out
    assert "10 ok, 0 failed" in stdout
    expected = json.loads((DEMO / "expected.json").read_text())
    header, records, footer = read_manifest(run / "manifest.jsonl")
    assert len(records) == expected["calls"] == footer["calls"]
    assert header["seed"] == 7 and header["run_id"] == run.name
    assert all(v == {"status": "ok"} for v in footer["per_case_status"].values())
    for sub in ("candidates", "rankings", "mac", "aligned"):
        assert len(list((run / sub).glob("*.json"))) == expected["cases"]
    report = json.loads((run / "report.json").read_text())
    assert report["total_cases"] == 10 and report["total_known_gt"] == 8
    assert run.name not in (run / "report.txt").read_text()


def test_replay_twice_is_byte_identical(tmp_path):
    run = demo_run(tmp_path / "rec")
    manifest = run / "manifest.jsonl"
    outs = []
    for name in ("r1", "r2"):
        code = main(["run", "--config", str(DEMO / "config.toml"), "--backend", "replay",
                     "--manifest", str(manifest), "--out", str(tmp_path / name)])
        assert code == 0
        outs.append(only_run(tmp_path / name))
    assert compare_runs(run, outs[0]) == []
    assert compare_runs(outs[0], outs[1]) == []
    assert (outs[0] / "report.json").read_bytes() == (outs[1] / "report.json").read_bytes()


def test_replay_verify_and_mismatch(tmp_path, capsys):
    run = demo_run(tmp_path / "rec")
    assert main(["replay-verify", str(run), "--out", str(tmp_path / "v")]) == 0
    assert "replay identical" in capsys.readouterr().out
    tampered = tmp_path / "tampered"
    shutil.copytree(run, tampered)
    path = next((tampered / "aligned").glob("*.json"))
    path.write_text(path.read_text().replace("\"aligned\":", "\"aligned\": \"x\", \"old\":", 1))
    assert main(["replay-verify", str(tampered), "--out", str(tmp_path / "v2")]) == 1
    assert "differs" in capsys.readouterr().out


def test_crash_isolation(tmp_path):
    cfg = load_config(DEMO / "config.toml").with_overrides(out_dir=tmp_path)
    ds = load_dataset(cfg.dataset_path)
    script = json.loads((DEMO / "script.json").read_text())
    broken = ScriptedBackend(
        rules=[ScriptRule(["no list at all"], case_id="demo03", stage="retrieval")]
        + [ScriptRule.from_dict(r) for r in script["rules"]]
    )
    summary = execute_run(cfg, broken, dataset=ds, run_id="iso")
    status = {r.case_id: r for r in summary.results}
    assert not status["demo03"].ok and "NoCandidatesFound" in status["demo03"].reason
    assert sum(r.ok for r in summary.results) == 9
    assert summary.exit_code == 0
    assert not (tmp_path / "iso" / "candidates" / "demo03.json").exists()
    assert (tmp_path / "iso" / "aligned" / "demo04.json").exists()
    _, _, footer = read_manifest(tmp_path / "iso" / "manifest.jsonl")
    assert footer["per_case_status"]["demo03"]["status"] == "failed"


def test_transport_failure_is_exit_1(tmp_path):
    from dermpipe.errors import TransportError

    def boom(req):
        raise TransportError("connection reset")

    cfg = load_config(DEMO / "config.toml").with_overrides(out_dir=tmp_path)
    summary = execute_run(cfg, ScriptedBackend(responder=boom), run_id="x")
    assert summary.exit_code == 1 and not any(r.ok for r in summary.results)


def test_live_without_token_exits_2(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("AUTH_TOKEN", raising=False)
    code = main(["run", "--config", str(DEMO / "config.toml"), "--backend", "live", "--out", str(tmp_path)])
    assert code == 2
    assert "AUTH_TOKEN" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    assert main(["run", "--backend", "scripted", "--out", str(tmp_path)]) == 2
    assert main(["run", "--config", str(DEMO / "config.toml"), "--backend", "replay", "--out", str(tmp_path)]) == 2
    assert main(["evaluate", str(tmp_path)]) == 2
    assert main(["replay-verify", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2


def test_evaluate_cli_uses_recorded_dataset(tmp_path, capsys):
    run = demo_run(tmp_path / "rec")
    before = (run / "report.json").read_bytes()
    (run / "report.json").unlink()
    capsys.readouterr()
    assert main(["evaluate", str(run)]) == 0
    assert (run / "report.json").read_bytes() == before
    assert "Retrieval" in capsys.readouterr().out


# -- apo command ----------------------------------------------------------------


def apo_cli(tmp_path, *extra):
    return main(["apo", "--backend", "scripted", "--script", str(DATA / "apo_toy" / "script.json"),
                 "--pairs", str(DATA / "apo_toy" / "pairs.jsonl"), "--out", str(tmp_path), *extra])


def test_apo_cli_prints_before_after(tmp_path, capsys):
    out = tmp_path / "learned.json"
    assert apo_cli(tmp_path, "--output", str(out)) == 0
    line = next(l for l in capsys.readouterr().out.splitlines() if l.startswith("DeltaBLEU"))
    before, after = (float(p.split("=")[1]) for p in line.split()[1:])
    assert after >= before
    assert json.loads(out.read_text())["version"] == 2


def test_apo_cli_zero_iterations_bumps_version(tmp_path):
    from dermpipe.aligner import RuleSet, bundled_rules

    out = tmp_path / "same.json"
    assert apo_cli(tmp_path, "--max-iterations", "0", "--output", str(out)) == 0
    learned = RuleSet.load(out)
    assert learned.rules == bundled_rules().rules and learned.version == bundled_rules().version + 1


def test_apo_cli_malformed_pairs(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"case_id": "a", "draft": "d", "reference": "r"}\n{oops\n')
    code = main(["apo", "--backend", "scripted", "--script", str(DATA / "apo_toy" / "script.json"),
                 "--pairs", str(bad)])
    assert code == 2
    assert "line 2" in capsys.readouterr().err
