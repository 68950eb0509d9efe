from __future__ import annotations

import json
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dermpipe.cases import normalize_condition
from dermpipe.errors import (
    AmbiguousDecision,
    AmbiguousDiagnosis,
    IllegalTransition,
    IncompleteFinding,
    MacAborted,
    MacError,
    NoDiagnosisFound,
    RerankError,
    TooFewCandidates,
    TooManyCandidates,
    UnknownSpecialist,
)
from dermpipe.gateway import GatewayConfig, ScriptedBackend, ScriptRule
from dermpipe.mac import (
    Assignment,
    Finalize,
    MacConfig,
    MacState,
    Phase,
    RequestRevision,
    SpecialistFinding,
    admin_evaluate,
    assign_diseases,
    consolidate,
    describe_observation,
    detect_termination,
    extract_final_diagnosis,
    mac_rank_outcome,
    parse_admin_decision,
    parse_specialist_reply,
    render_consolidation,
    run_mac,
    run_specialist,
    validate_transitions,
)
from dermpipe.retrieval import CandidateSet

from .conftest import load_appendix, make_case

POOL = ["chronic eczema", "psoriasis", "tinea corporis", "lichen planus", "prurigo nodularis", "scabies"]


def cands(n):
    return CandidateSet.of(POOL[:n], "m1")


def spec_reply(disease, cs):
    lines = [f"EVIDENCE: the lesions fit {disease}."]
    lines += [f"CRITIQUE {o}: {o} does not fit as well." for o in cs.names if o != disease]
    return "\n".join(lines)


def mac_backend(cs, admin_replies, refine="Stronger evidence.", coordinator=("Assignments noted.", "Compiled.")):
    rules = [ScriptRule(list(coordinator), agent="Coordinator")]
    for i, name in enumerate(cs.names, start=1):
        rules.append(ScriptRule([spec_reply(name, cs), refine], agent=f"Specialist_{i}", repeat_last=True))
    rules.append(ScriptRule(list(admin_replies), agent="Admin"))
    return ScriptedBackend(rules=rules)


FINAL = "FINAL_DIAGNOSIS: {}\nTERMINATE"


# -- configuration and assignment --------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        MacConfig(min_candidates=1)
    with pytest.raises(ValueError):
        MacConfig(termination_token="terminate")
    with pytest.raises(ValueError):
        MacConfig(role_prompts={"doctor": "x"})
    assert MacConfig().call_budget(5) == 1 + 5 + 1 + 3 * 6 + 1


@pytest.mark.parametrize("n", [3, 4, 5])
def test_assignment_is_bijective(n):
    a = assign_diseases(cands(n), MacConfig())
    assert len({x.specialist_name for x in a}) == n
    assert sorted(x.disease.normalized for x in a) == sorted(cands(n).names)


def test_assignment_bounds():
    with pytest.raises(TooManyCandidates):
        assign_diseases(cands(6), MacConfig())
    with pytest.raises(TooFewCandidates):
        assign_diseases(cands(2), MacConfig())
    assert issubclass(TooManyCandidates, MacError) and issubclass(TooManyCandidates, RerankError)
    with pytest.raises(ValueError):
        assign_diseases(cands(3), MacConfig(specialist_names=("A", "B")))
    with pytest.raises(ValueError):
        assign_diseases(cands(3), MacConfig(specialist_names=("A", "A", "B")))


# -- parsers ------------------------------------------------------------------


def test_detect_termination():
    assert detect_termination("done. TERMINATE")
    assert not detect_termination("done. terminate")
    with pytest.raises(ValueError):
        detect_termination("x", "stop")


def test_extract_final_diagnosis():
    cs = CandidateSet.of(["eczema", "chronic eczema", "psoriasis"])
    assert extract_final_diagnosis("FINAL_DIAGNOSIS: **Chronic Eczema**.\nTERMINATE", cs).normalized == "chronic eczema"
    assert extract_final_diagnosis("I conclude chronic eczema. TERMINATE", cs).normalized == "chronic eczema"
    with pytest.raises(AmbiguousDiagnosis):
        extract_final_diagnosis("psoriasis or chronic eczema", cs)
    with pytest.raises(NoDiagnosisFound):
        extract_final_diagnosis("no idea", cs)
    with pytest.raises(NoDiagnosisFound):
        extract_final_diagnosis(None, cs)


def test_parse_admin_decision():
    names = ["Rick", "Sam", "Specialist_2"]
    d = parse_admin_decision("Need more.\nREVISE: Sam, **Rick** and specialist_2", names, "TERMINATE")
    assert isinstance(d, RequestRevision) and d.targets == ("Sam", "Rick", "Specialist_2")
    assert isinstance(parse_admin_decision("FINAL_DIAGNOSIS: x TERMINATE", names, "TERMINATE"), Finalize)
    with pytest.raises(AmbiguousDecision):
        parse_admin_decision("thinking", names, "TERMINATE")
    with pytest.raises(AmbiguousDecision):
        parse_admin_decision("REVISE: Sam\nTERMINATE", names, "TERMINATE")
    with pytest.raises(UnknownSpecialist):
        parse_admin_decision("REVISE: Bob", names, "TERMINATE")


def test_parse_marker_reply():
    cs = cands(3)
    ev, crit = parse_specialist_reply(spec_reply("psoriasis", cs), cs.candidates[1], cs)
    assert ev == "the lesions fit psoriasis."
    assert list(crit) == ["chronic eczema", "tinea corporis"]


def test_parse_appendix_free_form_finding():
    case, cs, obs, names, script = load_appendix()
    rick_reply = next(r for r in json.loads(script.read_text())["rules"] if r["agent"] == "Rick")["responses"][0]
    ev, crit = parse_specialist_reply(rick_reply, normalize_condition("prurigo nodularis"), cs)
    assert ev
    assert set(crit) == set(cs.names) - {"prurigo nodularis"}


# -- single steps ---------------------------------------------------------------


def test_run_specialist_reasks_once_then_fails():
    cs = cands(3)
    case = make_case("m1")
    a = Assignment("Specialist_1", cs.candidates[0])
    partial = "EVIDENCE: fits.\nCRITIQUE psoriasis: no."
    good = ScriptedBackend([partial, "CRITIQUE tinea corporis: no scale ring."])
    f = run_specialist(a, case, "obs", cs, good)
    assert set(f.critiques) == {"psoriasis", "tinea corporis"} and good.calls == 2
    bad = ScriptedBackend([partial, "nothing", "CRITIQUE tinea corporis: never asked"])
    with pytest.raises(IncompleteFinding):
        run_specialist(a, case, "obs", cs, bad)
    assert bad.calls == 2


def findings(cs):
    return [
        SpecialistFinding(f"Specialist_{i}", c, f"fits {c.normalized}", {o: f"not {o}" for o in cs.names if o != c.normalized})
        for i, c in enumerate(cs, start=1)
    ]


def test_consolidation_template_oracle():
    cs = cands(3)
    expected = "\n".join(
        [
            "Compiled findings:",
            "1. chronic eczema",
            "- Supporting Evidence (Specialist_1): fits chronic eczema",
            "- Consolidated Critiques: Specialist_2: not chronic eczema | Specialist_3: not chronic eczema",
            "2. psoriasis",
            "- Supporting Evidence (Specialist_2): fits psoriasis",
            "- Consolidated Critiques: Specialist_1: not psoriasis | Specialist_3: not psoriasis",
            "3. tinea corporis",
            "- Supporting Evidence (Specialist_3): fits tinea corporis",
            "- Consolidated Critiques: Specialist_1: not tinea corporis | Specialist_2: not tinea corporis",
        ]
    )
    assert render_consolidation(findings(cs)) == expected
    assert consolidate(findings(cs), ScriptedBackend([""])) == expected
    assert consolidate(findings(cs), ScriptedBackend(["Coordinator summary"])) == "Coordinator summary"
    with pytest.raises(TooFewCandidates):
        consolidate(findings(cs)[:2], ScriptedBackend(["x"]))


def test_admin_evaluate_reasks_once():
    from dermpipe.mac import MacTranscript

    cs = cands(3)
    t = MacTranscript("m1", cs, assignments=assign_diseases(cs, MacConfig()))
    b = ScriptedBackend(["hmm", "REVISE: Specialist_2"])
    d = admin_evaluate("compiled", t, b)
    assert d == RequestRevision(("Specialist_2",), "REVISE: Specialist_2") and b.calls == 2


def test_describe_observation_fallback():
    case = make_case(query="itchy for years")
    assert describe_observation(case, ScriptedBackend([" red plaques "]), GatewayConfig()) == (
        "red plaques",
        "image_description",
    )
    assert describe_observation(case, ScriptedBackend(["  "]), GatewayConfig()) == ("itchy for years", "query")


# -- full runs ----------------------------------------------------------------


@pytest.mark.parametrize("n", [3, 4, 5])
def test_run_direct_finalize(n):
    cs = cands(n)
    b = mac_backend(cs, [FINAL.format(cs.names[-1])])
    t = run_mac(make_case("m1"), cs, "obs", b)
    assert t.terminated and not t.forced_finalize
    assert t.final_diagnosis.normalized == cs.names[-1]
    assert t.llm_calls == b.calls == 1 + n + 1 + 1
    assert t.llm_calls <= t.call_budget
    validate_transitions(t.states, n, 2)
    assert str(t.states[-1]) == "Terminated"


@pytest.mark.parametrize("n", [3, 4, 5])
def test_forced_finalize_after_two_rounds(n):
    cs = cands(n)
    admin = ["REVISE: Specialist_1", "REVISE: Specialist_2, Specialist_3", "REVISE: Specialist_1", FINAL.format(cs.names[1])]
    t = run_mac(make_case("m1"), cs, "obs", mac_backend(cs, admin))
    assert t.forced_finalize and t.terminated
    assert len(t.refinement_rounds) == 2
    assert [r.targets for r in t.refinement_rounds] == [["Specialist_1"], ["Specialist_2", "Specialist_3"]]
    assert t.final_diagnosis.normalized == cs.names[1]
    assert t.llm_calls <= MacConfig().call_budget(n)
    phases = [s.phase for s in t.states]
    assert phases.count(Phase.REVISION) == 2 and phases.count(Phase.ADMIN_EVALUATION) == 3


def test_six_candidates_rejected_before_any_call():
    b = ScriptedBackend([])
    with pytest.raises(TooManyCandidates):
        run_mac(make_case(), cands(6), "obs", b)
    assert b.calls == 0


def test_abort_carries_partial_transcript():
    cs = cands(3)
    b = mac_backend(cs, ["no decision", "still none"])
    with pytest.raises(MacAborted) as err:
        run_mac(make_case("m1"), cs, "obs", b)
    t = err.value.transcript
    assert not t.terminated and len(t.findings) == 3
    assert t.states[-1] == MacState(Phase.ADMIN_EVALUATION)
    assert "AmbiguousDecision" in str(err.value)


def test_coordinator_empty_compilation_uses_template():
    cs = cands(3)
    t = run_mac(make_case("m1"), cs, "obs", mac_backend(cs, [FINAL.format("psoriasis")], coordinator=("ok", "")))
    assert t.consolidation_fallback and t.consolidation.startswith("Compiled findings:")


def test_validator_rejects_illegal_paths():
    ok = ["Init", "Assignment", "SpecialistAnalysis(0)", "SpecialistAnalysis(1)", "SpecialistAnalysis(2)",
          "Compilation", "AdminEvaluation", "FinalDiagnosis", "Terminated"]
    validate_transitions(ok, 3, 2)
    with pytest.raises(IllegalTransition):
        validate_transitions(ok[:3] + ok[4:], 3, 2)
    with pytest.raises(IllegalTransition):
        validate_transitions(ok[1:], 3, 2)
    rev = ok[:7] + ["Revision(1)", "AdminEvaluation", "Revision(2)", "AdminEvaluation", "Revision(3)"]
    with pytest.raises(IllegalTransition):
        validate_transitions(rev, 3, 2)
    with pytest.raises(IllegalTransition):
        validate_transitions(["Init", "Bogus"], 3, 2)


def test_transcript_serializes_and_ranks():
    cs = cands(4)
    t = run_mac(make_case("m1"), cs, "obs", mac_backend(cs, [FINAL.format("lichen planus")]))
    d = json.loads(json.dumps(t.to_dict()))
    assert d["final_diagnosis"] == "lichen planus" and d["states"][0] == "Init"
    assert all(m["state"] for m in d["messages"])
    out = mac_rank_outcome(t)
    assert [c.normalized for c in out.ranking] == ["lichen planus", "chronic eczema", "psoriasis", "tinea corporis"]


def test_appendix_fixture_reaches_ground_truth():
    case, cs, obs, names, script = load_appendix()
    start = time.perf_counter()
    t = run_mac(case, cs, obs, ScriptedBackend.from_file(script), MacConfig(specialist_names=names))
    assert time.perf_counter() - start < 5
    assert t.final_diagnosis == case.ground_truth
    assert t.final_diagnosis.normalized == "chronic eczema"
    assert [a.specialist_name for a in t.assignments] == list(names)
    assert len(t.refinement_rounds) == 1 and t.refinement_rounds[0].targets == ["Sam"]
    assert t.llm_calls <= t.call_budget
    validate_transitions(t.states, 5, 2)


# -- property: random admin behaviour ----------------------------------------

decision = st.one_of(
    st.lists(st.integers(1, 5), min_size=1, max_size=3).map(lambda ix: ("revise", ix)),
    st.just(("final", None)),
)


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 5), st.lists(decision, min_size=1, max_size=4), st.integers(0, 4), st.integers(0, 2))
def test_random_debates_respect_protocol(n, decisions, pick, max_rounds):
    cs = cands(n)
    final = cs.names[pick % n]
    revisions = []
    for kind, ix in decisions:
        if kind == "final":
            break
        revisions.append("REVISE: " + ", ".join(f"Specialist_{(i - 1) % n + 1}" for i in ix))
    # the reply after the last allowed round is the forced final one
    admin = revisions[: max_rounds + 1] + [FINAL.format(final)]
    config = MacConfig(max_revision_rounds=max_rounds)
    t = run_mac(make_case("m1"), cs, "obs", mac_backend(cs, admin), config)
    assert t.terminated
    assert t.final_diagnosis.normalized == final
    assert len(t.refinement_rounds) <= max_rounds
    assert t.llm_calls <= config.call_budget(n)
    validate_transitions(t.states, n, max_rounds)
