from __future__ import annotations

import numpy as np
import pytest

from oracles import ellipse_oracle, hyperbola_oracle
from winnowrag.agents import AgentState
from winnowrag.documents import RetrievedDocument
from winnowrag.embedding import HashEmbedder
from winnowrag.errors import InputValidationError
from winnowrag.geometry import DocumentCluster
from winnowrag.llm import CallbackBackend, ScriptedBackend
from winnowrag.orchestrator import (
    Backends,
    WinnowConfig,
    answer_query,
    initialize_super_agents,
    run_stage1,
    run_winnowing,
)
from winnowrag.protocol import FEEDBACK_HEADER, StructuredResponse

STAGE2 = "Evidence: [YOUR EVIDENCE]"


def make_docs(n, prefix="doc"):
    return [RetrievedDocument(f"{prefix}-{i}", f"Title {i}", f"Passage number {i}.", rank=i) for i in range(1, n + 1)]


def make_agents(point_sets, answers=None):
    """Agents over 1-d points; returns (agents, docs)."""
    agents, docs, rank = [], [], 1
    for n, pts in enumerate(point_sets, 1):
        ids = []
        for p in pts:
            doc = RetrievedDocument(f"doc-{rank}", f"T{rank}", f"text {rank}", rank=rank)
            docs.append(doc)
            ids.append(doc.doc_id)
            rank += 1
        cluster = DocumentCluster.from_members(ids, [np.array([float(p)]) for p in pts])
        answer = answers[n - 1] if answers else f"ans{n}"
        agents.append(AgentState(n, cluster, StructuredResponse("", "", answer), members=(n,)))
    return agents, docs


def stage2_agent(answer_for_first_doc):
    """Agent whose answer is a function of the first document it sees."""

    def respond(req):
        text = req.user_text
        first = text.split("Document [1] (Title: ", 1)[1].split(")", 1)[0]
        ans = answer_for_first_doc.get(first, "unknown")
        if STAGE2 in text:
            return f"Evidence: from {first}\nExplanation: it says so\nAnswer: {ans}"
        return ans

    return CallbackBackend(respond)


def critic_script(*verdicts):
    """Critic returning the given judgement texts in order (last one repeats)."""
    calls = []

    def respond(req):
        calls.append(req.user_text)
        return verdicts[min(len(calls), len(verdicts)) - 1]

    backend = CallbackBackend(respond)
    backend.calls = calls
    return backend


# --- stage I -------------------------------------------------------------------


def test_stage1_fifty_docs_ten_agents():
    backends = Backends(ScriptedBackend(default_response="Paris"), embedder=HashEmbedder(16))
    agents = run_stage1("Where is the tower?", make_docs(50), WinnowConfig(), backends)
    assert len(agents) == 10
    assert all(a.answer == "Paris" for a in agents)
    assert sorted(d for a in agents for d in a.doc_ids) == sorted(d.doc_id for d in make_docs(50))


def test_stage1_clamps_k():
    backends = Backends(ScriptedBackend(default_response="x"), embedder=HashEmbedder(16))
    assert len(run_stage1("q", make_docs(3), WinnowConfig(k=10), backends)) == 3


def test_stage1_rejects_empty_docs():
    with pytest.raises(InputValidationError):
        run_stage1("q", [], WinnowConfig(), Backends(ScriptedBackend()))


def test_single_doc_single_super_agent_without_critic():
    critic = critic_script("should not be called")
    backends = Backends(ScriptedBackend(default_response="Answer: solo"), critic=critic, embedder=HashEmbedder(8))
    answer, trace = answer_query("q", make_docs(1), WinnowConfig(), backends)
    assert answer == "solo"
    assert critic.calls == []
    assert len(trace.super_agents) == 1 and trace.rounds_used == 1
    assert trace.termination == "single_agent"


# --- super-agent initialization ------------------------------------------------


def test_initialization_merges_duplicate_groups():
    agents, _ = make_agents([[0.0, 1.0], [3.0, 4.0], [10.0, 11.0], [20.0]])
    critic = ScriptedBackend(default_response="Unique answers: [A, B, C]\nDuplicate answers: [(1, 2)]")
    supers = initialize_super_agents(agents, "q", Backends(ScriptedBackend(), critic=critic))
    assert len(supers) == 3
    expected = ellipse_oracle({"doc-1": [0.0], "doc-2": [1.0]}, {"doc-3": [3.0], "doc-4": [4.0]})
    assert set(supers[0].doc_ids) == expected == {"doc-2", "doc-3"}
    np.testing.assert_allclose(supers[0].cluster.centroid, [2.0])
    assert supers[0].members == (1, 2)
    assert [s.doc_ids for s in supers[1:]] == [agents[2].doc_ids, agents[3].doc_ids]


def test_initialization_chains_group_left_to_right():
    agents, _ = make_agents([[0.0, 1.0], [3.0, 4.0], [5.0, 9.0]])
    critic = ScriptedBackend(default_response="Unique answers: [A]\nDuplicate answers: [(1, 2, 3)]")
    (sup,) = initialize_super_agents(agents, "q", Backends(ScriptedBackend(), critic=critic))
    first = ellipse_oracle({"doc-1": [0.0], "doc-2": [1.0]}, {"doc-3": [3.0], "doc-4": [4.0]})
    pts = {"doc-1": [0.0], "doc-2": [1.0], "doc-3": [3.0], "doc-4": [4.0]}
    second = ellipse_oracle({d: pts[d] for d in first}, {"doc-5": [5.0], "doc-6": [9.0]})
    assert set(sup.doc_ids) == second


def test_initialization_all_unique_is_identity():
    agents, _ = make_agents([[0.0], [5.0], [9.0]])
    critic = ScriptedBackend(default_response="Unique answers: [A, B, C]\nDuplicate answers: None")
    supers = initialize_super_agents(agents, "q", Backends(ScriptedBackend(), critic=critic))
    assert [s.doc_ids for s in supers] == [a.doc_ids for a in agents]


def test_initialization_summary_fallback():
    from winnowrag.orchestrator import WinnowTrace

    agents, _ = make_agents([[0.0], [5.0], [9.0]])
    critic = critic_script("garbage", "still garbage")
    trace = WinnowTrace("q")
    supers = initialize_super_agents(agents, "q", Backends(ScriptedBackend(), critic=critic), trace=trace)
    assert len(critic.calls) == 2
    assert len(supers) == 3
    assert trace.summary["fallback"] and trace.anomalies


# --- winnowing -------------------------------------------------------------------


def _three_agents():
    agents, docs = make_agents([[0.0, 1.0], [5.0, 6.0], [20.0, 22.0]])
    agent_backend = stage2_agent({"T1": "Paris", "T3": "Paris", "T5": "Lyon"})
    return agents, docs, agent_backend


def test_immediate_conclusion():
    agents, docs, agent = _three_agents()
    critic = critic_script("Incorrect answers: []\nExplanation: ok\nConsistent answer: yes, Paris")
    answer, trace = run_winnowing(agents, "q", WinnowConfig(), Backends(agent, critic=critic), docs)
    assert answer == "Paris"
    assert trace.rounds_used == 1 and trace.termination == "critic"


def test_one_elimination_then_conclusion():
    agents, docs, agent = _three_agents()
    before = {a.agent_id: dict(a.cluster.vectors) for a in agents}
    critic = critic_script(
        "Incorrect answers: [3]\nExplanation: agent three is off\nConsistent answer: no",
        "Incorrect answers: []\nExplanation: fine\nConsistent answer: yes, Paris",
    )
    answer, trace = run_winnowing(agents, "q", WinnowConfig(), Backends(agent, critic=critic), docs)
    assert answer == "Paris" and trace.rounds_used == 2
    merges = [m for r in trace.rounds for m in r.merges]
    assert len(merges) == 1
    (m,) = merges
    assert (m.kind, m.source, m.target) == ("hyperbola", 3, 2)
    expected = hyperbola_oracle(
        {d: v.tolist() for d, v in before[2].items()}, {d: v.tolist() for d, v in before[3].items()}
    )
    assert set(m.kept_doc_ids) == expected
    assert [len(r.agents) for r in trace.rounds] == [3, 2]


def test_forced_termination_picks_largest_cluster():
    agents, docs = make_agents([[0.0], [5.0, 6.0, 7.0], [20.0, 21.0, 22.0]])
    agent = stage2_agent({"T1": "A", "T2": "B", "T5": "C"})
    critic = critic_script("Incorrect answers: []\nExplanation: unsure\nConsistent answer: no")
    answer, trace = run_winnowing(agents, "q", WinnowConfig(max_rounds=3), Backends(agent, critic=critic), docs)
    # agents 2 and 3 tie at three documents; the lower id wins
    assert answer == "B"
    assert trace.rounds_used == 3 and trace.termination == "forced"


def test_all_marked_incorrect_keeps_lowest_id():
    agents, docs, agent = _three_agents()
    critic = critic_script(
        "Incorrect answers: [1, 2, 3]\nExplanation: all wrong\nConsistent answer: no",
    )
    answer, trace = run_winnowing(agents, "q", WinnowConfig(max_rounds=1), Backends(agent, critic=critic), docs)
    assert trace.rounds[0].active_after == [1]
    assert answer == "Paris"
    assert any("every agent incorrect" in a for a in trace.anomalies)


def test_several_incorrect_merge_into_non_incorrect_only():
    agents, docs = make_agents([[0.0, 1.0], [2.0, 3.0], [30.0, 31.0], [60.0]])
    agent = stage2_agent({"T1": "A", "T3": "B", "T5": "C", "T7": "D"})
    critic = critic_script("Incorrect answers: [2, 4]\nExplanation: no\nConsistent answer: no")
    _, trace = run_winnowing(agents, "q", WinnowConfig(max_rounds=1), Backends(agent, critic=critic), docs)
    merges = trace.rounds[0].merges
    assert [(m.source, m.target) for m in merges] == [(2, 1), (4, 3)]


def test_feedback_reaches_next_round_prompts():
    agents, docs, agent = _three_agents()
    critic = critic_script(
        "Incorrect answers: [3]\nExplanation: FEEDBACK-TOKEN-1\nConsistent answer: no",
        "Incorrect answers: []\nExplanation: fine\nConsistent answer: yes, Paris",
    )
    run_winnowing(agents, "q", WinnowConfig(), Backends(agent, critic=critic), docs)
    prompts = [r.user_text for r in agent.requests]
    assert len(prompts) == 5
    assert all("FEEDBACK-TOKEN-1" not in p for p in prompts[:3])
    assert all(FEEDBACK_HEADER in p and "FEEDBACK-TOKEN-1" in p for p in prompts[3:])


def test_agent_parse_failure_retries_then_falls_back():
    agents, docs = make_agents([[0.0], [9.0]])
    agent = CallbackBackend(lambda r: "just some words")
    critic = critic_script("Incorrect answers: []\nExplanation: e\nConsistent answer: yes, words")
    _, trace = run_winnowing(agents, "q", WinnowConfig(), Backends(agent, critic=critic), docs)
    assert len(agent.requests) == 4  # two agents, one retry each
    assert all(t.parse_fallback and t.answer == "just some words" for t in trace.rounds[0].agents)


def test_critic_parse_failure_is_noop_round():
    agents, docs, agent = _three_agents()
    critic = critic_script("???")
    answer, trace = run_winnowing(agents, "q", WinnowConfig(max_rounds=2), Backends(agent, critic=critic), docs)
    assert len(critic.calls) == 4
    assert all(not r.merges for r in trace.rounds)
    assert trace.termination == "forced"


def test_end_to_end_determinism():
    docs = make_docs(30)

    def run():
        agent = CallbackBackend(lambda r: "Answer: x" if STAGE2 in r.user_text else "x")
        critic = critic_script(
            "Unique answers: [x]\nDuplicate answers: None",
            "Incorrect answers: [1]\nExplanation: e\nConsistent answer: no",
        )
        _, trace = answer_query("q", docs, WinnowConfig(k=5, seed=3), Backends(agent, critic, HashEmbedder(8)))
        return trace.to_json()

    assert run() == run()


def test_answer_query_truncates_to_num_docs():
    backends = Backends(ScriptedBackend(default_response="Answer: a"), embedder=HashEmbedder(8))
    _, trace = answer_query("q", make_docs(40), WinnowConfig(num_docs=25, k=25), backends)
    held = {d for t in trace.stage1 for d in t.doc_ids}
    assert held == {f"doc-{i}" for i in range(1, 26)}
    assert trace.config["k"] == 25 and trace.config["num_docs"] == 25


def test_k_above_document_count_is_clamped_with_warning(caplog):
    docs = make_docs(3)
    backends = Backends(ScriptedBackend(default_response="Paris"), embedder=HashEmbedder(8))
    _, trace = answer_query("q?", docs, WinnowConfig(k=10, max_rounds=1, parallelism=1), backends)
    assert len(trace.stage1) == 3
    assert any("clamped to 3" in a for a in trace.anomalies)
    assert "clamped" in caplog.text
