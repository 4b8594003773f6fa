from __future__ import annotations

import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from winnowrag.documents import RetrievedDocument
from winnowrag.errors import InputValidationError, ParseError
from winnowrag.protocol import (
    FEEDBACK_HEADER,
    StructuredResponse,
    parse_critic_verdict,
    parse_structured_response,
    parse_summary_verdict,
    render_judgement_prompt,
    render_stage1_prompt,
    render_stage2_prompt,
    render_summary_prompt,
)

FIXTURES = Path(__file__).parent / "fixtures"
CASES = json.loads((FIXTURES / "parser_cases.json").read_text(encoding="utf-8"))

DOCS = [
    RetrievedDocument("doc-1", "Eiffel Tower", "The tower is in Paris.", rank=1),
    RetrievedDocument("doc-2", "Lyon", "Lyon is a city in France.", rank=2),
]
RESPONSES = [
    StructuredResponse("E1", "X1", "Paris"),
    StructuredResponse("E2", "X2", "Lyon"),
]


def run_case(case):
    if case["parser"] == "structured":
        r = parse_structured_response(case["raw"])
        return {"evidence": r.evidence, "explanation": r.explanation, "answer": r.answer}
    if case["parser"] == "summary":
        v = parse_summary_verdict(case["raw"], case["num_agents"])
        return {"groups": [sorted(g) for g in v.duplicate_groups], "unique_answers": list(v.unique_answers)}
    v = parse_critic_verdict(case["raw"], case["active_ids"])
    return {
        "incorrect": sorted(v.incorrect_agent_ids),
        "conclude": v.conclude,
        "final_answer": v.final_answer,
        "explanation": v.explanation,
    }


def test_fixture_corpus_covers_all_formats():
    formats = {c["format"] for c in CASES}
    assert formats == {"canonical", "markdown", "missing_label", "garbage"}
    assert len(CASES) >= 30


@pytest.mark.parametrize("case", CASES, ids=[c["id"] for c in CASES])
def test_parser_fixture(case):
    if case.get("error"):
        with pytest.raises(ParseError) as info:
            run_case(case)
        assert info.value.raw == case["raw"]
    else:
        assert run_case(case) == case["expect"]


# --- rendering -------------------------------------------------------------


@pytest.mark.parametrize(
    "name, render",
    [
        ("stage1", lambda: render_stage1_prompt("What city is the Eiffel Tower in?", DOCS)),
        ("stage2", lambda: render_stage2_prompt("What city is the Eiffel Tower in?", DOCS)),
        ("stage2_feedback", lambda: render_stage2_prompt("What city is the Eiffel Tower in?", DOCS, "Check doc 2.")),
        ("summary", lambda: render_summary_prompt("What city is the Eiffel Tower in?", ["Paris", "Lyon", "paris"])),
        ("judgement", lambda: render_judgement_prompt("What city is the Eiffel Tower in?", RESPONSES)),
    ],
)
def test_prompts_byte_exact(name, render):
    expected = (FIXTURES / "prompts" / f"{name}.txt").read_bytes()
    assert render().encode("utf-8") == expected


def test_stage1_document_markers():
    p = render_stage1_prompt("q", DOCS)
    assert "Document [1] (Title: Eiffel Tower): The tower is in Paris." in p
    assert "Document [2]" in p
    assert p.index("Document [1]") < p.index("Document [2]") < p.index("answer the following question: q.")
    assert "strictly prohibited from generating the answer based on your own knowledge" in p


def test_stage1_unicode_title_verbatim():
    doc = RetrievedDocument("d", "Zürich – Ørsted 東京", "text")
    assert "(Title: Zürich – Ørsted 東京)" in render_stage1_prompt("q", [doc])


@pytest.mark.parametrize(
    "render",
    [
        lambda: render_stage1_prompt("q", []),
        lambda: render_stage2_prompt("q", []),
        lambda: render_summary_prompt("q", []),
        lambda: render_judgement_prompt("q", RESPONSES[:1]),
        lambda: render_judgement_prompt("q", []),
    ],
)
def test_render_preconditions(render):
    with pytest.raises(InputValidationError):
        render()


def test_stage2_format_markers_and_feedback():
    plain = render_stage2_prompt("q", DOCS)
    for marker in ("Evidence:", "Explanation:", "Answer:"):
        assert marker in plain
    assert FEEDBACK_HEADER not in plain
    fed = render_stage2_prompt("q", DOCS, "F-marker")
    assert fed.index(FEEDBACK_HEADER) < fed.index("F-marker")


def test_summary_and_judgement_listing():
    s = render_summary_prompt("q", ["A", "B"])
    assert "Answer [1]: Answer: A" in s and "Answer [2]: Answer: B" in s
    assert "Unique answers:" in s and "Duplicate answers:" in s
    assert "from 2 agents" in s
    j = render_judgement_prompt("q", RESPONSES)
    assert "Response [2]: Answer: Lyon; Evidence: E2; Explanation: X2" in j
    assert "Incorrect answers:" in j and "Consistent answer:" in j


def test_render_deterministic():
    assert render_stage2_prompt("q", DOCS, "f") == render_stage2_prompt("q", DOCS, "f")


# --- properties --------------------------------------------------------------

_LABEL_WORDS = ("answer", "evidence", "explanation", "rationale")
field_text = (
    st.text(alphabet=st.characters(whitelist_categories=("L", "N", "Zs"), whitelist_characters=".,'-?"), max_size=60)
    .map(lambda s: " ".join(s.split()))
    .filter(lambda s: not any(w in s.lower() for w in _LABEL_WORDS))
)


@settings(max_examples=300, deadline=None)
@given(field_text, field_text, field_text.filter(bool))
def test_round_trip(evidence, explanation, answer):
    resp = StructuredResponse(evidence, explanation, answer)
    back = parse_structured_response(resp.canonical_text())
    assert (back.evidence, back.explanation, back.answer) == (evidence, explanation, answer)


@settings(max_examples=300, deadline=None)
@given(
    st.integers(1, 12),
    st.lists(st.lists(st.integers(-2, 15), min_size=1, max_size=4), max_size=5),
    st.sampled_from(["({})", "[{}]", "Answer {}"]),
)
def test_summary_groups_partition_agents(n, raw_groups, shape):
    body = ", ".join(shape.format(", ".join(map(str, g))) for g in raw_groups) or "None"
    v = parse_summary_verdict(f"Unique answers: [x]\nDuplicate answers: [{body}]", n)
    members = [i for g in v.duplicate_groups for i in g]
    assert sorted(members) == list(range(1, n + 1))
    assert len(v.unique_answers) == len(v.duplicate_groups)


@settings(max_examples=300, deadline=None)
@given(st.sets(st.integers(1, 10), min_size=1), st.lists(st.integers(-5, 30), max_size=8), st.booleans())
def test_critic_ids_within_active(active, named, yes):
    raw = f"Incorrect answers: {named}\nExplanation: e\nConsistent answer: {'yes, Z' if yes else 'no'}"
    v = parse_critic_verdict(raw, active)
    assert v.incorrect_agent_ids <= active
    assert v.conclude == yes
    assert (v.final_answer is not None) == v.conclude
