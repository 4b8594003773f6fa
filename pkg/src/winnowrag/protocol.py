"""Prompt rendering and lenient parsing of agent and critic outputs."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Iterable, Optional, Sequence

from .documents import RetrievedDocument
from .errors import InputValidationError, ParseError

log = logging.getLogger(__name__)

FEEDBACK_HEADER = "Critic feedback from previous round:"


@dataclass(frozen=True)
class StructuredResponse:
    evidence: str
    explanation: str
    answer: str
    raw: str = ""

    def canonical_text(self) -> str:
        return f"Evidence: {self.evidence}\n\nExplanation: {self.explanation}\n\nAnswer: {self.answer}"


@dataclass(frozen=True)
class SummaryVerdict:
    unique_answers: tuple[str, ...]
    # 1-based agent indices, ordered by smallest member
    duplicate_groups: tuple[frozenset[int], ...]
    raw: str = ""


@dataclass(frozen=True)
class CriticVerdict:
    incorrect_agent_ids: frozenset[int]
    explanation: str
    conclude: bool
    final_answer: Optional[str] = None
    raw: str = ""


# --------------------------------------------------------------------------
# rendering


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return resources.files("winnowrag.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")


def _document_block(docs: Sequence[RetrievedDocument]) -> str:
    if not docs:
        raise InputValidationError("at least one document is required")
    return "\n".join(f"Document [{n}] (Title: {d.title}): {d.text}" for n, d in enumerate(docs, 1))


def render_stage1_prompt(query: str, docs: Sequence[RetrievedDocument]) -> str:
    return load_template("stage1_agent").format(documents=_document_block(docs), question=query)


def render_stage2_prompt(
    query: str, docs: Sequence[RetrievedDocument], critic_feedback: Optional[str] = None
) -> str:
    prompt = load_template("stage2_agent").format(documents=_document_block(docs), question=query)
    if critic_feedback:
        prompt = f"{prompt}\n{FEEDBACK_HEADER}\n{critic_feedback}\n"
    return prompt


def render_summary_prompt(query: str, answers: Sequence[str]) -> str:
    if not answers:
        raise InputValidationError("at least one answer is required")
    listing = "\n".join(f"Answer [{n}]: Answer: {a}" for n, a in enumerate(answers, 1))
    return load_template("critic_summary").format(k=len(answers), question=query, answers=listing)


def render_judgement_prompt(query: str, responses: Sequence[StructuredResponse]) -> str:
    if len(responses) < 2:
        raise InputValidationError("judgement needs at least two responses")
    listing = "\n".join(
        f"Response [{n}]: Answer: {r.answer}; Evidence: {r.evidence}; Explanation: {r.explanation}"
        for n, r in enumerate(responses, 1)
    )
    return load_template("critic_judgement").format(k=len(responses), question=query, responses=listing)


# --------------------------------------------------------------------------
# parsing

# A label may be wrapped in markdown emphasis, brackets or a heading marker:
# "Answer:", "**Answer:**", "[Answer]:", "### Answer:" all match.
_DECOR = r"[ \t>#*_\[\-]*"
_TAIL = r"[ \t*_\]]*:[ \t*_]*"


def _label_pattern(labels: Iterable[str]) -> re.Pattern[str]:
    alts = "|".join(labels)
    return re.compile(rf"(?:^|(?<=\s)){_DECOR}(?P<label>{alts}){_TAIL}", re.IGNORECASE | re.MULTILINE)


_RESPONSE_LABELS = _label_pattern([r"final\s+answer", "answer", "evidence", "explanation", "rationale"])
_SUMMARY_LABELS = _label_pattern([r"unique\s+answers?", r"duplicate\s+answers?"])
_CRITIC_LABELS = _label_pattern([r"incorrect\s+answers?", "explanation", r"consistent\s+answer"])


def _sections(text: str, pattern: re.Pattern[str]) -> dict[str, str]:
    """Split ``text`` at label matches. Later occurrences of a label win."""
    out: dict[str, str] = {}
    matches = list(pattern.finditer(text))
    for m, nxt in zip(matches, matches[1:] + [None]):
        end = nxt.start() if nxt else len(text)
        key = re.sub(r"\s+", " ", m.group("label").lower())
        out[key] = text[m.end() : end]
    return out


def _clean(value: str) -> str:
    value = value.strip()
    value = re.sub(r"^[*_]+|[*_]+$", "", value).strip()
    if value.startswith("[") and value.endswith("]") and value.count("[") == 1:
        value = value[1:-1].strip()
    return value


def parse_structured_response(raw: str) -> StructuredResponse:
    sections = _sections(raw, _RESPONSE_LABELS)
    answer_key = "answer" if "answer" in sections else "final answer"
    if answer_key not in sections:
        raise ParseError("no 'Answer:' label found", raw)
    answer = _clean(sections[answer_key])
    if not answer:
        raise ParseError("empty answer", raw)
    explanation = sections.get("explanation", sections.get("rationale", ""))
    return StructuredResponse(
        evidence=_clean(sections.get("evidence", "")),
        explanation=_clean(explanation),
        answer=answer,
        raw=raw,
    )


_NONE_WORDS = re.compile(r"^\W*(none|no duplicates?|n/?a|nil|empty|no)\W*$", re.IGNORECASE)
_GROUP = re.compile(r"[(\[{]([^()\[\]{}]*)[)\]}]")


def _split_list(body: str) -> list[str]:
    body = _clean(body)
    if not body or _NONE_WORDS.match(body):
        return []
    quoted = re.findall(r"\"([^\"]+)\"|'([^']+)'", body)
    if quoted and all(q[0] or q[1] for q in quoted):
        items = [a or b for a, b in quoted]
    elif "\n" in body.strip():
        items = [re.sub(r"^\s*(?:[-*•]|\d+[.)])\s*", "", line) for line in body.splitlines()]
    else:
        items = body.split(",")
    return [i.strip().strip("\"'") for i in items if i.strip().strip("\"'")]


def _index_groups(body: str) -> list[list[int]]:
    body = body.strip()
    if not body or _NONE_WORDS.match(_clean(body)):
        return []
    groups = []
    for segment in re.split(r"[\n;]", body):
        # "(1, 3), (2, 4)" lists several groups; "Answer [1] and Answer [3]" is one
        inner = [re.findall(r"\d+", g) for g in _GROUP.findall(segment)]
        multi = [g for g in inner if len(g) >= 2]
        if multi:
            groups.extend([int(n) for n in g] for g in multi)
        else:
            nums = [int(n) for n in re.findall(r"\d+", segment)]
            if nums:
                groups.append(nums)
    return groups


def parse_summary_verdict(raw: str, num_agents: int) -> SummaryVerdict:
    """Parse the critic's deduplication output into a partition of agents.

    Duplicate pairs and groups are unioned transitively; agents never
    mentioned become singleton groups. Groups are ordered by their smallest
    member and aligned with the listed unique answers; a group without a
    matching listed answer gets an empty string.
    """
    if num_agents < 1:
        raise InputValidationError("num_agents must be >= 1")
    sections = _sections(raw, _SUMMARY_LABELS)
    uniq_key = next((k for k in sections if k.startswith("unique")), None)
    dup_key = next((k for k in sections if k.startswith("duplicate")), None)
    if uniq_key is None and dup_key is None:
        raise ParseError("no 'Unique answers:' or 'Duplicate answers:' section", raw)

    unique = _split_list(sections[uniq_key]) if uniq_key else []
    parent = list(range(num_agents + 1))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    if dup_key:
        body = _clean(sections[dup_key])
        if body and not _NONE_WORDS.match(body) and not re.search(r"\d", body):
            raise ParseError("duplicate section names no agent indices", raw)
        for group in _index_groups(sections[dup_key]):
            valid = [i for i in group if 1 <= i <= num_agents]
            if len(valid) != len(group):
                log.warning("dropping out-of-range agent indices in %s", group)
            for a, b in zip(valid, valid[1:]):
                parent[find(b)] = find(a)

    buckets: dict[int, set[int]] = {}
    for i in range(1, num_agents + 1):
        buckets.setdefault(find(i), set()).add(i)
    groups = tuple(sorted((frozenset(g) for g in buckets.values()), key=min))
    if unique and len(unique) != len(groups):
        log.warning("critic listed %d unique answers for %d groups", len(unique), len(groups))
    aligned = tuple(unique[n] if n < len(unique) else "" for n in range(len(groups)))
    return SummaryVerdict(aligned, groups, raw)


_YES = re.compile(r"^\W*yes\b[\s,.:;\-–]*", re.IGNORECASE)


def parse_critic_verdict(raw: str, active_ids: Iterable[int]) -> CriticVerdict:
    """Parse the critic's judgement. Incorrect ids are clipped to ``active_ids``.

    The verdict concludes only when the consistent-answer section says yes
    and names an answer.
    """
    active = frozenset(active_ids)
    if not active:
        raise InputValidationError("active_ids must be nonempty")
    sections = _sections(raw, _CRITIC_LABELS)
    inc_key = next((k for k in sections if k.startswith("incorrect")), None)
    if inc_key is None and "explanation" not in sections and "consistent answer" not in sections:
        raise ParseError("no critic verdict sections found", raw)

    incorrect: set[int] = set()
    if inc_key:
        body = _clean(sections[inc_key])
        if not _NONE_WORDS.match(body):
            incorrect = {int(n) for n in re.findall(r"\d+", body)}
    dropped = incorrect - active
    if dropped:
        log.warning("critic named inactive response ids %s", sorted(dropped))

    conclude = False
    final = None
    consistent = _clean(sections.get("consistent answer", ""))
    m = _YES.match(consistent)
    if m:
        rest = _clean(consistent[m.end() :])
        rest = re.sub(r"^(?:the\s+)?(?:consistent\s+)?answer\s+is\s*:?\s*", "", rest, flags=re.IGNORECASE)
        rest = rest.strip().rstrip(".").strip()
        if rest:
            conclude, final = True, rest
    return CriticVerdict(
        incorrect_agent_ids=frozenset(incorrect & active),
        explanation=_clean(sections.get("explanation", "")),
        conclude=conclude,
        final_answer=final,
        raw=raw,
    )
