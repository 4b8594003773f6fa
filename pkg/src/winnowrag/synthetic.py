"""Planted-answer datasets and protocol-aware scripted models.

Each synthetic example has a few tight, well-separated groups of documents in
embedding space. Every document of a group states the same claim
("The answer is X."), and at most one group's claim is the gold answer. The
scripted agent answers with the majority claim of the documents it is shown;
the scripted critic knows the gold answer and follows a fixed policy. All of
it is deterministic and offline.
"""
from __future__ import annotations

import hashlib
import random
import re
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .documents import RetrievedDocument
from .evaluation import QAExample
from .llm import CallbackBackend, ChatRequest

CLAIM = re.compile(r"The answer is ([^.\n]+)\.")
_DOC_END = "Based on the provided information"

# critic policies
ELIMINATE_ONE = "eliminate_one"  # mark the first wrong response; conclude once all agree with gold
SILENT = "silent"  # never marks anyone, never concludes
CONCLUDE = "conclude"  # concludes with the gold answer immediately
GARBAGE = "garbage"  # unparseable output every time


@dataclass(frozen=True)
class PlantedSpec:
    question: str
    gold: str
    # (claim, number of documents) per group, in first-appearance order
    groups: tuple[tuple[str, int], ...]
    critic: str = ELIMINATE_ONE


def build_example(spec: PlantedSpec, *, dim: int = 8, separation: float = 10.0, spread: float = 0.05,
                  seed: int = 0) -> QAExample:
    """Documents are interleaved round-robin across groups, so agent ``g+1``
    (by first appearance) holds group ``g``."""
    if len(spec.groups) > dim:
        raise ValueError("need dim >= number of groups")
    rng = np.random.default_rng(seed)
    queues = []
    for g, (claim, size) in enumerate(spec.groups):
        center = np.zeros(dim)
        center[g] = separation
        queues.append([(claim, center + spread * rng.standard_normal(dim)) for _ in range(size)])
    order = []
    while any(queues):
        for q in queues:
            if q:
                order.append(q.pop(0))
    docs = tuple(
        RetrievedDocument(
            doc_id=f"doc-{rank}",
            title=f"Passage {rank}",
            text=f"Passage {rank} discusses {spec.question} The answer is {claim}.",
            rank=rank,
            embedding=tuple(float(x) for x in vec),
        )
        for rank, (claim, vec) in enumerate(order, 1)
    )
    return QAExample(spec.question, (spec.gold,), docs)


def majority_claim(prompt: str) -> Optional[str]:
    claims = CLAIM.findall(prompt.split(_DOC_END, 1)[0])
    if not claims:
        return None
    # Counter keeps first-seen order among equal counts
    return Counter(claims).most_common(1)[0][0]


def planted_agent(request: ChatRequest) -> str:
    text = request.user_text
    claim = majority_claim(text) or "unknown"
    if "Evidence: [YOUR EVIDENCE]" in text:
        return (
            f"Evidence: The documents state that it is {claim}.\n\n"
            f"Explanation: Most passages agree on {claim}.\n\n"
            f"Answer: {claim}"
        )
    return claim


_SUMMARY_Q = re.compile(r"agents to the question: (.*)\.\n")
_JUDGE_Q = re.compile(r"agents to the question: (.*)\. Each response contains")
_ANSWER_LINE = re.compile(r"^Answer \[(\d+)\]: Answer: (.*)$", re.MULTILINE)
_RESPONSE_LINE = re.compile(r"^Response \[(\d+)\]: Answer: (.*?); Evidence:", re.MULTILINE)


def summarize_answers(answers: Sequence[str]) -> str:
    groups: dict[str, list[int]] = {}
    for n, a in enumerate(answers, 1):
        groups.setdefault(a.strip().lower(), []).append(n)
    unique = [answers[g[0] - 1] for g in groups.values()]
    dups = [g for g in groups.values() if len(g) > 1]
    dup_text = "[" + ", ".join("(" + ", ".join(map(str, g)) + ")" for g in dups) + "]" if dups else "None"
    return f"Unique answers: [{', '.join(unique)}]\n\nDuplicate answers: {dup_text}"


class PlantedCritic:
    """Critic that judges against a known gold answer per question."""

    def __init__(self, specs: Mapping[str, PlantedSpec]) -> None:
        self.specs = dict(specs)

    def __call__(self, request: ChatRequest) -> str:
        text = request.user_text
        if "remove duplicates" in text:
            return summarize_answers([a for _, a in _ANSWER_LINE.findall(text)])
        m = _JUDGE_Q.search(text)
        spec = self.specs[m.group(1)] if m else None
        policy = spec.critic if spec else SILENT
        if policy == GARBAGE:
            return "I cannot decide."
        if policy == SILENT:
            return "Incorrect answers: []\n\nExplanation: The evidence is inconclusive.\n\nConsistent answer: no"
        if policy == CONCLUDE:
            return f"Incorrect answers: []\n\nExplanation: Consistent.\n\nConsistent answer: yes, {spec.gold}"
        responses = [(int(n), a.strip()) for n, a in _RESPONSE_LINE.findall(text)]
        wrong = [n for n, a in responses if a.lower() != spec.gold.lower()]
        if not wrong:
            return (
                "Incorrect answers: []\n\nExplanation: All responses agree.\n\n"
                f"Consistent answer: yes, {spec.gold}"
            )
        return (
            f"Incorrect answers: [{wrong[0]}]\n\n"
            f"Explanation: Response {wrong[0]} conflicts with the stronger evidence.\n\n"
            "Consistent answer: no"
        )


def planted_backends(specs: Sequence[PlantedSpec]) -> tuple[CallbackBackend, CallbackBackend]:
    """(agent backend, critic backend) for a set of planted examples."""
    return CallbackBackend(planted_agent), CallbackBackend(PlantedCritic({s.question: s for s in specs}))


_WORDS = (
    "amber", "basalt", "cobalt", "dune", "ember", "fjord", "garnet", "harbor", "indigo", "juniper",
    "krypton", "lagoon", "meadow", "nimbus", "onyx", "prairie", "quartz", "rowan", "sierra", "tundra",
)


def depth_benchmark(n_examples: int = 40, seed: int = 0) -> list[PlantedSpec]:
    """Examples with 1-4 wrong groups, each wrong group larger than the gold one.

    With the eliminate-one critic, ``w`` wrong groups need ``w`` rounds to
    reach the gold answer; stopping early falls back to the largest agent,
    which is wrong by construction.
    """
    rng = random.Random(seed)
    specs = []
    for i in range(n_examples):
        w = 1 + i % 4
        words = rng.sample(_WORDS, w + 1)
        gold = words[0]
        gold_size = rng.randint(2, 4)
        groups = [(gold, gold_size)] + [(words[j], gold_size + rng.randint(1, 4)) for j in range(1, w + 1)]
        rng.shuffle(groups)
        specs.append(PlantedSpec(f"Which word is planted in example {i}?", gold, tuple(groups)))
    return specs


class RandomCritic:
    """Critic with seeded random verdicts, keyed on the prompt text.

    Covers every branch of the protocol: random incorrect sets (including
    all agents and out-of-range ids), random conclusions, unparseable output.
    """

    def __init__(self, seed: int, p_garbage: float = 0.1, p_conclude: float = 0.2) -> None:
        self.seed = seed
        self.p_garbage = p_garbage
        self.p_conclude = p_conclude

    def _rng(self, text: str) -> random.Random:
        h = hashlib.sha256(f"{self.seed}:{text}".encode()).digest()
        return random.Random(int.from_bytes(h[:8], "little"))

    def __call__(self, request: ChatRequest) -> str:
        text = request.user_text
        rng = self._rng(text)
        if rng.random() < self.p_garbage:
            return "no verdict today"
        if "remove duplicates" in text:
            answers = [a for _, a in _ANSWER_LINE.findall(text)]
            return summarize_answers(answers)
        n = len(_RESPONSE_LINE.findall(text))
        ids = [i for i in range(1, n + 2) if rng.random() < 0.4]
        explanation = f"critique-{rng.randrange(10**6)}"
        if rng.random() < self.p_conclude:
            return f"Incorrect answers: {ids}\nExplanation: {explanation}\nConsistent answer: yes, final-{n}"
        return f"Incorrect answers: {ids}\nExplanation: {explanation}\nConsistent answer: no"


class RandomAgent:
    """Agent answering the majority claim, occasionally with unlabeled text."""

    def __init__(self, seed: int, p_garbage: float = 0.1) -> None:
        self.seed = seed
        self.p_garbage = p_garbage

    def __call__(self, request: ChatRequest) -> str:
        h = hashlib.sha256(f"{self.seed}:{request.user_text}".encode()).digest()
        if random.Random(int.from_bytes(h[:8], "little")).random() < self.p_garbage:
            return "I am not sure about this one"
        return planted_agent(request)
