"""Dataset loading, answer metrics, and the evaluation loop."""
from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from .documents import RetrievedDocument
from .errors import DatasetError, SchemaError
from .orchestrator import Backends, WinnowConfig, WinnowTrace, answer_query

log = logging.getLogger(__name__)

RECALL_KS = (5, 20)
METRICS = ("accuracy", "em")


@dataclass(frozen=True)
class QAExample:
    question: str
    gold_answers: tuple[str, ...]
    documents: tuple[RetrievedDocument, ...]
    example_id: Optional[str] = None


def _parse_record(obj: Any, lineno: int, num_docs: Optional[int]) -> QAExample:
    if not isinstance(obj, dict):
        raise SchemaError("record is not a JSON object", lineno)
    for key in ("question", "answers", "ctxs"):
        if key not in obj:
            raise SchemaError(f"missing required field {key!r}", lineno)
    question, answers, ctxs = obj["question"], obj["answers"], obj["ctxs"]
    if not isinstance(question, str) or not question.strip():
        raise SchemaError("'question' must be a nonempty string", lineno)
    if isinstance(answers, str):
        answers = [answers]
    if not isinstance(answers, list) or not answers or not all(isinstance(a, str) for a in answers):
        raise SchemaError("'answers' must be a nonempty list of strings", lineno)
    if not isinstance(ctxs, list) or not ctxs:
        raise SchemaError("'ctxs' must be a nonempty list", lineno)
    if num_docs is not None:
        ctxs = ctxs[:num_docs]
    docs = []
    for rank, ctx in enumerate(ctxs, 1):
        if not isinstance(ctx, dict) or not isinstance(ctx.get("text"), str):
            raise SchemaError(f"ctx {rank} lacks a 'text' string", lineno)
        emb = ctx.get("embedding")
        if emb is not None and (not isinstance(emb, list) or not all(isinstance(v, (int, float)) for v in emb)):
            raise SchemaError(f"ctx {rank} has a non-numeric embedding", lineno)
        docs.append(RetrievedDocument.from_ctx(ctx, rank))
    ex_id = obj.get("id")
    return QAExample(question, tuple(answers), tuple(docs), str(ex_id) if ex_id is not None else None)


def load_dataset(path: str | Path, num_docs: Optional[int] = 50) -> list[QAExample]:
    """Read one ``{question, answers, ctxs}`` object per line.

    Only the top ``num_docs`` contexts (in file order) are kept; pass ``None``
    to keep all. Blank lines are skipped.
    """
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON: {exc.msg}", lineno) from exc
            examples.append(_parse_record(obj, lineno, num_docs))
    return examples


_PUNCT = re.compile(r"[.,!?;:'\"()\[\]]")


def normalize_answer(text: str) -> str:
    """Lowercase, drop the characters ``.,!?;:'"()[]`` and collapse whitespace."""
    return " ".join(_PUNCT.sub("", text.lower()).split())


def accuracy_match(final_answer: str, gold_answers: Sequence[str]) -> bool:
    pred = normalize_answer(final_answer)
    return any((g := normalize_answer(a)) and g in pred for a in gold_answers)


def exact_match(final_answer: str, gold_answers: Sequence[str]) -> bool:
    pred = normalize_answer(final_answer)
    return bool(pred) and any(pred == normalize_answer(a) for a in gold_answers)


def recall_at_k(example: QAExample, k: int) -> bool:
    """Whether any gold answer occurs in one of the top ``k`` documents."""
    if k < 1:
        raise ValueError("k must be >= 1")
    for doc in example.documents[:k]:
        text = normalize_answer(doc.text)
        if any((g := normalize_answer(a)) and g in text for a in example.gold_answers):
            return True
    return False


def recall_report(examples: Sequence[QAExample], ks: Sequence[int] = RECALL_KS) -> dict[int, float]:
    if not examples:
        return {k: 0.0 for k in ks}
    for k in ks:
        short = sum(1 for ex in examples if len(ex.documents) < k)
        if short:
            log.warning("recall@%d: %d example(s) have fewer than %d documents; using all available", k, short, k)
    return {k: sum(recall_at_k(ex, k) for ex in examples) / len(examples) for k in ks}


@dataclass
class ExampleResult:
    question: str
    final_answer: str
    correct: bool
    rounds_used: int
    error: Optional[str] = None
    trace: Optional[WinnowTrace] = field(default=None, repr=False)


@dataclass
class EvalReport:
    per_example: list[ExampleResult]
    accuracy: float
    recall_at: dict[int, float]
    metric: str = "accuracy"

    @property
    def mean_rounds_used(self) -> float:
        if not self.per_example:
            return 0.0
        return sum(r.rounds_used for r in self.per_example) / len(self.per_example)

    def to_dict(self, include_traces: bool = False) -> dict[str, Any]:
        rows = []
        for r in self.per_example:
            row: dict[str, Any] = {
                "question": r.question,
                "final_answer": r.final_answer,
                "correct": r.correct,
                "rounds_used": r.rounds_used,
                "error": r.error,
            }
            if include_traces and r.trace is not None:
                row["trace"] = r.trace.to_dict()
            rows.append(row)
        return {
            "metric": self.metric,
            "score": self.accuracy,
            "accuracy": self.accuracy,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "mean_rounds_used": self.mean_rounds_used,
            "num_examples": len(self.per_example),
            "per_example": rows,
        }

    def summary_table(self) -> str:
        label = "exact match" if self.metric == "em" else "accuracy"
        lines = [
            f"{'examples':<16}{len(self.per_example):>10d}",
            f"{label:<16}{self.accuracy:>10.4f}",
        ]
        lines += [f"{f'recall@{k}':<16}{v:>10.4f}" for k, v in sorted(self.recall_at.items())]
        lines.append(f"{'mean rounds':<16}{self.mean_rounds_used:>10.4f}")
        errors = sum(1 for r in self.per_example if r.error)
        if errors:
            lines.append(f"{'errors':<16}{errors:>10d}")
        return "\n".join(lines)


def evaluate(
    dataset: Sequence[QAExample],
    cfg: WinnowConfig,
    backends: Backends,
    *,
    metric: str = "accuracy",
    parallelism: int = 1,
    recall_ks: Sequence[int] = RECALL_KS,
) -> EvalReport:
    """Answer every example and score it. Failures count as incorrect."""
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    scorer = exact_match if metric == "em" else accuracy_match

    def run(ex: QAExample) -> ExampleResult:
        try:
            answer, trace = answer_query(ex.question, ex.documents, cfg, backends)
        except Exception as exc:  # a failed example must not sink the report
            log.error("example %r failed: %s", ex.question, exc)
            return ExampleResult(ex.question, "", False, 0, error=f"{type(exc).__name__}: {exc}")
        return ExampleResult(ex.question, answer, scorer(answer, ex.gold_answers), trace.rounds_used, trace=trace)

    if parallelism > 1 and len(dataset) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(run, dataset))
    else:
        results = [run(ex) for ex in dataset]
    acc = sum(r.correct for r in results) / len(results) if results else 0.0
    return EvalReport(results, acc, recall_report(dataset, recall_ks), metric)
