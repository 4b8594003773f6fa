"""Core document record passed between every stage."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Sequence


@dataclass(frozen=True)
class RetrievedDocument:
    """One retrieved passage.

    ``doc_id`` must be unique within a query; ``rank`` is 1-based retrieval
    order. ``embedding`` is an optional precomputed vector.
    """

    doc_id: str
    title: str
    text: str
    rank: int = 0
    embedding: Optional[tuple[float, ...]] = field(default=None, compare=False)
    source_id: Optional[str] = None

    @classmethod
    def from_ctx(cls, ctx: dict[str, Any], rank: int) -> "RetrievedDocument":
        emb = ctx.get("embedding")
        return cls(
            doc_id=f"doc-{rank}",
            title=str(ctx.get("title") or ""),
            text=str(ctx["text"]),
            rank=rank,
            embedding=tuple(float(v) for v in emb) if emb is not None else None,
            source_id=str(ctx["id"]) if ctx.get("id") is not None else None,
        )


def check_unique_ids(docs: Sequence[RetrievedDocument]) -> None:
    from .errors import InputValidationError

    seen: set[str] = set()
    for d in docs:
        if d.doc_id in seen:
            raise InputValidationError(f"duplicate document id {d.doc_id!r}")
        seen.add(d.doc_id)
