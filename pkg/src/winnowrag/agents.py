"""Mutable per-agent state carried through both stages."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .geometry import DocumentCluster
from .protocol import StructuredResponse


@dataclass
class AgentState:
    agent_id: int
    cluster: DocumentCluster
    last_response: Optional[StructuredResponse] = None
    feedback: Optional[str] = None
    # Stage I agent ids folded into this (super-)agent
    members: tuple[int, ...] = ()

    @property
    def doc_ids(self) -> tuple[str, ...]:
        return self.cluster.doc_ids

    @property
    def answer(self) -> str:
        return self.last_response.answer if self.last_response else ""
