"""Per-query pipeline: cluster, answer, merge duplicates, then winnow.

The state machine for one query is single-threaded. Only the agent calls
inside a step fan out, and they are joined before the critic runs.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Optional, Sequence, TypeVar

from .agents import AgentState
from .clustering import DEFAULT_K, assign_agents, kmeans_cluster
from .documents import RetrievedDocument, check_unique_ids
from .embedding import DEFAULT_BATCH_SIZE, Embedder, embed_documents
from .errors import InputValidationError, ParseError
from .geometry import ellipse_merge, hyperbola_merge, nearest_remaining_cluster
from .llm import DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE, ChatBackend, ChatRequest
from .protocol import (
    CriticVerdict,
    StructuredResponse,
    SummaryVerdict,
    parse_critic_verdict,
    parse_structured_response,
    parse_summary_verdict,
    render_judgement_prompt,
    render_stage1_prompt,
    render_stage2_prompt,
    render_summary_prompt,
)

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


@dataclass
class WinnowConfig:
    k: int = DEFAULT_K
    max_rounds: int = 3
    num_docs: int = 50
    seed: int = 0
    trust_precomputed_embeddings: bool = True
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    agent_model: str = ""
    critic_model: str = ""
    # concurrent agent calls within one step
    parallelism: int = 8
    embed_batch_size: int = DEFAULT_BATCH_SIZE
    debug_trace: bool = False

    def __post_init__(self) -> None:
        for name in ("k", "max_rounds", "num_docs", "parallelism", "embed_batch_size"):
            if getattr(self, name) < 1:
                raise InputValidationError(f"{name} must be >= 1")


@dataclass
class Backends:
    agent: ChatBackend
    critic: Optional[ChatBackend] = None
    embedder: Optional[Embedder] = None

    @property
    def critic_backend(self) -> ChatBackend:
        return self.critic if self.critic is not None else self.agent


@dataclass
class MergeEvent:
    kind: str  # "ellipse" | "hyperbola"
    source: int
    target: int
    source_docs: int
    target_docs: int
    kept_docs: int
    kept_doc_ids: list[str]
    thresholds: dict[str, float]
    fallback: bool = False


@dataclass
class AgentTurn:
    agent_id: int
    doc_ids: list[str]
    answer: str
    evidence: str = ""
    explanation: str = ""
    parse_fallback: bool = False
    prompt: Optional[str] = None
    raw: Optional[str] = None


@dataclass
class RoundRecord:
    round: int
    agents: list[AgentTurn]
    verdict: Optional[dict[str, Any]] = None
    merges: list[MergeEvent] = field(default_factory=list)
    active_after: list[int] = field(default_factory=list)


@dataclass
class WinnowTrace:
    query: str
    config: dict[str, Any] = field(default_factory=dict)
    stage1: list[AgentTurn] = field(default_factory=list)
    summary: Optional[dict[str, Any]] = None
    super_agents: list[dict[str, Any]] = field(default_factory=list)
    init_merges: list[MergeEvent] = field(default_factory=list)
    rounds: list[RoundRecord] = field(default_factory=list)
    final_answer: str = ""
    rounds_used: int = 0
    termination: str = ""
    anomalies: list[str] = field(default_factory=list)

    @property
    def stage1_answers(self) -> list[str]:
        return [t.answer for t in self.stage1]

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self, **kwargs: Any) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False, **kwargs)


# --------------------------------------------------------------------------
# helpers


def _fan_out(fn: Callable[[T], R], items: Sequence[T], parallelism: int) -> list[R]:
    if len(items) <= 1 or parallelism <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(parallelism, len(items))) as pool:
        return list(pool.map(fn, items))


def _ask(backend: ChatBackend, prompt: str, cfg: WinnowConfig, model: str) -> str:
    req = ChatRequest(user_text=prompt, temperature=cfg.temperature, max_tokens=cfg.max_tokens, model_name=model)
    return backend.complete(req).text


def _docs_for(agent: AgentState, lookup: dict[str, RetrievedDocument]) -> list[RetrievedDocument]:
    return sorted((lookup[d] for d in agent.doc_ids), key=lambda d: (d.rank, d.doc_id))


def _merge_event(kind: str, source: AgentState, target: AgentState, result: Any) -> MergeEvent:
    return MergeEvent(
        kind=kind,
        source=source.agent_id,
        target=target.agent_id,
        source_docs=len(source.cluster),
        target_docs=len(target.cluster),
        kept_docs=len(result.kept_doc_ids),
        kept_doc_ids=list(result.kept_doc_ids),
        thresholds=dict(result.thresholds),
        fallback=result.fallback,
    )


# --------------------------------------------------------------------------
# stages


def run_stage1(
    query: str,
    docs: Sequence[RetrievedDocument],
    cfg: WinnowConfig,
    backends: Backends,
    trace: Optional[WinnowTrace] = None,
) -> list[AgentState]:
    """Embed, cluster and ask each cluster's agent for a direct answer."""
    if not docs:
        raise InputValidationError("docs must be nonempty")
    if not query or not query.strip():
        raise InputValidationError("query must be nonempty")
    check_unique_ids(docs)
    vectors = embed_documents(
        query,
        docs,
        backends.embedder,
        trust_precomputed=cfg.trust_precomputed_embeddings,
        batch_size=cfg.embed_batch_size,
    )
    assignment = kmeans_cluster(vectors, min(cfg.k, len(docs)), seed=cfg.seed)
    if assignment.k_effective < cfg.k:
        note = f"k={cfg.k} clamped to {assignment.k_effective} ({len(docs)} documents)"
        log.warning(note)
        if trace is not None:
            trace.anomalies.append(note)
    agents = assign_agents(assignment, docs, vectors)
    lookup = {d.doc_id: d for d in docs}

    def answer(agent: AgentState) -> tuple[str, str]:
        prompt = render_stage1_prompt(query, _docs_for(agent, lookup))
        return prompt, _ask(backends.agent, prompt, cfg, cfg.agent_model)

    for agent, (prompt, raw) in zip(agents, _fan_out(answer, agents, cfg.parallelism)):
        text = raw.strip()
        agent.last_response = StructuredResponse("", "", text, raw)
        if trace is not None:
            trace.stage1.append(
                AgentTurn(
                    agent.agent_id,
                    list(agent.doc_ids),
                    text,
                    prompt=prompt if cfg.debug_trace else None,
                    raw=raw if cfg.debug_trace else None,
                )
            )
    return agents


def _summarize(
    agents: Sequence[AgentState], query: str, cfg: WinnowConfig, backends: Backends, trace: Optional[WinnowTrace]
) -> Optional[SummaryVerdict]:
    prompt = render_summary_prompt(query, [a.answer for a in agents])
    raw = ""
    for attempt in (1, 2):
        raw = _ask(backends.critic_backend, prompt, cfg, cfg.critic_model or cfg.agent_model)
        try:
            verdict = parse_summary_verdict(raw, len(agents))
        except ParseError as exc:
            log.warning("summary parse failed (attempt %d): %s", attempt, exc)
            continue
        if trace is not None:
            trace.summary = {
                "unique_answers": list(verdict.unique_answers),
                "groups": [sorted(g) for g in verdict.duplicate_groups],
                "fallback": False,
                "raw": raw if cfg.debug_trace else None,
                "prompt": prompt if cfg.debug_trace else None,
            }
        return verdict
    if trace is not None:
        trace.anomalies.append("summary unparseable after retry; every agent kept as its own super-agent")
        trace.summary = {
            "unique_answers": [a.answer for a in agents],
            "groups": [[n] for n in range(1, len(agents) + 1)],
            "fallback": True,
            "raw": raw if cfg.debug_trace else None,
            "prompt": prompt if cfg.debug_trace else None,
        }
    return None


def initialize_super_agents(
    agents: Sequence[AgentState],
    query: str,
    backends: Backends,
    cfg: Optional[WinnowConfig] = None,
    trace: Optional[WinnowTrace] = None,
) -> list[AgentState]:
    """Merge agents the critic judged to give duplicate answers.

    Within a duplicate group, members are folded left to right with the
    ellipse rule; each merge result is an operand of the next. Super-agents
    are renumbered 1.. in group order.
    """
    if not agents:
        raise InputValidationError("at least one agent is required")
    cfg = cfg or WinnowConfig()
    if len(agents) == 1:
        groups: list[list[int]] = [[1]]
    else:
        verdict = _summarize(agents, query, cfg, backends, trace)
        if verdict is None:
            groups = [[n] for n in range(1, len(agents) + 1)]
        else:
            groups = [sorted(g) for g in verdict.duplicate_groups]

    supers: list[AgentState] = []
    for new_id, group in enumerate(groups, 1):
        first = agents[group[0] - 1]
        merged = AgentState(new_id, first.cluster, first.last_response, None, tuple(first.members))
        for pos in group[1:]:
            other = agents[pos - 1]
            result = ellipse_merge(merged.cluster, other.cluster)
            if trace is not None:
                event = _merge_event("ellipse", other, merged, result)
                event.target = merged.members[0]
                trace.init_merges.append(event)
            merged.cluster = result.to_cluster(merged.cluster, other.cluster)
            merged.members = merged.members + tuple(other.members)
        supers.append(merged)
    if trace is not None:
        trace.super_agents = [
            {"agent_id": s.agent_id, "members": list(s.members), "doc_ids": list(s.doc_ids)} for s in supers
        ]
    return supers


def _agent_turn(
    agent: AgentState, query: str, cfg: WinnowConfig, backends: Backends, lookup: dict[str, RetrievedDocument]
) -> tuple[StructuredResponse, bool, str, str]:
    prompt = render_stage2_prompt(query, _docs_for(agent, lookup), agent.feedback)
    raw = ""
    for _ in (1, 2):
        raw = _ask(backends.agent, prompt, cfg, cfg.agent_model)
        try:
            return parse_structured_response(raw), False, prompt, raw
        except ParseError:
            continue
    return StructuredResponse("", "", raw.strip(), raw), True, prompt, raw


def _judge(
    responses: Sequence[StructuredResponse], query: str, cfg: WinnowConfig, backends: Backends
) -> tuple[CriticVerdict, bool, str, str]:
    prompt = render_judgement_prompt(query, responses)
    active = set(range(1, len(responses) + 1))
    raw = ""
    for _ in (1, 2):
        raw = _ask(backends.critic_backend, prompt, cfg, cfg.critic_model or cfg.agent_model)
        try:
            return parse_critic_verdict(raw, active), False, prompt, raw
        except ParseError:
            continue
    return CriticVerdict(frozenset(), "", False, None, raw), True, prompt, raw


def _largest(agents: Sequence[AgentState]) -> AgentState:
    return min(agents, key=lambda a: (-len(a.cluster), a.agent_id))


def run_winnowing(
    super_agents: Sequence[AgentState],
    query: str,
    cfg: WinnowConfig,
    backends: Backends,
    docs: Sequence[RetrievedDocument],
    trace: Optional[WinnowTrace] = None,
) -> tuple[str, WinnowTrace]:
    """Up to ``cfg.max_rounds`` rounds of argue, judge, and fold.

    Incorrect agents are folded, in ascending id order, into the nearest
    agent not judged incorrect this round (distances from start-of-round
    centroids). If the critic never concludes, the agent holding the most
    documents answers (ties go to the lowest id).
    """
    if not super_agents:
        raise InputValidationError("at least one super-agent is required")
    trace = trace if trace is not None else WinnowTrace(query)
    lookup = {d.doc_id: d for d in docs}
    active = list(super_agents)

    for rnd in range(1, cfg.max_rounds + 1):
        turns = _fan_out(lambda a: _agent_turn(a, query, cfg, backends, lookup), active, cfg.parallelism)
        record = RoundRecord(rnd, [])
        for agent, (resp, fell_back, prompt, raw) in zip(active, turns):
            agent.last_response = resp
            record.agents.append(
                AgentTurn(
                    agent.agent_id,
                    list(agent.doc_ids),
                    resp.answer,
                    resp.evidence,
                    resp.explanation,
                    fell_back,
                    prompt if cfg.debug_trace else None,
                    raw if cfg.debug_trace else None,
                )
            )
        trace.rounds.append(record)
        trace.rounds_used = rnd

        if len(active) == 1:
            record.active_after = [active[0].agent_id]
            return _finish(trace, active[0].answer, "single_agent")

        verdict, fell_back, prompt, raw = _judge([a.last_response for a in active], query, cfg, backends)
        if fell_back:
            trace.anomalies.append(f"round {rnd}: critic verdict unparseable after retry; treated as no-op")
        incorrect = sorted(active[p - 1].agent_id for p in verdict.incorrect_agent_ids)
        record.verdict = {
            "incorrect_positions": sorted(verdict.incorrect_agent_ids),
            "incorrect_agent_ids": incorrect,
            "explanation": verdict.explanation,
            "conclude": verdict.conclude,
            "final_answer": verdict.final_answer,
            "fallback": fell_back,
            "prompt": prompt if cfg.debug_trace else None,
            "raw": raw if cfg.debug_trace else None,
        }
        if verdict.conclude and verdict.final_answer:
            record.active_after = [a.agent_id for a in active]
            return _finish(trace, verdict.final_answer, "critic")

        if len(incorrect) == len(active):
            spared = min(incorrect)
            incorrect.remove(spared)
            trace.anomalies.append(f"round {rnd}: critic marked every agent incorrect; kept agent {spared}")

        remaining = [a for a in active if a.agent_id not in incorrect]
        by_id = {a.agent_id: a for a in active}
        targets = {
            j: remaining[nearest_remaining_cluster(by_id[j].cluster, [r.cluster for r in remaining])]
            for j in incorrect
        }
        for j in incorrect:
            src, tgt = by_id[j], targets[j]
            result = hyperbola_merge(tgt.cluster, src.cluster)
            record.merges.append(_merge_event("hyperbola", src, tgt, result))
            tgt.cluster = result.to_cluster(tgt.cluster, src.cluster)
            tgt.members = tgt.members + src.members
        feedback = verdict.explanation or None
        for a in remaining:
            a.feedback = feedback
        active = remaining
        record.active_after = [a.agent_id for a in active]

        if len(active) == 1:
            return _finish(trace, active[0].answer, "single_agent")

    return _finish(trace, _largest(active).answer, "forced")


def _finish(trace: WinnowTrace, answer: str, how: str) -> tuple[str, WinnowTrace]:
    trace.final_answer = answer
    trace.termination = how
    return answer, trace


def answer_query(
    query: str,
    docs: Sequence[RetrievedDocument],
    cfg: Optional[WinnowConfig] = None,
    backends: Optional[Backends] = None,
) -> tuple[str, WinnowTrace]:
    """Run the full pipeline on the top ``cfg.num_docs`` documents."""
    if backends is None:
        raise InputValidationError("backends are required")
    cfg = cfg or WinnowConfig()
    docs = list(docs)[: cfg.num_docs]
    trace = WinnowTrace(query, config=_config_view(cfg))
    agents = run_stage1(query, docs, cfg, backends, trace)
    supers = initialize_super_agents(agents, query, backends, cfg, trace)
    return run_winnowing(supers, query, cfg, backends, docs, trace)


def _config_view(cfg: WinnowConfig) -> dict[str, Any]:
    view = asdict(cfg)
    view.pop("parallelism")
    return view
