"""Multi-agent winnowing over large retrieved-document sets."""
from .agents import AgentState
from .clustering import ClusterAssignment, assign_agents, kmeans_cluster
from .documents import RetrievedDocument
from .embedding import HashEmbedder, HttpEmbedder, embed_documents, render_embedding_prompt
from .evaluation import (
    EvalReport,
    QAExample,
    accuracy_match,
    evaluate,
    exact_match,
    load_dataset,
    recall_at_k,
)
from .geometry import (
    DocumentCluster,
    MergeResult,
    ellipse_merge,
    euclidean_distance,
    hyperbola_merge,
    nearest_remaining_cluster,
)
from .llm import CallbackBackend, ChatRequest, ChatResponse, HttpChatBackend, ScriptedBackend
from .orchestrator import (
    Backends,
    WinnowConfig,
    WinnowTrace,
    answer_query,
    initialize_super_agents,
    run_stage1,
    run_winnowing,
)
from .protocol import (
    CriticVerdict,
    StructuredResponse,
    SummaryVerdict,
    parse_critic_verdict,
    parse_structured_response,
    parse_summary_verdict,
)

__version__ = "0.1.0"
