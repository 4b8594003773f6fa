"""Command-line entry points: ``answer``, ``eval`` and ``recall``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from .config import RunConfig, build_config
from .documents import RetrievedDocument
from .embedding import HashEmbedder, HttpEmbedder
from .errors import ConfigurationError, DatasetError, InputValidationError, WinnowError
from .evaluation import EvalReport, evaluate, load_dataset, recall_report
from .llm import HttpChatBackend, ScriptedBackend
from .orchestrator import Backends, answer_query

log = logging.getLogger("winnowrag")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def make_backends(cfg: RunConfig) -> Backends:
    if cfg.backend == "scripted":
        try:
            agent = ScriptedBackend.from_file(cfg.script)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigurationError(f"cannot load script {cfg.script}: {exc}") from exc
        critic = agent
    else:
        key = cfg.api_key()
        agent = HttpChatBackend(cfg.base_url, cfg.model, key, max_concurrency=cfg.parallelism)
        critic = agent
        if cfg.critic_base_url:
            critic = HttpChatBackend(
                cfg.critic_base_url, cfg.critic_model or cfg.model, key, max_concurrency=cfg.parallelism
            )
    if cfg.embedder == "hash":
        embedder = HashEmbedder(cfg.embedding_dim)
    else:
        embedder = HttpEmbedder(cfg.base_url, cfg.embedding_model, cfg.api_key())
    return Backends(agent=agent, critic=critic, embedder=embedder)


def _add_common(p: argparse.ArgumentParser, *, pipeline: bool = True) -> None:
    p.add_argument("--config", help="JSON config file (keys are RunConfig fields)")
    p.add_argument("--num-docs", dest="num_docs", type=int, help="top-N retrieved documents to keep (default 50)")
    p.add_argument("--output", help="write the JSON result here")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    if not pipeline:
        return
    p.add_argument("--k", type=int, help="number of clusters / Stage I agents (default 10)")
    p.add_argument("--max-rounds", dest="max_rounds", type=int, help="maximum winnowing rounds (default 3)")
    p.add_argument("--seed", type=int, help="k-means seed (default 0)")
    p.add_argument(
        "--trust-precomputed",
        dest="trust_precomputed_embeddings",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="use embeddings shipped in the data instead of re-embedding (default on)",
    )
    p.add_argument("--temperature", type=float, help="sampling temperature (default 0)")
    p.add_argument("--max-tokens", dest="max_tokens", type=int, help="completion token cap (default 4096)")
    p.add_argument("--backend", choices=["http", "scripted"], help="chat backend (default http)")
    p.add_argument("--base-url", dest="base_url", help="chat-completions base URL, e.g. http://host:8000/v1")
    p.add_argument("--model", help="agent model name")
    p.add_argument("--critic-model", dest="critic_model", help="critic model name (default: agent model)")
    p.add_argument("--critic-base-url", dest="critic_base_url", help="separate endpoint for the critic")
    p.add_argument("--api-key-env", dest="api_key_env", help="environment variable holding the API key")
    p.add_argument("--script", help="scripted-backend response file (JSON)")
    p.add_argument("--embedder", choices=["hash", "http"], help="document embedder (default hash)")
    p.add_argument("--embedding-model", dest="embedding_model", help="model for the http embedder")
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int, help="hash embedder dimension (default 64)")
    p.add_argument("--parallelism", type=int, help="max concurrent requests (default 8)")
    p.add_argument(
        "--debug-trace",
        dest="debug_trace",
        action="store_const",
        const=True,
        default=None,
        help="include every prompt and raw response in traces",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="winnowrag", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("answer", help="answer one question over a documents file")
    p.add_argument("--docs", required=True, help="JSON file: list of ctxs, or {question?, ctxs}")
    p.add_argument("--question", help="question text (overrides one stored in --docs)")
    _add_common(p)

    p = sub.add_parser("eval", help="run the pipeline over a JSONL dataset and score it")
    p.add_argument("--dataset", required=True, help="JSONL with question, answers, ctxs per line")
    p.add_argument("--metric", choices=["accuracy", "em"], help="scoring rule (default accuracy)")
    _add_common(p)

    p = sub.add_parser("recall", help="retrieval Recall@5/20 of a dataset, no model calls")
    p.add_argument("--dataset", required=True, help="JSONL with question, answers, ctxs per line")
    _add_common(p, pipeline=False)
    return parser


_NON_CONFIG = {"command", "config", "docs", "question", "verbose"}


def _config_from(args: argparse.Namespace, need_backend: bool = True) -> RunConfig:
    cli = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    return build_config(cli, args.config, need_backend=need_backend)


def _load_docs(path: str) -> tuple[Optional[str], list[RetrievedDocument]]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data: Any = json.loads(text)
    except json.JSONDecodeError:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if len(lines) != 1:
            raise DatasetError(f"{path}: expected JSON or a single JSONL record")
        try:
            data = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: invalid JSON: {exc.msg}") from exc
    question = None
    if isinstance(data, dict):
        question = data.get("question")
        data = data.get("ctxs")
    if not isinstance(data, list) or not data:
        raise DatasetError(f"{path}: no documents found")
    docs = []
    for rank, ctx in enumerate(data, 1):
        if not isinstance(ctx, dict) or not isinstance(ctx.get("text"), str):
            raise DatasetError(f"{path}: document {rank} lacks a 'text' string")
        docs.append(RetrievedDocument.from_ctx(ctx, rank))
    return question, docs


def _write(path: Optional[str], payload: Any) -> None:
    if path:
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def cmd_answer(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    question, docs = _load_docs(args.docs)
    question = args.question or question
    if not question:
        raise InputValidationError("no question given (use --question or a 'question' key)")
    answer, trace = answer_query(question, docs, cfg.winnow_config(), make_backends(cfg))
    print(answer)
    _write(cfg.output, trace.to_dict())
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    dataset = load_dataset(args.dataset, cfg.num_docs)
    if not dataset:
        raise DatasetError(f"{args.dataset}: dataset is empty")
    report: EvalReport = evaluate(
        dataset, cfg.winnow_config(), make_backends(cfg), metric=cfg.metric, parallelism=cfg.parallelism
    )
    print(report.summary_table())
    _write(cfg.output, report.to_dict(include_traces=True))
    return EXIT_OK


def cmd_recall(args: argparse.Namespace) -> int:
    cfg = _config_from(args, need_backend=False)
    dataset = load_dataset(args.dataset, cfg.num_docs)
    if not dataset:
        raise DatasetError(f"{args.dataset}: dataset is empty")
    recalls = recall_report(dataset)
    for k, v in sorted(recalls.items()):
        print(f"recall@{k:<4d}{v:.4f}")
    _write(cfg.output, {"num_examples": len(dataset), "recall_at": {str(k): v for k, v in recalls.items()}})
    return EXIT_OK


COMMANDS = {"answer": cmd_answer, "eval": cmd_eval, "recall": cmd_recall}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, DatasetError, InputValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except WinnowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
