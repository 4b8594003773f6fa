"""Run configuration: defaults < environment < config file < CLI flags.

Config files are JSON objects whose keys are ``RunConfig`` field names, e.g.::

    {"k": 10, "max_rounds": 3, "backend": "http",
     "base_url": "http://localhost:8000/v1", "model": "llama-3-8b-instruct"}

Environment variables (all optional): ``WINNOWRAG_BASE_URL``,
``WINNOWRAG_MODEL``, ``WINNOWRAG_CRITIC_MODEL``, ``WINNOWRAG_EMBEDDING_MODEL``,
``WINNOWRAG_API_KEY_ENV``. The API key itself is read from the variable named
by ``api_key_env`` (default ``OPENAI_API_KEY``) and never stored in config.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional

from .errors import ConfigurationError
from .orchestrator import WinnowConfig

ENV_VARS = {
    "base_url": "WINNOWRAG_BASE_URL",
    "model": "WINNOWRAG_MODEL",
    "critic_model": "WINNOWRAG_CRITIC_MODEL",
    "embedding_model": "WINNOWRAG_EMBEDDING_MODEL",
    "api_key_env": "WINNOWRAG_API_KEY_ENV",
}


@dataclass
class RunConfig:
    k: int = 10
    max_rounds: int = 3
    num_docs: int = 50
    seed: int = 0
    trust_precomputed_embeddings: bool = True
    temperature: float = 0.0
    max_tokens: int = 4096
    backend: str = "http"
    base_url: Optional[str] = None
    model: Optional[str] = None
    critic_model: Optional[str] = None
    critic_base_url: Optional[str] = None
    api_key_env: str = "OPENAI_API_KEY"
    script: Optional[str] = None
    embedder: str = "hash"
    embedding_model: Optional[str] = None
    embedding_dim: int = 64
    dataset: Optional[str] = None
    metric: str = "accuracy"
    output: Optional[str] = None
    parallelism: int = 8
    debug_trace: bool = False

    def validate(self, need_backend: bool = True) -> None:
        for name in ("k", "max_rounds", "num_docs", "max_tokens", "parallelism", "embedding_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.temperature < 0:
            raise ConfigurationError("temperature must be >= 0")
        if self.backend not in ("http", "scripted"):
            raise ConfigurationError(f"unknown backend {self.backend!r}")
        if self.embedder not in ("hash", "http"):
            raise ConfigurationError(f"unknown embedder {self.embedder!r}")
        if self.metric not in ("accuracy", "em"):
            raise ConfigurationError(f"unknown metric {self.metric!r}")
        if not need_backend:
            return
        if self.backend == "http" and not (self.base_url and self.model):
            raise ConfigurationError("http backend needs base_url and model")
        if self.backend == "scripted" and not self.script:
            raise ConfigurationError("scripted backend needs a script file")
        if self.embedder == "http" and not (self.base_url and self.embedding_model):
            raise ConfigurationError("http embedder needs base_url and embedding_model")

    def winnow_config(self) -> WinnowConfig:
        return WinnowConfig(
            k=self.k,
            max_rounds=self.max_rounds,
            num_docs=self.num_docs,
            seed=self.seed,
            trust_precomputed_embeddings=self.trust_precomputed_embeddings,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
            agent_model=self.model or "",
            critic_model=self.critic_model or "",
            parallelism=self.parallelism,
            debug_trace=self.debug_trace,
        )

    def api_key(self) -> Optional[str]:
        return os.environ.get(self.api_key_env) or None


def _coerce(name: str, value: Any) -> Any:
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes", "on")
            return bool(value)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad value for {name}: {value!r}") from exc
    return value


def load_config_file(path: str | Path) -> dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    return data


def build_config(
    cli: Mapping[str, Any],
    config_file: Optional[str | Path] = None,
    env: Optional[Mapping[str, str]] = None,
    need_backend: bool = True,
) -> RunConfig:
    """Layer configuration sources. ``None`` values in ``cli`` mean "not given"."""
    env = os.environ if env is None else env
    merged: dict[str, Any] = {}
    for name, var in ENV_VARS.items():
        if env.get(var):
            merged[name] = env[var]
    if config_file:
        merged.update(load_config_file(config_file))
    merged.update({k: v for k, v in cli.items() if v is not None})
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in merged.items()})
    cfg.validate(need_backend)
    return cfg
