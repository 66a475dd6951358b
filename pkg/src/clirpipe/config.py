"""Declarative pipeline configuration (TOML).

Every numeric constant of the reference recipes lives here as a default.
Unknown sections or keys are rejected.  ``${VAR}`` is expanded from the
environment only inside the ``[oracle]`` section, which is where secrets go.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError


@dataclass
class WindowSection:
    window: int = 180
    stride: int = 90
    tokenizer: str = "whitespace"


@dataclass
class EmbedSection:
    dim: int = 32
    seed: int = 0


@dataclass
class IndexSection:
    k: int = 0  # 0 = power of two at or above sqrt(#tokens)
    pool_factor: int = 1
    seed: int = 0
    sample_size: int = 1 << 16
    max_iters: int = 25
    store_raw: bool = False


@dataclass
class SearchSection:
    k_passages: int = 2500
    nprobe: int = 4
    exact: bool = False
    doc_depth: int = 1000
    tag: str = "plaid"


@dataclass
class FusionSection:
    method: str = "rrf"
    k_rrf: float = 60.0
    runs: List[str] = field(default_factory=list)


@dataclass
class RerankSection:
    mode: str = "none"
    depth: int = 30
    top_sorted: int = 20
    heap_arity: int = 4
    passage_tokens: int = 450


@dataclass
class OracleSection:
    kind: str = "mock"
    mock_scores: str = ""
    failure: str = "never"
    base_url: str = ""
    auth_token_env: str = "ORACLE_TOKEN"
    timeout: float = 30.0
    max_retries: int = 3
    rate_limit: float = 0.0


@dataclass
class EvalSection:
    k_ndcg: int = 20
    k_recall: int = 1000
    gain: str = "exponential"
    figure: bool = True


@dataclass
class PipelineSection:
    corpus: str = ""
    topics: str = ""
    qrels: str = ""


@dataclass
class PipelineConfig:
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    window: WindowSection = field(default_factory=WindowSection)
    embed: EmbedSection = field(default_factory=EmbedSection)
    index: IndexSection = field(default_factory=IndexSection)
    search: SearchSection = field(default_factory=SearchSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    rerank: RerankSection = field(default_factory=RerankSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    base_dir: Path = field(default_factory=Path.cwd)

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p


_ENV = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def _expand(value):
    if not isinstance(value, str):
        return value

    def sub(m):
        name = m.group(1)
        if name not in os.environ:
            raise ConfigError(f"environment variable {name} referenced in [oracle] is not set")
        return os.environ[name]

    return _ENV.sub(sub, value)


def _section(cls, name: str, raw: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    values = {}
    for key, value in raw.items():
        default = getattr(cls(), key)
        if name == "oracle":
            value = _expand(value)
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, list):
            ok = isinstance(value, list)
        else:
            ok = isinstance(value, str)
        if not ok:
            raise ConfigError(f"[{name}] {key}: expected {type(default).__name__}, got {value!r}")
        values[key] = value
    return cls(**values)


def config_from_dict(raw: dict, base_dir=None) -> PipelineConfig:
    sections = {f.name: f for f in fields(PipelineConfig) if f.name != "base_dir"}
    unknown = sorted(set(raw) - set(sections))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    cfg = PipelineConfig(base_dir=Path(base_dir) if base_dir else Path.cwd())
    for name, f in sections.items():
        if name in raw:
            setattr(cfg, name, _section(f.default_factory, name, raw[name]))
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw, path.resolve().parent)
