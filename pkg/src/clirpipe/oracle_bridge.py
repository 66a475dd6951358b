"""Judgment oracles for reranking: an HTTP client and deterministic mocks.

Wire protocol (the engine never embeds a vendor SDK)::

    POST {base_url}/v1/complete   {"system": str, "prompt": str, "max_tokens": int}
      -> {"text": str}
    POST {base_url}/v1/score      {"query": str, "passage": str}
      -> {"logit_true": float, "logit_false": float}

Auth is a bearer token read from the environment variable named by the
endpoint.  A failed judgment is represented by ``None``.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Union

import requests

from .errors import ArityError, ConfigError, SpecError

log = logging.getLogger(__name__)

MIN_PASSAGES = 2
MAX_PASSAGES = 5

SYSTEM_MESSAGE = (
    "You are an intelligent assistant that can identify the best passage based on its "
    "relevance to a query."
)

_BEST_OF_HEAD = (
    "I will provide you with {n} passages in no particular order, each indicated by a "
    "numerical identifier in square brackets.\n"
    "      Identify the best passage based on its relevance to this search query: {description}."
)
_BEST_OF_TAIL = (
    "General search topic: {title} Search Query: {description}.\n"
    "\n"
    "Identify the best passage above based on its relevance to the search query.\n"
    "      The output format should be [], e.g., [4] meaning document 4 is most relevant to "
    "the search query.\n"
    "      Only respond with the passage number; do not say any word or explain."
)

LIST_SYSTEM_MESSAGE = (
    "You are an intelligent assistant that can rank passages based on their relevance to "
    "a query."
)
_LIST_TAIL = (
    "General search topic: {title} Search Query: {description}.\n"
    "\n"
    "Rank all {n} passages above from most to least relevant to the search query.\n"
    "      The output format should be [] > [], e.g., [2] > [1].\n"
    "      Only respond with the ranking; do not say any word or explain."
)

_BRACKET = re.compile(r"\s*\[(\d+)\]\s*")


@dataclass(frozen=True)
class Snippet:
    """A passage as shown to an oracle: stable id plus text."""
    passage_id: str
    text: str


class ComparatorOracle(Protocol):
    def best_of(self, title: str, description: str,
                passages: Sequence[Snippet]) -> Optional[int]: ...


class ListOracle(Protocol):
    def rank(self, title: str, description: str,
             passages: Sequence[Snippet]) -> Optional[List[int]]: ...


class PointwiseScorer(Protocol):
    def score(self, query_text: str, passage: Snippet) -> float: ...


# ---------------------------------------------------------------------------
# prompts
# ---------------------------------------------------------------------------

def build_best_of_prompt(title: str, description: str, passages: Sequence[str]):
    """Return ``(system_message, user_prompt)`` for a best-of-n judgment."""
    n = len(passages)
    if not MIN_PASSAGES <= n <= MAX_PASSAGES:
        raise ArityError(f"best-of prompt takes {MIN_PASSAGES}..{MAX_PASSAGES} passages, got {n}")
    # str.format does not re-expand braces inside substituted values
    parts = [_BEST_OF_HEAD.format(n=n, description=description)]
    parts += [f"[{i}] {text}" for i, text in enumerate(passages, 1)]
    parts.append(_BEST_OF_TAIL.format(title=title, description=description))
    return SYSTEM_MESSAGE, "\n\n".join(parts)


def parse_best_of_response(text: str, n_passages: int) -> Optional[int]:
    m = _BRACKET.fullmatch(text or "")
    if not m:
        return None
    k = int(m.group(1))
    return k - 1 if 1 <= k <= n_passages else None


def build_listwise_prompt(title: str, description: str, passages: Sequence[str]):
    n = len(passages)
    if n < 1:
        raise ArityError("listwise prompt needs at least one passage")
    parts = [_BEST_OF_HEAD.format(n=n, description=description).replace(
        "Identify the best passage", "Rank the passages")]
    parts += [f"[{i}] {text}" for i, text in enumerate(passages, 1)]
    parts.append(_LIST_TAIL.format(title=title, description=description, n=n))
    return LIST_SYSTEM_MESSAGE, "\n\n".join(parts)


def parse_listwise_response(text: str, n_passages: int) -> Optional[List[int]]:
    """Parse ``[3] > [1] > [2]`` into 0-based indices; anything but a full permutation fails."""
    items = [s for s in (text or "").split(">")]
    out = []
    for item in items:
        m = _BRACKET.fullmatch(item)
        if not m:
            return None
        out.append(int(m.group(1)) - 1)
    return out if sorted(out) == list(range(n_passages)) else None


# ---------------------------------------------------------------------------
# wire client
# ---------------------------------------------------------------------------

@dataclass
class OracleEndpoint:
    base_url: str
    auth_token_env: str = "ORACLE_TOKEN"
    timeout: float = 30.0
    max_retries: int = 3
    rate_limit: float = 0.0  # calls per second, 0 = unlimited
    backoff: float = 0.5
    max_tokens: int = 16

    def __post_init__(self):
        if self.timeout <= 0:
            raise ConfigError("timeout must be > 0")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.rate_limit < 0:
            raise ConfigError("rate_limit must be >= 0")


class RateLimiter:
    """Minimum spacing between calls, shared by all threads."""

    def __init__(self, per_second: float, clock=time.monotonic, sleep=time.sleep):
        self.interval = 1.0 / per_second if per_second > 0 else 0.0
        self._next = 0.0
        self._lock = threading.Lock()
        self._clock = clock
        self._sleep = sleep

    def wait(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = self._clock()
            slot = max(now, self._next)
            self._next = slot + self.interval
        if slot > now:
            self._sleep(slot - now)


class WireOracle:
    """HTTP-backed comparator, list oracle and pointwise scorer."""

    def __init__(self, endpoint: OracleEndpoint, session: Optional[requests.Session] = None,
                 sleep=time.sleep):
        token = os.environ.get(endpoint.auth_token_env)
        if not token:
            raise ConfigError(f"environment variable {endpoint.auth_token_env} is not set")
        self.endpoint = endpoint
        self._headers = {"Authorization": f"Bearer {token}", "Content-Type": "application/json"}
        self._session = session or requests.Session()
        self._limiter = RateLimiter(endpoint.rate_limit)
        self._sleep = sleep
        self.attempts = 0

    def _post(self, route: str, body: dict) -> Optional[dict]:
        url = self.endpoint.base_url.rstrip("/") + route
        payload = json.dumps(body, ensure_ascii=False).encode("utf-8")
        for attempt in range(self.endpoint.max_retries + 1):
            self._limiter.wait()
            self.attempts += 1
            try:
                resp = self._session.post(url, data=payload, headers=self._headers,
                                          timeout=self.endpoint.timeout)
                if resp.status_code >= 500 or resp.status_code == 429:
                    raise requests.HTTPError(f"status {resp.status_code}")
                if resp.status_code >= 400:
                    log.warning("oracle at %s rejected the request: %d", url, resp.status_code)
                    return None
                return resp.json()
            except (requests.ConnectionError, requests.Timeout, requests.HTTPError) as exc:
                if attempt == self.endpoint.max_retries:
                    log.warning("oracle call to %s failed after %d attempts: %s", url,
                                attempt + 1, exc)
                    return None
                self._sleep(self.endpoint.backoff * 2 ** attempt)
            except ValueError:
                log.warning("oracle at %s returned non-JSON body", url)
                return None
        return None

    def complete(self, system: str, prompt: str) -> Optional[str]:
        data = self._post("/v1/complete", {"system": system, "prompt": prompt,
                                           "max_tokens": self.endpoint.max_tokens})
        if data is None or not isinstance(data.get("text"), str):
            return None
        return data["text"]

    def best_of(self, title, description, passages) -> Optional[int]:
        system, prompt = build_best_of_prompt(title, description, [p.text for p in passages])
        text = self.complete(system, prompt)
        return None if text is None else parse_best_of_response(text, len(passages))

    def rank(self, title, description, passages) -> Optional[List[int]]:
        system, prompt = build_listwise_prompt(title, description, [p.text for p in passages])
        text = self.complete(system, prompt)
        return None if text is None else parse_listwise_response(text, len(passages))

    def score(self, query_text: str, passage: Snippet) -> float:
        from .reranker import pointwise_prob

        data = self._post("/v1/score", {"query": query_text, "passage": passage.text})
        try:
            return pointwise_prob(float(data["logit_true"]), float(data["logit_false"]))
        except (TypeError, KeyError, ValueError):
            raise RuntimeError("pointwise scorer returned no usable logits") from None


def wire_best_of(endpoint: OracleEndpoint, title: str, description: str,
                 passages: Sequence[Snippet]) -> Optional[int]:
    return WireOracle(endpoint).best_of(title, description, passages)


# ---------------------------------------------------------------------------
# mocks
# ---------------------------------------------------------------------------

FailurePattern = Union[str, Callable[[int], bool]]


def failure_predicate(pattern: FailurePattern) -> Callable[[int], bool]:
    """``never``, ``always``, ``every:N`` (calls N, 2N, ... fail) or a callable on the 1-based ordinal."""
    if callable(pattern):
        return pattern
    if pattern == "never":
        return lambda i: False
    if pattern == "always":
        return lambda i: True
    if pattern.startswith("every:"):
        n = int(pattern.split(":", 1)[1])
        if n < 1:
            raise ConfigError("every:N needs N >= 1")
        return lambda i: i % n == 0
    raise ConfigError(f"unknown failure pattern {pattern!r}")


@dataclass
class MockOracleSpec:
    hidden_scores: Dict[str, float] = field(default_factory=dict)
    failure_pattern: FailurePattern = "never"


class MockOracle:
    """Truthful oracle over hidden scores, with scripted failures.

    Scores are looked up by passage id, then by the document id before ``#``.
    """

    def __init__(self, spec: MockOracleSpec):
        self.spec = spec
        self._fails = failure_predicate(spec.failure_pattern)
        self._lock = threading.Lock()
        self.calls = 0

    def _next_ordinal(self) -> int:
        with self._lock:
            self.calls += 1
            return self.calls

    def hidden(self, passage_id: str) -> float:
        scores = self.spec.hidden_scores
        if passage_id in scores:
            return scores[passage_id]
        doc_id = passage_id.rsplit("#", 1)[0]
        if doc_id in scores:
            return scores[doc_id]
        raise SpecError(f"no hidden score for {passage_id!r}")

    def best_of(self, title, description, passages) -> Optional[int]:
        if not MIN_PASSAGES <= len(passages) <= MAX_PASSAGES:
            raise ArityError(f"best_of takes {MIN_PASSAGES}..{MAX_PASSAGES} passages")
        if self._fails(self._next_ordinal()):
            return None
        values = [self.hidden(p.passage_id) for p in passages]
        return max(range(len(values)), key=lambda i: (values[i], -i))

    def rank(self, title, description, passages) -> Optional[List[int]]:
        if self._fails(self._next_ordinal()):
            return None
        values = [self.hidden(p.passage_id) for p in passages]
        return sorted(range(len(values)), key=lambda i: (-values[i], i))

    def score(self, query_text: str, passage: Snippet) -> float:
        from .reranker import pointwise_prob

        return pointwise_prob(self.hidden(passage.passage_id), 0.0)


def mock_best_of(oracle: MockOracle, passages: Sequence[Snippet]) -> Optional[int]:
    return oracle.best_of("", "", passages)


def mock_pointwise(spec: MockOracleSpec) -> MockOracle:
    return MockOracle(spec)


def load_mock_scores(path) -> Dict[str, Dict[str, float]]:
    """Read hidden scores as ``{topic_id: {id: score}}``.

    A flat ``{id: score}`` object applies to every topic and is returned under
    the key ``"*"``.
    """
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: mock scores must be a JSON object")
    if raw and all(isinstance(v, dict) for v in raw.values()):
        return {str(t): {str(k): float(v) for k, v in m.items()} for t, m in raw.items()}
    try:
        return {"*": {str(k): float(v) for k, v in raw.items()}}
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: mock scores must map ids to numbers") from None
