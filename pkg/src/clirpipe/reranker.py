"""Pointwise, tournament (d-ary heapsort) and single-shot listwise reranking."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .corpus import Document, Passage, Topic, WindowConfig, build_query_text, passage_text, tokenize, window_passages
from .errors import ConfigError
from .oracle_bridge import MAX_PASSAGES, ComparatorOracle, ListOracle, PointwiseScorer, Snippet
from .runs import Run

log = logging.getLogger(__name__)

STITCH_EPS = 0.001


@dataclass(frozen=True)
class RerankConfig:
    depth: int = 30
    top_sorted: int = 20
    heap_arity: int = 4
    passage_tokens: int = 450

    def __post_init__(self):
        if self.depth < 1 or self.top_sorted < 1 or self.passage_tokens < 1:
            raise ConfigError("depth, top_sorted and passage_tokens must be >= 1")
        if self.top_sorted > self.depth:
            raise ConfigError(f"top_sorted ({self.top_sorted}) must be <= depth ({self.depth})")
        if not 1 <= self.heap_arity <= MAX_PASSAGES - 1:
            raise ConfigError(f"heap_arity must be in 1..{MAX_PASSAGES - 1}")


def pointwise_prob(logit_true: float, logit_false: float) -> float:
    """Two-way softmax probability of the "true" token."""
    d = logit_true - logit_false
    if d >= 0:
        return 1.0 / (1.0 + math.exp(-d))
    e = math.exp(d)
    return e / (1.0 + e)


def stitch_scores(reordered_head: Sequence[str], original: Sequence[Tuple[str, float]],
                  eps: float = STITCH_EPS) -> List[Tuple[str, float]]:
    """Place the reordered head above the untouched tail.

    Head position ``i`` gets ``max_score + (H - i) * eps``; tail docs keep
    their scores and order.
    """
    if not reordered_head:
        return list(original)
    head = list(reordered_head)
    s_max = max(s for _, s in original)
    h = len(head)
    in_head = set(head)
    out = [(doc_id, s_max + (h - i) * eps) for i, doc_id in enumerate(head)]
    out += [(d, s) for d, s in original if d not in in_head]
    return out


def _fill(n: int, fixed: Dict[int, str], ordered: List[str]) -> List[str]:
    """Positions in ``fixed`` keep their item; ``ordered`` fills the remaining slots."""
    it = iter(ordered)
    return [fixed[i] if i in fixed else next(it) for i in range(n)]


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------

def rerank_pointwise(run: Run, scorer: PointwiseScorer, depth: int, topics: Mapping[str, Topic],
                     corpus: Mapping[str, Document], tag: Optional[str] = None) -> Run:
    if depth < 1:
        raise ConfigError("depth must be >= 1")
    out = Run(tag or run.tag)
    for topic_id, ranking in run.topics.items():
        topic = topics.get(topic_id)
        if topic is None or not ranking:
            log.warning("topic %s: no topic text, left unchanged", topic_id)
            out.topics[topic_id] = list(ranking)
            continue
        query = build_query_text(topic)
        head = [d for d, _ in ranking[:depth]]
        scored, fixed = [], {}
        for pos, doc_id in enumerate(head):
            doc = corpus.get(doc_id)
            try:
                if doc is None:
                    raise KeyError(doc_id)
                scored.append((scorer.score(query, Snippet(doc_id, doc.body)), pos, doc_id))
            except Exception as exc:  # noqa: BLE001 - any scorer failure pins the doc
                log.warning("topic %s: scoring %s failed (%s); position kept", topic_id, doc_id, exc)
                fixed[pos] = doc_id
        scored.sort(key=lambda t: (-t[0], t[1]))
        new_head = _fill(len(head), fixed, [d for _, _, d in scored])
        out.topics[topic_id] = stitch_scores(new_head, ranking)
    return out


# ---------------------------------------------------------------------------
# tournament
# ---------------------------------------------------------------------------

def select_best_passage(doc: Document, topic: Topic, oracle: ComparatorOracle,
                        passage_tokens: int = 450, tokenizer: str = "whitespace") -> Passage:
    """Single-elimination over the document's non-overlapping passages, in groups of five.

    A failed judgment picks the first passage of its group.
    """
    tokens = tokenize(doc.body, tokenizer)
    passages = window_passages(tokens, WindowConfig(passage_tokens, passage_tokens), doc.doc_id)
    if not passages:
        raise ValueError(f"document {doc.doc_id} has no text")
    alive = passages
    while len(alive) > 1:
        winners = []
        for lo in range(0, len(alive), MAX_PASSAGES):
            group = alive[lo:lo + MAX_PASSAGES]
            if len(group) == 1:
                winners.append(group[0])
                continue
            snippets = [Snippet(p.passage_id, passage_text(tokens, p)) for p in group]
            idx = oracle.best_of(topic.title, topic.description, snippets)
            winners.append(group[0 if idx is None else idx])
        alive = winners
    return alive[0]


class _Heap:
    def __init__(self, items, topic: Topic, oracle: ComparatorOracle, arity: int):
        self.a = list(items)
        self.topic = topic
        self.oracle = oracle
        self.arity = arity
        self.calls = 0

    def sift_down(self, i: int, size: int) -> None:
        a, d = self.a, self.arity
        while True:
            children = list(range(d * i + 1, min(d * i + d, size - 1) + 1))
            if not children:
                return
            listed = [i] + children  # parent first: a failed call means "no swap"
            self.calls += 1
            idx = self.oracle.best_of(self.topic.title, self.topic.description,
                                      [a[j] for j in listed])
            if not idx:
                return
            c = listed[idx]
            a[i], a[c] = a[c], a[i]
            i = c


def heapsort_rerank(head: Sequence[Snippet], topic: Topic, oracle: ComparatorOracle,
                    cfg: RerankConfig = RerankConfig()) -> List[Snippet]:
    """Partially sort ``head`` with a d-ary max-heap driven by best-of judgments.

    The first ``cfg.top_sorted`` outputs are extracted maxima; the rest is the
    leftover heap array, deliberately left unsorted.
    """
    out, _ = _heapsort(head, topic, oracle, cfg)
    return out


def _heapsort(head, topic, oracle, cfg) -> Tuple[List[Snippet], int]:
    h = _Heap(head, topic, oracle, cfg.heap_arity)
    n = len(h.a)
    d = cfg.heap_arity
    for i in range((n - 2) // d, -1, -1):
        h.sift_down(i, n)
    extracted = []
    size = n
    for _ in range(min(cfg.top_sorted, n)):
        h.a[0], h.a[size - 1] = h.a[size - 1], h.a[0]
        size -= 1
        extracted.append(h.a[size])
        h.sift_down(0, size)
    return extracted + h.a[:size], h.calls


def rerank_tournament(run: Run, topics: Mapping[str, Topic], corpus: Mapping[str, Document],
                      oracle: ComparatorOracle, cfg: RerankConfig = RerankConfig(),
                      tokenizer: str = "whitespace", tag: Optional[str] = None) -> Run:
    """Best passage per head document, then heapsort those passages to order the head."""
    out = Run(tag or run.tag)
    for topic_id in run.topic_ids():
        ranking = run.topics[topic_id]
        topic = topics.get(topic_id)
        if topic is None or not ranking:
            log.warning("topic %s: no topic text, left unchanged", topic_id)
            out.topics[topic_id] = list(ranking)
            continue
        head = [d for d, _ in ranking[:cfg.depth]]
        fixed: Dict[int, str] = {}
        snippets: List[Snippet] = []
        owner: Dict[str, str] = {}
        for pos, doc_id in enumerate(head):
            doc = corpus.get(doc_id)
            if doc is None or not doc.body.split():
                log.warning("topic %s: no text for %s; position kept", topic_id, doc_id)
                fixed[pos] = doc_id
                continue
            p = select_best_passage(doc, topic, oracle, cfg.passage_tokens, tokenizer)
            tokens = tokenize(doc.body, tokenizer)
            snippets.append(Snippet(p.passage_id, passage_text(tokens, p)))
            owner[p.passage_id] = doc_id
        ordered = [owner[s.passage_id] for s in heapsort_rerank(snippets, topic, oracle, cfg)] if snippets else []
        out.topics[topic_id] = stitch_scores(_fill(len(head), fixed, ordered), ranking)
    return out


# ---------------------------------------------------------------------------
# single-shot listwise
# ---------------------------------------------------------------------------

def rerank_listwise_once(head: Sequence[Snippet], topic: Topic, list_oracle: ListOracle) -> List[Snippet]:
    """One call returns a full permutation; anything else leaves the input order."""
    head = list(head)
    if len(head) < 2:
        return head
    perm = list_oracle.rank(topic.title, topic.description, head)
    if perm is None or sorted(perm) != list(range(len(head))):
        log.warning("topic %s: listwise oracle gave no valid permutation; order kept", topic.topic_id)
        return head
    return [head[i] for i in perm]


def rerank_listwise(run: Run, topics: Mapping[str, Topic], corpus: Mapping[str, Document],
                    list_oracle: ListOracle, depth: int = 30, passage_tokens: int = 450,
                    tokenizer: str = "whitespace", tag: Optional[str] = None) -> Run:
    """Rerank the top ``depth`` docs of each topic with one listwise call (leading passage of each doc)."""
    out = Run(tag or run.tag)
    for topic_id in run.topic_ids():
        ranking = run.topics[topic_id]
        topic = topics.get(topic_id)
        if topic is None or not ranking:
            out.topics[topic_id] = list(ranking)
            continue
        head = [d for d, _ in ranking[:depth]]
        fixed, snippets = {}, []
        for pos, doc_id in enumerate(head):
            doc = corpus.get(doc_id)
            tokens = tokenize(doc.body, tokenizer) if doc else []
            if not tokens:
                fixed[pos] = doc_id
                continue
            snippets.append(Snippet(doc_id, " ".join(tokens[:passage_tokens])))
        ordered = [s.passage_id for s in rerank_listwise_once(snippets, topic, list_oracle)]
        out.topics[topic_id] = stitch_scores(_fill(len(head), fixed, ordered), ranking)
    return out
