"""Qrels I/O and the track metrics: nDCG@k and Recall@k."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List

from .errors import ConfigError, FormatError
from .runs import Run

log = logging.getLogger(__name__)

Qrels = Dict[str, Dict[str, int]]

GAINS = ("exponential", "linear")


def read_qrels(path) -> Qrels:
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            topic_id, _, doc_id, grade = parts
            try:
                g = int(grade)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: grade {grade!r} is not an integer") from None
            if g < 0:
                log.warning("%s:%d: negative grade %d clamped to 0", path, lineno, g)
                g = 0
            judged = qrels.setdefault(topic_id, {})
            if doc_id in judged:
                log.warning("%s:%d: duplicate judgment for %s/%s, keeping the last", path, lineno,
                            topic_id, doc_id)
            judged[doc_id] = g
    return qrels


def write_qrels(qrels: Qrels, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for topic_id in sorted(qrels):
            for doc_id, g in sorted(qrels[topic_id].items()):
                fh.write(f"{topic_id} 0 {doc_id} {g}\n")


@dataclass
class MetricResult:
    name: str
    per_topic: Dict[str, float] = field(default_factory=dict)
    # topics that entered the mean (those with at least one relevant doc)
    evaluated: List[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        if not self.evaluated:
            return 0.0
        return math.fsum(self.per_topic[t] for t in self.evaluated) / len(self.evaluated)


def _gain(grade: int, gain: str) -> float:
    return float(2 ** grade - 1) if gain == "exponential" else float(grade)


def _shared_topics(run: Run, qrels: Qrels) -> List[str]:
    topics = []
    for topic_id in run.topic_ids():
        if topic_id not in qrels:
            log.warning("topic %s has no judgments; skipped", topic_id)
            continue
        topics.append(topic_id)
    return topics


def ndcg_at(run: Run, qrels: Qrels, k: int = 20, gain: str = "exponential") -> MetricResult:
    """nDCG with ``log2(rank + 1)`` discount; gain ``2^g - 1`` or ``g``."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    if gain not in GAINS:
        raise ConfigError(f"unknown gain {gain!r}")
    res = MetricResult(f"nDCG@{k}")
    for topic_id in _shared_topics(run, qrels):
        judged = qrels[topic_id]
        ideal = sorted((g for g in judged.values() if g > 0), reverse=True)[:k]
        if not ideal:
            res.per_topic[topic_id] = 0.0
            continue
        idcg = sum(_gain(g, gain) / math.log2(i + 2) for i, g in enumerate(ideal))
        dcg = sum(_gain(judged.get(doc_id, 0), gain) / math.log2(i + 2)
                  for i, (doc_id, _) in enumerate(run.topics[topic_id][:k]))
        res.per_topic[topic_id] = dcg / idcg
        res.evaluated.append(topic_id)
    return res


def recall_at(run: Run, qrels: Qrels, k: int = 1000) -> MetricResult:
    if k < 1:
        raise ConfigError("k must be >= 1")
    res = MetricResult(f"R@{k}")
    for topic_id in _shared_topics(run, qrels):
        relevant = {d for d, g in qrels[topic_id].items() if g > 0}
        if not relevant:
            res.per_topic[topic_id] = 0.0
            continue
        found = sum(1 for d, _ in run.topics[topic_id][:k] if d in relevant)
        res.per_topic[topic_id] = found / len(relevant)
        res.evaluated.append(topic_id)
    return res


def evaluate(run: Run, qrels: Qrels, k_ndcg: int = 20, k_recall: int = 1000,
             gain: str = "exponential") -> List[MetricResult]:
    return [ndcg_at(run, qrels, k_ndcg, gain), recall_at(run, qrels, k_recall)]


def to_json(results: List[MetricResult], run_tag: str = "") -> dict:
    topics = sorted({t for r in results for t in r.per_topic})
    return {
        "run": run_tag,
        "mean": {r.name: r.mean for r in results},
        "evaluated_topics": {r.name: len(r.evaluated) for r in results},
        "per_topic": {t: {r.name: r.per_topic.get(t) for r in results} for t in topics},
        "note": "topics without relevant documents are reported as 0 and excluded from means",
    }


def format_table(results: List[MetricResult]) -> str:
    topics = sorted({t for r in results for t in r.per_topic})
    width = max([len("topic"), len("all")] + [len(t) for t in topics])
    names = [r.name for r in results]
    colw = [max(len(n), 8) for n in names]
    lines = ["  ".join([f"{'topic':<{width}}"] + [f"{n:>{w}}" for n, w in zip(names, colw)])]
    for t in topics:
        cells = []
        for r, w in zip(results, colw):
            v = r.per_topic.get(t)
            mark = "" if t in r.evaluated else "*"
            cells.append(f"{'-' if v is None else f'{v:.4f}{mark}':>{w}}")
        lines.append("  ".join([f"{t:<{width}}"] + cells))
    lines.append("  ".join([f"{'all':<{width}}"] + [f"{r.mean:>{w}.4f}" for r, w in zip(results, colw)]))
    if any(t not in r.evaluated for r in results for t in r.per_topic):
        lines.append("* no relevant documents; excluded from the mean")
    return "\n".join(lines)
