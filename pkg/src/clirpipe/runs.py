"""TREC run files.

Six whitespace-separated columns per line::

    topic_id Q0 doc_id rank score tag
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

from .errors import ConsistencyError, FormatError

MAX_DEPTH = 1000

Ranking = List[Tuple[str, float]]


@dataclass
class Run:
    tag: str
    topics: Dict[str, Ranking] = field(default_factory=dict)

    def __getitem__(self, topic_id: str) -> Ranking:
        return self.topics[topic_id]

    def topic_ids(self) -> List[str]:
        return sorted(self.topics)

    def truncated(self, depth: int = MAX_DEPTH) -> "Run":
        return Run(self.tag, {t: list(r[:depth]) for t, r in self.topics.items()})


def sort_ranking(items) -> Ranking:
    """Score descending, doc id ascending on ties."""
    return sorted(items, key=lambda kv: (-kv[1], kv[0]))


def write_run(run: Run, path, depth: int = MAX_DEPTH) -> None:
    lines = []
    for topic_id in run.topic_ids():
        ranking = run.topics[topic_id][:depth]
        seen = set()
        prev = float("inf")
        for rank, (doc_id, score) in enumerate(ranking, 1):
            if doc_id in seen:
                raise ConsistencyError(f"topic {topic_id}: duplicate doc {doc_id!r}")
            if score > prev:
                raise ConsistencyError(f"topic {topic_id}: scores increase at rank {rank}")
            seen.add(doc_id)
            prev = score
            lines.append(f"{topic_id} Q0 {doc_id} {rank} {float(score)!r} {run.tag}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def read_run(path) -> Run:
    rows: Dict[str, List[Tuple[int, str, float, int]]] = {}
    tag = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise FormatError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            topic_id, _, doc_id, rank, score, line_tag = parts
            try:
                rank_i = int(rank)
                score_f = float(score)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad rank or score") from None
            tag = tag or line_tag
            rows.setdefault(topic_id, []).append((rank_i, doc_id, score_f, lineno))

    run = Run(tag or "")
    for topic_id, entries in rows.items():
        entries.sort()
        seen = set()
        for i, (rank, doc_id, score, lineno) in enumerate(entries):
            if doc_id in seen:
                raise ConsistencyError(f"{path}:{lineno}: duplicate doc {doc_id!r} in topic {topic_id}")
            seen.add(doc_id)
            if i and rank == entries[i - 1][0]:
                raise ConsistencyError(f"{path}:{lineno}: duplicate rank {rank} in topic {topic_id}")
            if i and score > entries[i - 1][2]:
                raise ConsistencyError(
                    f"{path}:{lineno}: score rises from rank {entries[i - 1][0]} to {rank} in topic {topic_id}")
        run.topics[topic_id] = [(d, s) for _, d, s, _ in entries]
    return run
