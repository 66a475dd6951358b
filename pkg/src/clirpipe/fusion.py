"""Rank-based and score-based run fusion."""

from __future__ import annotations

from collections import defaultdict
from typing import Dict, Sequence

from .errors import ConfigError
from .runs import Run, sort_ranking

DEFAULT_K_RRF = 60.0


def rrf_fuse(runs: Sequence[Run], k_rrf: float = DEFAULT_K_RRF, tag: str = "rrf") -> Run:
    """Reciprocal rank fusion: a doc scores sum(1 / (k_rrf + rank)) over the runs listing it."""
    if not runs:
        raise ConfigError("rrf_fuse needs at least one run")
    terms: Dict[str, Dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for run in runs:
        for topic_id, ranking in run.topics.items():
            for rank, (doc_id, _) in enumerate(ranking, 1):
                terms[topic_id][doc_id].append(1.0 / (k_rrf + rank))
    return Run(tag, {t: _sum_sorted(docs) for t, docs in terms.items()})


def _sum_sorted(docs: Dict[str, list]):
    # sorting the terms makes the float sum independent of run order
    return sort_ranking((d, sum(sorted(v))) for d, v in docs.items())


def minmax_normalize(run: Run) -> Run:
    out = Run(run.tag)
    for topic_id, ranking in run.topics.items():
        if not ranking:
            out.topics[topic_id] = []
            continue
        scores = [s for _, s in ranking]
        lo, hi = min(scores), max(scores)
        if hi == lo:
            out.topics[topic_id] = [(d, 1.0) for d, _ in ranking]
        else:
            out.topics[topic_id] = [(d, (s - lo) / (hi - lo)) for d, s in ranking]
    return out


def score_fuse(runs: Sequence[Run], normalize: bool = False, tag: str = "scorefuse") -> Run:
    """Pool docs across runs; a doc's score is the sum of its (optionally min-max normalised) scores."""
    if not runs:
        raise ConfigError("score_fuse needs at least one run")
    if normalize:
        runs = [minmax_normalize(r) for r in runs]
    terms: Dict[str, Dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for run in runs:
        for topic_id, ranking in run.topics.items():
            for doc_id, score in ranking:
                terms[topic_id][doc_id].append(score)
    return Run(tag, {t: _sum_sorted(docs) for t, docs in terms.items()})


FUSERS = ("rrf", "score", "score-norm")


def fuse(runs: Sequence[Run], method: str = "rrf", k_rrf: float = DEFAULT_K_RRF,
         tag: str = None) -> Run:
    if method == "rrf":
        return rrf_fuse(runs, k_rrf, tag or "rrf")
    if method == "score":
        return score_fuse(runs, False, tag or "scorefuse")
    if method == "score-norm":
        return score_fuse(runs, True, tag or "scorefuse-norm")
    raise ConfigError(f"unknown fusion method {method!r}; choose from {FUSERS}")
