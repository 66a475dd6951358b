"""Late-interaction search over a quantized index with MaxP document scoring."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Set, Tuple

import numpy as np

from .errors import ConfigError, DimError
from .index_core import QuantizedIndex

DEFAULT_K_PASSAGES = 2500
DEFAULT_NPROBE = 4
DEFAULT_DOC_DEPTH = 1000


@dataclass(frozen=True)
class ScoredPassage:
    passage_id: str
    doc_id: str
    score: float


@dataclass(frozen=True)
class SearchParams:
    k_passages: int = DEFAULT_K_PASSAGES
    nprobe: int = DEFAULT_NPROBE
    exact: bool = False

    def __post_init__(self):
        if self.k_passages < 1 or self.nprobe < 1:
            raise ConfigError("k_passages and nprobe must be >= 1")


def _rows(m) -> np.ndarray:
    rows = getattr(m, "rows", m)
    return np.asarray(rows, dtype=np.float64).reshape(-1, np.shape(rows)[-1])


def _dots(q: np.ndarray, d: np.ndarray) -> np.ndarray:
    # Accumulate one dimension at a time so every (i, j) entry goes through the
    # same sequence of float ops regardless of array shapes; equal vectors then
    # give bit-equal scores and tie-breaking stays exact.
    out = q[:, None, 0] * d[None, :, 0]
    for j in range(1, q.shape[1]):
        out += q[:, None, j] * d[None, :, j]
    return out


def _sum_rows(m: np.ndarray) -> np.ndarray:
    acc = np.zeros(m.shape[1:], dtype=np.float64)
    for row in m:
        acc += row
    return acc


def maxsim(q, d) -> float:
    """Sum over query rows of the best dot product against any document row."""
    q, d = _rows(q), _rows(d)
    if q.shape[1] != d.shape[1]:
        raise DimError(f"query dim {q.shape[1]} != document dim {d.shape[1]}")
    if len(q) == 0 or len(d) == 0:
        return 0.0
    return float(_sum_rows(_dots(q, d).max(axis=1)[:, None])[0])


def _candidate_ordinals(q: np.ndarray, index: QuantizedIndex, nprobe: int) -> np.ndarray:
    if len(q) == 0:
        return np.empty(0, dtype=np.int64)
    if q.shape[1] != index.dim:
        raise DimError(f"query dim {q.shape[1]} != index dim {index.dim}")
    if nprobe >= index.k:
        probed = np.arange(index.k)
    else:
        sims = q @ index.centroids.astype(np.float64).T
        top = np.argsort(-sims, axis=1, kind="stable")[:, :nprobe]
        probed = np.unique(top)
    codes = [index.postings[c] for c in probed]
    codes = np.concatenate(codes) if codes else np.empty(0, dtype=np.int64)
    return np.unique(index.code_passage[codes])


def candidates(q, index: QuantizedIndex, nprobe: int = DEFAULT_NPROBE) -> Set[str]:
    """Passages owning a token in any of the ``nprobe`` closest centroids of a query token."""
    ords = _candidate_ordinals(_rows(q), index, nprobe)
    return {index.passages[i].passage_id for i in ords}


def score_passages(q: np.ndarray, index: QuantizedIndex, ordinals: np.ndarray,
                   vectors: np.ndarray, chunk_tokens: int = 1 << 14) -> np.ndarray:
    """MaxSim of ``q`` against each passage in ``ordinals`` using ``vectors`` as token store."""
    off = index.offsets
    scores = np.empty(len(ordinals), dtype=np.float64)
    lo = 0
    while lo < len(ordinals):
        hi, ntok = lo, 0
        while hi < len(ordinals) and (hi == lo or ntok + off[ordinals[hi] + 1] - off[ordinals[hi]] <= chunk_tokens):
            ntok += off[ordinals[hi] + 1] - off[ordinals[hi]]
            hi += 1
        part = ordinals[lo:hi]
        lengths = off[part + 1] - off[part]
        starts = np.repeat(off[part] - np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths)
        token_ids = starts + np.arange(int(lengths.sum()))
        sims = _dots(q, vectors[token_ids].astype(np.float64))
        seg = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        best = np.maximum.reduceat(sims, seg, axis=1)
        scores[lo:hi] = _sum_rows(best)
        lo = hi
    return scores


def search(q, index: QuantizedIndex, params: SearchParams = SearchParams()) -> List[ScoredPassage]:
    """Rank candidate passages by MaxSim; ties go to the smaller passage id."""
    q = _rows(q)
    ords = _candidate_ordinals(q, index, params.nprobe)
    if len(ords) == 0:
        return []
    vectors = index.raw if params.exact and index.raw is not None else index.reconstructed
    scores = score_passages(q, index, ords, vectors)
    order = np.lexsort((index.id_rank[ords], -scores))[:params.k_passages]
    out = []
    for i in order:
        p = index.passages[ords[i]]
        out.append(ScoredPassage(p.passage_id, p.doc_id, float(scores[i])))
    return out


def maxp_aggregate(passages: Iterable[ScoredPassage]) -> List[Tuple[str, float]]:
    """Document score = best passage score; sorted by score desc, doc id asc."""
    best: Dict[str, float] = {}
    for p in passages:
        if p.doc_id not in best or p.score > best[p.doc_id]:
            best[p.doc_id] = p.score
    return sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))
