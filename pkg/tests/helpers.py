"""Generators and brute-force reference implementations shared by the tests.

The references are written the slow, obvious way (nested loops, plain floats)
so they do not share code paths with the library.
"""

from __future__ import annotations

import math
from typing import Dict, List, Sequence, Tuple

import numpy as np

from clirpipe.corpus import Passage
from clirpipe.embed_io import TokenMatrix
from clirpipe.oracle_bridge import Snippet

FIXTURES = __import__("pathlib").Path(__file__).parent / "fixtures"


def unit_rows(x: np.ndarray) -> np.ndarray:
    return (x / np.linalg.norm(x, axis=-1, keepdims=True)).astype(np.float32)


def random_matrices(rng: np.random.Generator, n_passages: int, dim: int,
                    min_tokens: int = 3, max_tokens: int = 12, n_docs: int = 0):
    """Uniform random unit token vectors; passage ``i`` belongs to ``d{i // per_doc}``."""
    n_docs = n_docs or n_passages
    per_doc = max(1, math.ceil(n_passages / n_docs))
    mats, table = [], {}
    for i in range(n_passages):
        doc = f"d{i // per_doc:04d}"
        pid = f"{doc}#{i % per_doc}"
        n = int(rng.integers(min_tokens, max_tokens + 1))
        mats.append(TokenMatrix(pid, unit_rows(rng.standard_normal((n, dim)))))
        table[pid] = Passage(pid, doc, 0, n)
    return mats, table


def clustered_matrices(rng: np.random.Generator, n_passages: int, dim: int, n_clusters: int,
                       noise: float = 0.35, min_tokens: int = 8, max_tokens: int = 24):
    """Token vectors drawn around ``n_clusters`` unit centres; each passage mixes three topics."""
    centres = unit_rows(rng.standard_normal((n_clusters, dim)))
    mats, table = [], {}
    for i in range(n_passages):
        pid = f"p{i:04d}#0"
        n = int(rng.integers(min_tokens, max_tokens + 1))
        own = rng.choice(n_clusters, size=3, replace=False)
        which = own[rng.integers(0, 3, size=n)]
        rows = centres[which] + noise * rng.standard_normal((n, dim)) / math.sqrt(dim)
        mats.append(TokenMatrix(pid, unit_rows(rows)))
        table[pid] = Passage(pid, f"p{i:04d}", 0, n)
    return centres, mats, table


def clustered_query(rng: np.random.Generator, mats: Sequence[TokenMatrix], n_rows: int = 8,
                    noise: float = 0.35) -> np.ndarray:
    """A query built by perturbing tokens of one randomly chosen passage."""
    src = mats[int(rng.integers(len(mats)))].rows
    picks = src[rng.integers(0, len(src), size=n_rows)]
    dim = src.shape[1]
    return unit_rows(picks + noise * rng.standard_normal(picks.shape) / math.sqrt(dim))


# ---------------------------------------------------------------------------
# brute-force references
# ---------------------------------------------------------------------------

def brute_maxsim(q, d) -> float:
    total = 0.0
    for qi in np.asarray(q, dtype=np.float64):
        best = -math.inf
        for dj in np.asarray(d, dtype=np.float64):
            s = 0.0
            for a, b in zip(qi, dj):
                s += a * b
            best = max(best, s)
        total += best
    return total


def brute_ranking(q, mats: Sequence[TokenMatrix]) -> List[Tuple[str, float]]:
    """Every passage scored with fast float64 dots; ties to the smaller id."""
    q = np.asarray(q, dtype=np.float64)
    scored = []
    for m in mats:
        sims = q @ m.rows.astype(np.float64).T
        scored.append((m.passage_id, float(sims.max(axis=1).sum())))
    return sorted(scored, key=lambda t: (-t[1], t[0]))


def brute_dcg(grades: Sequence[float]) -> float:
    return sum(g / math.log2(i + 2) for i, g in enumerate(grades))


def brute_ndcg(ranking: Sequence[str], rel: Dict[str, int], k: int, exp_gain: bool = True) -> float:
    gain = (lambda g: 2.0 ** g - 1.0) if exp_gain else float
    got = [gain(rel.get(d, 0)) for d in ranking[:k]]
    ideal = sorted((gain(g) for g in rel.values() if g > 0), reverse=True)[:k]
    idcg = brute_dcg(ideal)
    return brute_dcg(got) / idcg if idcg > 0 else 0.0


def brute_recall(ranking: Sequence[str], rel: Dict[str, int], k: int) -> float:
    relevant = {d for d, g in rel.items() if g > 0}
    if not relevant:
        return 0.0
    return len(relevant & set(ranking[:k])) / len(relevant)


def snippets(scores: Sequence[float], prefix: str = "s") -> Tuple[List[Snippet], Dict[str, float]]:
    items = [Snippet(f"{prefix}{i:03d}", f"text {i}") for i in range(len(scores))]
    return items, {s.passage_id: float(v) for s, v in zip(items, scores)}


def simulate_failed_heapsort(items: Sequence, top_sorted: int) -> List:
    """Step-by-step d-ary heapsort in which every comparison fails (parent stays put).

    With no swaps during sift-down, each extraction just swaps the root with the
    last live slot.
    """
    a = list(items)
    size = len(a)
    out = []
    for _ in range(min(top_sorted, len(a))):
        a[0], a[size - 1] = a[size - 1], a[0]
        size -= 1
        out.append(a[size])
    return out + a[:size]
