"""Quantized multi-vector index: centroids, 1-bit residual codes, token pooling.

Every token vector is stored as the id of its nearest centroid plus one sign
bit per dimension.  A token is reconstructed as ``centroid + s * scales``
where ``s`` is +1 for a set bit and -1 otherwise.

On disk an index is a directory of fixed-layout little-endian files:

* ``meta.json``     build configuration and counts
* ``centroids.bin`` u32 k, u32 dim, f32[k*dim]
* ``scales.bin``    u32 dim, f32[dim]
* ``codes.bin``     u32 n, u32 dim, u32 centroid[n], u32 passage[n],
                    u32 token[n], u8 packed sign bits[n*ceil(dim/8)]
* ``postings.bin``  u32 k, u32 count[k], u32 code ids (grouped by centroid)
* ``passages.jsonl`` one passage per line, in passage ordinal order
* ``raw.bin``       optional, u32 n, u32 dim, f32[n*dim] unquantized vectors
"""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
import struct
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from .corpus import Passage
from .embed_io import TokenMatrix, token_hash
from .errors import ConfigError, ConsistencyError, DimError, FormatError, SizeError

log = logging.getLogger(__name__)

INDEX_FILES = ("meta.json", "centroids.bin", "scales.bin", "codes.bin", "postings.bin",
               "passages.jsonl")
RAW_FILE = "raw.bin"
_U32 = np.dtype("<u4")
_F32 = np.dtype("<f4")


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(1)[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            j = int(rng.integers(n))
        else:
            cum = np.cumsum(d2)
            j = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            j = min(j, n - 1)
        chosen.append(j)
        np.minimum(d2, ((x - x[j]) ** 2).sum(1), out=d2)
    return x[chosen].copy()


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator,
           max_iters: int = 25) -> Tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Stops at an assignment fixpoint or after ``max_iters`` updates.  Clusters
    that lose all members are re-seeded with the points farthest from their
    current centroid.  Returns ``(centroids, labels)`` with labels computed
    against the returned centroids.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if not 1 <= k <= n:
        raise SizeError(f"k-means needs 1 <= k <= n, got k={k}, n={n}")
    c = _kmeanspp(x, k, rng)
    labels = None
    for _ in range(max_iters):
        d = _sq_dists(x, c)
        new = d.argmin(1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(c)
        np.add.at(sums, labels, x)
        filled = counts > 0
        c[filled] = sums[filled] / counts[filled, None]
        empty = np.nonzero(~filled)[0]
        if empty.size:
            own = d[np.arange(n), labels].copy()
            for j in empty:
                far = int(np.argmax(own))
                c[j] = x[far]
                own[far] = -np.inf
    labels = _sq_dists(x, c).argmin(1)
    return c, labels


def train_centroids(sample, k: int, seed: int = 0, max_iters: int = 25) -> np.ndarray:
    sample = np.asarray(sample, dtype=np.float64)
    if sample.ndim != 2 or not 1 <= k <= len(sample):
        raise SizeError(f"cannot train {k} centroids on {len(sample)} vectors")
    centroids, _ = kmeans(sample, k, np.random.default_rng(seed), max_iters)
    return centroids


def default_k(n_tokens: int) -> int:
    """Power of two at or above sqrt(n_tokens)."""
    return 2 ** math.ceil(math.log2(math.sqrt(max(n_tokens, 1)))) if n_tokens > 1 else 1


# ---------------------------------------------------------------------------
# residual codes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TokenCode:
    centroid_id: int
    sign_bits: Tuple[int, ...]


def compute_scales(residuals) -> np.ndarray:
    residuals = np.asarray(residuals, dtype=np.float64)
    if residuals.size == 0:
        raise SizeError("cannot fit scales on an empty residual sample")
    return np.abs(residuals).mean(axis=0)


def quantize(v, centroids, scales=None) -> TokenCode:
    """Nearest centroid (lowest id on ties) and the signs of the residual."""
    v = np.asarray(v, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    if c.shape[1] != v.shape[0]:
        raise DimError(f"vector dim {v.shape[0]} != centroid dim {c.shape[1]}")
    cid = int(((c - v) ** 2).sum(1).argmin())
    bits = tuple(int(b) for b in (v - c[cid]) >= 0)
    return TokenCode(cid, bits)


def reconstruct(code: TokenCode, centroids, scales) -> np.ndarray:
    c = np.asarray(centroids, dtype=np.float64)[code.centroid_id]
    s = np.where(np.asarray(code.sign_bits, dtype=bool), 1.0, -1.0)
    return c + s * np.asarray(scales, dtype=np.float64)


def quantize_batch(x: np.ndarray, centroids: np.ndarray,
                   chunk: int = 8192) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`quantize` returning ``(centroid_ids, bool bits)``."""
    x64 = np.asarray(x, dtype=np.float64)
    c64 = np.asarray(centroids, dtype=np.float64)
    ids = np.empty(len(x64), dtype=np.int64)
    for lo in range(0, len(x64), chunk):
        ids[lo:lo + chunk] = _sq_dists(x64[lo:lo + chunk], c64).argmin(1)
    bits = (x64 - c64[ids]) >= 0
    return ids, bits


def reconstruct_batch(ids, bits, centroids, scales) -> np.ndarray:
    centroids = np.asarray(centroids, dtype=np.float32)
    scales = np.asarray(scales, dtype=np.float32)
    return centroids[ids] + np.where(bits, scales, -scales)


# ---------------------------------------------------------------------------
# token pooling
# ---------------------------------------------------------------------------

def pool_tokens(m: TokenMatrix, factor: int, seed: int = 0, max_iters: int = 25) -> TokenMatrix:
    """Shrink a passage to ``ceil(rows / factor)`` vectors by k-means.

    Output rows are unit-normalised cluster means, ordered by the smallest
    original token position in each cluster.
    """
    if factor < 1:
        raise ConfigError(f"pool factor must be >= 1, got {factor}")
    n = len(m)
    if factor == 1 or n <= 1:
        return TokenMatrix(m.passage_id, m.rows.copy())
    k = -(-n // factor)
    x = m.rows.astype(np.float64)
    cents, labels = kmeans(x, k, np.random.default_rng(seed), max_iters)
    pooled = []
    for j in range(k):
        members = np.nonzero(labels == j)[0]
        if members.size:
            mean = x[members].mean(0)
            first = int(members[0])
        else:
            mean = cents[j]
            first = n + j
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            # antipodal members cancel out; keep the earliest one
            mean = x[members[0]] if members.size else x[0]
            norm = np.linalg.norm(mean)
        pooled.append((first, mean / norm))
    pooled.sort(key=lambda t: t[0])
    return TokenMatrix(m.passage_id, np.stack([v for _, v in pooled]))


def _pool_seed(seed: int, passage_id: str) -> int:
    return token_hash(passage_id, seed)


# ---------------------------------------------------------------------------
# index
# ---------------------------------------------------------------------------

@dataclass
class IndexConfig:
    k: Optional[int] = None
    pool_factor: int = 1
    seed: int = 0
    sample_size: int = 1 << 16
    max_iters: int = 25
    store_raw: bool = False

    def __post_init__(self):
        if self.pool_factor < 1:
            raise ConfigError("pool_factor must be >= 1")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.sample_size < 1:
            raise ConfigError("sample_size must be >= 1")


@dataclass
class QuantizedIndex:
    centroids: np.ndarray          # (k, dim) float32
    scales: np.ndarray             # (dim,) float32
    code_centroid: np.ndarray      # (n,) int64
    code_bits: np.ndarray          # (n, dim) bool
    code_passage: np.ndarray       # (n,) int64 passage ordinal
    code_token: np.ndarray         # (n,) int64 token ordinal within passage
    postings: List[np.ndarray]     # centroid id -> code ids
    passages: List[Passage]
    meta: Dict = field(default_factory=dict)
    raw: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def n_codes(self) -> int:
        return len(self.code_centroid)

    @cached_property
    def offsets(self) -> np.ndarray:
        counts = np.bincount(self.code_passage, minlength=len(self.passages))
        return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    @cached_property
    def reconstructed(self) -> np.ndarray:
        return reconstruct_batch(self.code_centroid, self.code_bits, self.centroids, self.scales)

    @cached_property
    def id_rank(self) -> np.ndarray:
        """Position of each passage in ascending passage-id order (tie-breaking key)."""
        order = sorted(range(len(self.passages)), key=lambda i: self.passages[i].passage_id)
        rank = np.empty(len(order), dtype=np.int64)
        rank[order] = np.arange(len(order))
        return rank

    def passage_ordinal(self, passage_id: str) -> int:
        return self._ordinals[passage_id]

    @cached_property
    def _ordinals(self) -> Dict[str, int]:
        return {p.passage_id: i for i, p in enumerate(self.passages)}


def reservoir_sample(n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Algorithm R over positions ``0..n-1``; returns sorted positions."""
    if n <= size:
        return np.arange(n)
    res = np.arange(size)
    draws = rng.integers(0, np.arange(size, n) + 1)
    for offset, j in enumerate(draws):
        if j < size:
            res[j] = size + offset
    return np.sort(res)


def build_index(embeddings: Iterable[TokenMatrix], passage_table: Mapping[str, Passage],
                cfg: Optional[IndexConfig] = None, *, window=None, tokenizer_name="whitespace",
                encoder_tag="unknown", threads: int = 1) -> QuantizedIndex:
    cfg = cfg or IndexConfig()
    mats = list(embeddings)
    if not mats:
        raise SizeError("no embeddings to index")
    dim = mats[0].dim
    for m in mats:
        if m.dim != dim:
            raise DimError(f"{m.passage_id}: dim {m.dim} != {dim}")
        if m.passage_id not in passage_table:
            raise ConsistencyError(f"passage {m.passage_id!r} missing from passage table")
        if len(m) == 0:
            raise SizeError(f"passage {m.passage_id!r} has no token vectors")
    n_in = sum(len(m) for m in mats)

    def _pool(m):
        return pool_tokens(m, cfg.pool_factor, _pool_seed(cfg.seed, m.passage_id), cfg.max_iters)

    if cfg.pool_factor > 1:
        with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
            mats = list(ex.map(_pool, mats))

    vecs = np.concatenate([m.rows for m in mats]).astype(np.float32)
    n = len(vecs)
    rng = np.random.default_rng(cfg.seed)
    sample = vecs[reservoir_sample(n, cfg.sample_size, rng)]
    k = min(cfg.k or default_k(n), len(sample))
    centroids = train_centroids(sample, k, cfg.seed, cfg.max_iters).astype(np.float32)
    sample_ids, _ = quantize_batch(sample, centroids)
    residuals = sample.astype(np.float64) - centroids[sample_ids].astype(np.float64)
    scales = compute_scales(residuals).astype(np.float32)

    ids, bits = quantize_batch(vecs, centroids)
    code_passage = np.repeat(np.arange(len(mats)), [len(m) for m in mats])
    code_token = np.concatenate([np.arange(len(m)) for m in mats])
    postings = _postings(ids, k)

    passages = [passage_table[m.passage_id] for m in mats]
    meta = {
        "format": 1,
        "dim": int(dim),
        "k": int(k),
        "pool_factor": int(cfg.pool_factor),
        "seed": int(cfg.seed),
        "sample_size": int(cfg.sample_size),
        "max_iters": int(cfg.max_iters),
        "tokenizer": tokenizer_name,
        "encoder_tag": encoder_tag,
        "window": window.window if window else None,
        "stride": window.stride if window else None,
        "n_passages": len(passages),
        "n_tokens_in": int(n_in),
        "n_codes": int(n),
        "has_raw": bool(cfg.store_raw),
    }
    log.info("indexed %d passages: %d tokens in, %d codes, k=%d", len(passages), n_in, n, k)
    return QuantizedIndex(centroids, scales, ids, bits, code_passage, code_token, postings,
                          passages, meta, vecs if cfg.store_raw else None)


def _postings(ids: np.ndarray, k: int) -> List[np.ndarray]:
    order = np.argsort(ids, kind="stable")
    counts = np.bincount(ids, minlength=k)
    return np.split(order, np.cumsum(counts)[:-1])


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _u32(*values) -> bytes:
    return struct.pack("<" + "I" * len(values), *values)


def _write_files(index: QuantizedIndex, d: Path) -> None:
    n, dim, k = index.n_codes, index.dim, index.k
    (d / "meta.json").write_text(json.dumps(index.meta, indent=2, sort_keys=True) + "\n")
    with open(d / "centroids.bin", "wb") as fh:
        fh.write(_u32(k, dim))
        fh.write(index.centroids.astype(_F32).tobytes())
    with open(d / "scales.bin", "wb") as fh:
        fh.write(_u32(dim))
        fh.write(index.scales.astype(_F32).tobytes())
    with open(d / "codes.bin", "wb") as fh:
        fh.write(_u32(n, dim))
        for col in (index.code_centroid, index.code_passage, index.code_token):
            fh.write(col.astype(_U32).tobytes())
        fh.write(np.packbits(index.code_bits, axis=1, bitorder="little").tobytes())
    with open(d / "postings.bin", "wb") as fh:
        fh.write(_u32(k))
        fh.write(np.array([len(p) for p in index.postings], dtype=_U32).tobytes())
        for p in index.postings:
            fh.write(p.astype(_U32).tobytes())
    counts = np.diff(index.offsets)
    with open(d / "passages.jsonl", "w", encoding="utf-8") as fh:
        for p, c in zip(index.passages, counts):
            row = {"passage_id": p.passage_id, "doc_id": p.doc_id, "start": p.start,
                   "length": p.length, "n_codes": int(c)}
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    if index.raw is not None:
        with open(d / RAW_FILE, "wb") as fh:
            fh.write(_u32(n, dim))
            fh.write(index.raw.astype(_F32).tobytes())


def save_index(index: QuantizedIndex, out_dir) -> Path:
    """Write the index directory atomically (built in a sibling temp dir, then renamed)."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        _write_files(index, tmp)
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir


class _Reader:
    def __init__(self, path: Path):
        self.path = path
        self.buf = path.read_bytes()
        self.pos = 0

    def u32(self, count=1):
        arr = self.array(_U32, count)
        return [int(v) for v in arr] if count > 1 else int(arr[0])

    def array(self, dtype, count) -> np.ndarray:
        nbytes = np.dtype(dtype).itemsize * count
        if self.pos + nbytes > len(self.buf):
            raise FormatError(f"{self.path}: truncated")
        out = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos)
        self.pos += nbytes
        return out

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.pos} trailing bytes")


def load_index(index_dir) -> QuantizedIndex:
    d = Path(index_dir)
    missing = [f for f in INDEX_FILES if not (d / f).exists()]
    if missing:
        raise FormatError(f"{d}: not an index directory (missing {', '.join(missing)})")
    meta = json.loads((d / "meta.json").read_text())

    r = _Reader(d / "centroids.bin")
    k, dim = r.u32(2)
    centroids = r.array(_F32, k * dim).reshape(k, dim).astype(np.float32)
    r.done()

    r = _Reader(d / "scales.bin")
    if r.u32() != dim:
        raise FormatError(f"{d}: scales dim mismatch")
    scales = r.array(_F32, dim).astype(np.float32)
    r.done()

    r = _Reader(d / "codes.bin")
    n, cdim = r.u32(2)
    if cdim != dim:
        raise FormatError(f"{d}: codes dim mismatch")
    cols = [r.array(_U32, n).astype(np.int64) for _ in range(3)]
    nbytes = -(-dim // 8)
    packed = r.array(np.uint8, n * nbytes).reshape(n, nbytes)
    bits = np.unpackbits(packed, axis=1, count=dim, bitorder="little").astype(bool)
    r.done()

    r = _Reader(d / "postings.bin")
    if r.u32() != k:
        raise FormatError(f"{d}: postings k mismatch")
    counts = r.array(_U32, k).astype(np.int64)
    flat = r.array(_U32, int(counts.sum())).astype(np.int64)
    r.done()
    postings = np.split(flat, np.cumsum(counts)[:-1])

    passages = []
    with open(d / "passages.jsonl", encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            passages.append(Passage(row["passage_id"], row["doc_id"], row["start"], row["length"]))

    raw = None
    if (d / RAW_FILE).exists():
        r = _Reader(d / RAW_FILE)
        rn, rdim = r.u32(2)
        if (rn, rdim) != (n, dim):
            raise FormatError(f"{d}: raw store shape mismatch")
        raw = r.array(_F32, n * dim).reshape(n, dim).astype(np.float32)
        r.done()

    if int(counts.sum()) != n:
        raise FormatError(f"{d}: postings cover {int(counts.sum())} of {n} codes")
    return QuantizedIndex(centroids, scales, cols[0], bits, cols[1], cols[2], postings,
                          passages, meta, raw)
