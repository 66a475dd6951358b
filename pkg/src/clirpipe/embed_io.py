"""Embedding exchange format and a deterministic synthetic embedder.

Data file layout (little-endian)::

    b"LFV1" | u32 dim | record*
    record = u16 id_len | id bytes (utf-8) | u32 n_rows | n_rows * dim * f32

A JSON manifest sits next to the data file at ``<path>.manifest.json``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DimError, DupError, FormatError, NormError

MAGIC = b"LFV1"
NORM_TOL = 1e-4
_F32 = np.dtype("<f4")


@dataclass
class TokenMatrix:
    passage_id: str
    rows: np.ndarray

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2:
            raise DimError(f"{self.passage_id}: rows must be a 2-d array")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return self.rows.shape[0]


@dataclass
class EmbeddingManifest:
    dim: int
    count: int
    tokenizer_name: str = "whitespace"
    encoder_tag: str = "unknown"


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def write_embeddings(matrices: Iterable[TokenMatrix], path, tokenizer_name="whitespace",
                     encoder_tag="unknown") -> EmbeddingManifest:
    path = Path(path)
    seen = set()
    dim = None
    count = 0
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", 0))  # patched once the dim is known
            for m in matrices:
                if dim is None:
                    dim = m.dim
                elif m.dim != dim:
                    raise DimError(f"{m.passage_id}: dim {m.dim} != {dim}")
                if m.passage_id in seen:
                    raise DupError(f"duplicate passage id {m.passage_id!r}")
                seen.add(m.passage_id)
                pid = m.passage_id.encode("utf-8")
                fh.write(struct.pack("<H", len(pid)))
                fh.write(pid)
                fh.write(struct.pack("<I", len(m)))
                fh.write(m.rows.astype(_F32, copy=False).tobytes())
                count += 1
            fh.seek(len(MAGIC))
            fh.write(struct.pack("<I", dim or 0))
    except BaseException:
        path.unlink(missing_ok=True)
        raise
    manifest = EmbeddingManifest(dim or 0, count, tokenizer_name, encoder_tag)
    manifest_path(path).write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> EmbeddingManifest:
    mpath = manifest_path(path)
    try:
        raw = json.loads(mpath.read_text())
        return EmbeddingManifest(**raw)
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, TypeError) as exc:
        raise FormatError(f"{mpath}: bad manifest ({exc})") from None


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated embedding file while reading {what}")
    return buf


def read_embeddings(path, check_norms: bool = True) -> Iterator[TokenMatrix]:
    """Yield matrices in stored order, validating layout, dims and row norms."""
    manifest = read_manifest(path)
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise FormatError(f"{path}: bad magic header")
        (dim,) = struct.unpack("<I", _read_exact(fh, 4, "dim"))
        if dim != manifest.dim:
            raise FormatError(f"{path}: header dim {dim} disagrees with manifest dim {manifest.dim}")
        count = 0
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise FormatError("truncated embedding file while reading record header")
            (id_len,) = struct.unpack("<H", head)
            pid = _read_exact(fh, id_len, "passage id").decode("utf-8")
            (n_rows,) = struct.unpack("<I", _read_exact(fh, 4, "row count"))
            if n_rows == 0:
                raise FormatError(f"{pid}: record with zero rows")
            data = _read_exact(fh, n_rows * dim * 4, f"rows of {pid}")
            rows = np.frombuffer(data, dtype=_F32).reshape(n_rows, dim)
            if check_norms:
                norms = np.linalg.norm(rows.astype(np.float64), axis=1)
                bad = np.nonzero(np.abs(norms - 1.0) > NORM_TOL)[0]
                if bad.size:
                    raise NormError(f"{pid}: row {int(bad[0])} has norm {norms[bad[0]]:.6f}")
            count += 1
            yield TokenMatrix(pid, rows.copy())
        if count != manifest.count:
            raise FormatError(f"{path}: manifest says {manifest.count} matrices, found {count}")


def token_hash(token: str, seed: int) -> int:
    h = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                        key=struct.pack("<q", seed))
    return int.from_bytes(h.digest(), "little")


@lru_cache(maxsize=1 << 16)
def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    # Philox is counter-based; keying it by the token hash makes every token
    # an independent stream with no shared state.
    gen = np.random.Generator(np.random.Philox(key=token_hash(token, seed)))
    v = gen.standard_normal(dim)
    v /= np.linalg.norm(v)
    out = v.astype(np.float32)
    out.setflags(write=False)
    return out


def synthetic_embed(tokens: Sequence[str], dim: int, seed: int = 0,
                    passage_id: str = "") -> TokenMatrix:
    """Map every token to a pseudo-random unit vector determined by (token, seed)."""
    if dim < 2:
        raise DimError("synthetic embeddings need dim >= 2")
    rows = np.empty((len(tokens), dim), dtype=np.float32)
    for i, tok in enumerate(tokens):
        rows[i] = _token_vector(tok, dim, seed)
    return TokenMatrix(passage_id, rows)


def synthetic_tag(dim: int, seed: int) -> str:
    return f"synthetic:{dim}:{seed}"


def parse_synthetic_tag(tag: str):
    """Return ``(dim, seed)`` for a synthetic encoder tag, else ``None``."""
    parts = tag.split(":")
    if len(parts) == 3 and parts[0] == "synthetic":
        return int(parts[1]), int(parts[2])
    return None
