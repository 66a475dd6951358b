"""Documents, topics and passage windowing."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional

from .errors import ConfigError, DupError, FormatError

TOPIC_FIELDS = ("topic_id", "title", "description")


@dataclass(frozen=True)
class Document:
    doc_id: str
    body: str
    title: Optional[str] = None

    def __post_init__(self):
        if not self.doc_id:
            raise FormatError("document id must be non-empty")


@dataclass(frozen=True)
class Topic:
    topic_id: str
    title: str
    description: str

    def __post_init__(self):
        if not self.topic_id:
            raise FormatError("topic id must be non-empty")


@dataclass(frozen=True)
class Passage:
    passage_id: str
    doc_id: str
    start: int
    length: int

    @property
    def end(self) -> int:
        return self.start + self.length

    @property
    def ordinal(self) -> int:
        return int(self.passage_id.rsplit("#", 1)[1])


@dataclass(frozen=True)
class WindowConfig:
    window: int = 180
    stride: int = 90

    def __post_init__(self):
        if not 1 <= self.stride <= self.window:
            raise ConfigError(
                f"invalid window config: need 1 <= stride ({self.stride}) <= window ({self.window})"
            )


# Default overlapping scheme and the non-overlapping 450-token scheme.
DEFAULT_WINDOW = WindowConfig(180, 90)
LONG_WINDOW = WindowConfig(450, 450)


def whitespace_tokenize(text: str) -> List[str]:
    return text.split()


TOKENIZERS: Dict[str, Callable[[str], List[str]]] = {
    "whitespace": whitespace_tokenize,
}


def get_tokenizer(name: str = "whitespace") -> Callable[[str], List[str]]:
    try:
        return TOKENIZERS[name]
    except KeyError:
        raise ConfigError(f"unknown tokenizer {name!r}; known: {sorted(TOKENIZERS)}") from None


def tokenize(text: str, tokenizer: str = "whitespace") -> List[str]:
    """Split ``text`` into tokens with the named strategy (whitespace by default)."""
    return get_tokenizer(tokenizer)(text)


def window_passages(tokens, cfg: WindowConfig, doc_id: str = "") -> List[Passage]:
    """Cut a token sequence into windows starting at multiples of ``cfg.stride``.

    A window is emitted only if the previous one did not already reach the
    end of the document, so the last window may be shorter than
    ``cfg.window`` but is never a suffix of its predecessor.
    """
    n = len(tokens)
    passages: List[Passage] = []
    start = 0
    while start < n:
        length = min(cfg.window, n - start)
        passages.append(Passage(f"{doc_id}#{len(passages)}", doc_id, start, length))
        if start + length >= n:
            break
        start += cfg.stride
    return passages


def build_query_text(topic: Topic) -> str:
    return topic.title + " " + topic.description


def passage_text(tokens: List[str], passage: Passage) -> str:
    return " ".join(tokens[passage.start:passage.end])


def _read_jsonl(path) -> Iterator[tuple]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise FormatError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def read_documents(path) -> Dict[str, Document]:
    """Load NeuCLIR-style JSONL (``id``, ``title``, ``text``); extra keys are ignored."""
    docs: Dict[str, Document] = {}
    for lineno, obj in _read_jsonl(path):
        if "id" not in obj or "text" not in obj:
            raise FormatError(f"{path}:{lineno}: document needs 'id' and 'text'")
        doc_id = str(obj["id"])
        if doc_id in docs:
            raise DupError(f"{path}:{lineno}: duplicate document id {doc_id!r}")
        docs[doc_id] = Document(doc_id, obj["text"] or "", obj.get("title"))
    return docs


def read_topics(path) -> Dict[str, Topic]:
    topics: Dict[str, Topic] = {}
    for lineno, obj in _read_jsonl(path):
        unknown = sorted(set(obj) - set(TOPIC_FIELDS))
        if unknown:
            raise FormatError(f"{path}:{lineno}: unknown topic field(s): {', '.join(unknown)}")
        missing = [f for f in TOPIC_FIELDS if f not in obj]
        if missing:
            raise FormatError(f"{path}:{lineno}: missing topic field(s): {', '.join(missing)}")
        topic = Topic(str(obj["topic_id"]), obj["title"], obj["description"])
        if topic.topic_id in topics:
            raise DupError(f"{path}:{lineno}: duplicate topic id {topic.topic_id!r}")
        topics[topic.topic_id] = topic
    return topics


def write_documents(docs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            row = {"id": doc.doc_id, "title": doc.title, "text": doc.body}
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def write_topics(topics, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in topics:
            row = {"topic_id": t.topic_id, "title": t.title, "description": t.description}
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def passage_table(docs: Dict[str, Document], cfg: WindowConfig,
                  tokenizer: str = "whitespace") -> Dict[str, Passage]:
    """Window every document body; keys are passage ids in document order."""
    table: Dict[str, Passage] = {}
    tok = get_tokenizer(tokenizer)
    for doc in docs.values():
        for p in window_passages(tok(doc.body), cfg, doc.doc_id):
            table[p.passage_id] = p
    return table

