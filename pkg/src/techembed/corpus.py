"""Documents, tokenization and overlapping token-window chunking."""

from __future__ import annotations

import hashlib
import io
import json
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from sklearn.base import BaseEstimator, TransformerMixin

__all__ = [
    "Chunk",
    "Chunker",
    "Corpus",
    "CorpusError",
    "Document",
    "Token",
    "Vocabulary",
    "chunk_document",
    "ingest",
    "tokenize",
]

DEFAULT_VOCAB_SIZE = 8192
DEFAULT_CHUNK_SIZE = 256
DEFAULT_OVERLAP = 32
PAD = "<pad>"

# word runs (letters, digits, underscore) or runs of anything else non-space
_TOKEN_RE = re.compile(r"\w+|[^\w\s]+")


class CorpusError(ValueError):
    """Malformed corpus input or invalid chunking configuration."""


@dataclass(frozen=True)
class Token:
    surface: str
    id: int


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    title: str = ""
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.doc_id or any(c.isspace() for c in self.doc_id):
            raise CorpusError(f"doc_id must be non-empty and contain no whitespace: {self.doc_id!r}")
        if not " ".join(self.text.split()):
            raise CorpusError(f"document {self.doc_id!r} has empty text")


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    text: str
    token_start: int
    token_end: int
    ordinal: int

    @property
    def n_tokens(self):
        return self.token_end - self.token_start


class Vocabulary:
    """Token-surface to id map with a hashed out-of-vocabulary band.

    Ids ``[0, oov_start)`` are assigned to known surfaces (id 0 is padding);
    the top quarter ``[oov_start, size)`` is reserved for hashed unknowns.
    """

    def __init__(self, tokens: Sequence[str] = (), size: int = DEFAULT_VOCAB_SIZE):
        if size < 8:
            raise ValueError("vocabulary size must be >= 8")
        self.size = size
        self.oov_start = size - size // 4
        tokens = [PAD] + [t for t in tokens if t != PAD]
        if len(tokens) > self.oov_start:
            raise ValueError(
                f"{len(tokens)} known tokens do not fit below the OOV band at {self.oov_start}"
            )
        self.tokens = tuple(tokens)
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and (self.size, self.tokens) == (other.size, other.tokens)

    def id_of(self, surface: str) -> int:
        idx = self._index.get(surface)
        if idx is not None:
            return idx
        digest = hashlib.blake2b(surface.encode("utf-8"), digest_size=8).digest()
        return self.oov_start + int.from_bytes(digest, "little") % (self.size - self.oov_start)

    @classmethod
    def build(cls, texts: Iterable[str], size: int = DEFAULT_VOCAB_SIZE, min_count: int = 1):
        counts = Counter()
        for text in texts:
            counts.update(m.group().lower() for m in _TOKEN_RE.finditer(text))
        ranked = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
        capacity = size - size // 4 - 1
        return cls(ranked[:capacity], size=size)

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, size: int = DEFAULT_VOCAB_SIZE):
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        return cls([t for t in lines if t], size=size)


_HASH_ONLY = Vocabulary()


def _spans(text: str) -> list[tuple[str, int, int]]:
    return [(m.group().lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def tokenize(text: str, vocab: Vocabulary | None = None) -> list[Token]:
    """Lowercase ``text`` and split it into word and punctuation-run tokens.

    >>> [t.surface for t in tokenize("Set clock_freq=100MHz.")]
    ['set', 'clock_freq', '=', '100mhz', '.']
    """
    vocab = vocab or _HASH_ONLY
    return [Token(s, vocab.id_of(s)) for s, _, _ in _spans(text)]


def token_ids(text: str, vocab: Vocabulary | None = None) -> list[int]:
    vocab = vocab or _HASH_ONLY
    return [vocab.id_of(s) for s, _, _ in _spans(text)]


def window_spans(n_tokens: int, chunk_size: int, overlap: int) -> list[tuple[int, int]]:
    if chunk_size < 8:
        raise CorpusError(f"chunk_size must be >= 8, got {chunk_size}")
    if not 0 <= overlap < chunk_size:
        raise CorpusError(f"overlap must satisfy 0 <= overlap < chunk_size, got {overlap}")
    if n_tokens <= chunk_size:
        return [(0, n_tokens)]
    stride = chunk_size - overlap
    spans = []
    start = 0
    while start + chunk_size < n_tokens:
        spans.append((start, start + chunk_size))
        start += stride
    spans.append((n_tokens - chunk_size, n_tokens))
    return spans


def chunk_document(
    doc: Document, chunk_size: int = DEFAULT_CHUNK_SIZE, overlap: int = DEFAULT_OVERLAP
) -> list[Chunk]:
    """Split ``doc`` into overlapping token windows.

    Windows start every ``chunk_size - overlap`` tokens; the last window is
    right-anchored at the end of the document so no token is dropped. Chunk
    text is the original document substring covering the window.
    """
    spans = _spans(doc.text)
    chunks = []
    for ordinal, (start, end) in enumerate(window_spans(len(spans), chunk_size, overlap)):
        text = doc.text[spans[start][1] : spans[end - 1][2]]
        chunks.append(Chunk(f"{doc.doc_id}#{ordinal}", doc.doc_id, text, start, end, ordinal))
    return chunks


@dataclass(frozen=True)
class Corpus:
    documents: tuple[Document, ...]
    chunks: tuple[Chunk, ...] = ()

    def __post_init__(self):
        seen = set()
        for doc in self.documents:
            if doc.doc_id in seen:
                raise CorpusError(f"duplicate doc_id {doc.doc_id!r}")
            seen.add(doc.doc_id)

    def __len__(self):
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    def document(self, doc_id: str) -> Document:
        for doc in self.documents:
            if doc.doc_id == doc_id:
                return doc
        raise KeyError(doc_id)

    def chunk_lookup(self) -> dict[str, Chunk]:
        return {c.chunk_id: c for c in self.chunks}

    def chunked(self, chunk_size: int = DEFAULT_CHUNK_SIZE, overlap: int = DEFAULT_OVERLAP) -> "Corpus":
        chunks = [c for doc in self.documents for c in chunk_document(doc, chunk_size, overlap)]
        return Corpus(self.documents, tuple(chunks))

    def to_jsonl(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for doc in self.documents:
                row = {"doc_id": doc.doc_id, "title": doc.title, "text": doc.text}
                if doc.metadata:
                    row["metadata"] = dict(doc.metadata)
                fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def _lines(source) -> Iterator[str]:
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            yield from fh
    elif isinstance(source, io.IOBase) or hasattr(source, "read"):
        yield from source
    else:
        for path in source:
            yield from _lines(path)


def ingest(source) -> Corpus:
    """Read a JSONL corpus from a path, a list of paths, or an open text stream."""
    docs = []
    seen = set()
    for lineno, line in enumerate(_lines(source), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(row, dict):
            raise CorpusError(f"line {lineno}: expected a JSON object")
        for key in ("doc_id", "text"):
            if not isinstance(row.get(key), str):
                raise CorpusError(f"line {lineno}: missing or non-string field {key!r}")
        metadata = row.get("metadata") or {}
        if not isinstance(metadata, dict):
            raise CorpusError(f"line {lineno}: metadata must be an object")
        if row["doc_id"] in seen:
            raise CorpusError(f"line {lineno}: duplicate doc_id {row['doc_id']!r}")
        seen.add(row["doc_id"])
        try:
            docs.append(
                Document(
                    row["doc_id"],
                    row["text"],
                    title=str(row.get("title") or ""),
                    metadata={str(k): str(v) for k, v in metadata.items()},
                )
            )
        except CorpusError as exc:
            raise CorpusError(f"line {lineno}: {exc}") from None
    return Corpus(tuple(docs))


def write_chunks(chunks: Iterable[Chunk], path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for c in chunks:
            row = {
                "chunk_id": c.chunk_id,
                "doc_id": c.doc_id,
                "ordinal": c.ordinal,
                "text": c.text,
                "token_end": c.token_end,
                "token_start": c.token_start,
            }
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_chunks(path) -> list[Chunk]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                out.append(Chunk(r["chunk_id"], r["doc_id"], r["text"], r["token_start"], r["token_end"], r["ordinal"]))
    return out


class Chunker(TransformerMixin, BaseEstimator):
    """Stateless transformer from documents to their chunks."""

    def __init__(self, chunk_size=DEFAULT_CHUNK_SIZE, overlap=DEFAULT_OVERLAP):
        self.chunk_size = chunk_size
        self.overlap = overlap

    def fit(self, X=None, y=None):
        window_spans(0, self.chunk_size, self.overlap)
        return self

    def transform(self, X):
        return [c for doc in X for c in chunk_document(doc, self.chunk_size, self.overlap)]
