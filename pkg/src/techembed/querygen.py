"""Synthetic query generation from chunks and the query-set diversity measure."""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

from .corpus import Chunk, tokenize
from .textgen import BackendError, GenRequest

__all__ = [
    "QUESTION_TEMPLATES",
    "QueryGenerationError",
    "SyntheticQuery",
    "content_keywords",
    "distinct_bigram_ratio",
    "diversity",
    "generate_queries",
    "query_entropy",
    "read_queries",
    "write_queries",
]

PROVENANCES = ("real", "llm", "template")

# definition, how-to, parameter, error, comparison, listing, location, constraint
QUESTION_TEMPLATES = (
    "what is {keyword} and how does it relate to {keyword2}?",
    "how do i configure {keyword} for {keyword2}?",
    "which parameter sets {keyword} when using {keyword2}?",
    "why does {keyword} report an error with {keyword2}?",
    "what is the difference between {keyword} and {keyword2}?",
    "list the options for {keyword} and {keyword2}",
    "where are {keyword} and {keyword2} described?",
    "what constraints apply to {keyword} with {keyword2}?",
)

SYSTEM_PROMPT = (
    "You write one short search question that a user of this technical "
    "documentation might ask. The question must be answerable from the passage."
)
USER_PROMPT = "Passage:\n{passage}\n\nWrite one question about {keyword} answerable from the passage."

STOPWORDS = frozenset(
    """a an and are as at be by can do does for from has have how if in into is it its
    of on or that the their then there these this to was were what when where which
    while who why will with you your not no all any each than so such also may must
    should used use using""".split()
)


class QueryGenerationError(RuntimeError):
    """Backend failure mid-generation; ``cursor`` is the first chunk index not written."""

    def __init__(self, message, cursor, written):
        super().__init__(message)
        self.cursor = cursor
        self.written = written


@dataclass(frozen=True)
class SyntheticQuery:
    query_id: str
    text: str
    source_chunk_id: str
    provenance: str = "template"

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"query {self.query_id!r} has empty text")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if any(c.isspace() for c in self.query_id) or not self.query_id:
            raise ValueError(f"query_id must be non-empty without whitespace: {self.query_id!r}")


def content_keywords(text: str, n: int = 2) -> list[str]:
    """Top ``n`` content tokens by frequency, ties broken alphabetically."""
    counts = Counter(
        t.surface
        for t in tokenize(text)
        if t.surface[0].isalnum() or t.surface[0] == "_"
        if t.surface not in STOPWORDS and not t.surface.isdigit() and len(t.surface) > 1
    )
    return sorted(counts, key=lambda s: (-counts[s], s))[:n]


def _request(chunk: Chunk, ordinal: int, seed: int) -> GenRequest:
    kws = content_keywords(chunk.text) or ["this"]
    kw2 = kws[1] if len(kws) > 1 else kws[0]
    return GenRequest(
        system_prompt=SYSTEM_PROMPT,
        user_prompt=USER_PROMPT,
        max_tokens=64,
        temperature=0.7,
        seed=_mix(seed, chunk.chunk_id, ordinal),
        slots={"keyword": kws[0], "keyword2": kw2, "passage": chunk.text},
    )


def _mix(seed: int, chunk_id: str, ordinal: int) -> int:
    h = hashlib.blake2b(f"{seed}|{chunk_id}|{ordinal}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little")


def generate_queries(
    chunks: Sequence[Chunk],
    backend,
    n_per_chunk: int = 2,
    seed: int = 0,
    out_path=None,
    start: int = 0,
) -> list[SyntheticQuery]:
    """Ask ``backend`` for ``n_per_chunk`` questions about every chunk.

    Output order is (chunk order, query ordinal) whatever the completion order.
    When ``out_path`` is given the queries are streamed there; on a backend
    failure everything before the failing chunk is flushed and the raised
    :class:`QueryGenerationError` carries the resume cursor, which can be
    passed back as ``start`` (the file is then appended to).
    """
    if n_per_chunk < 1:
        raise ValueError("n_per_chunk must be >= 1")
    provenance = "template" if getattr(backend, "kind", "template") == "template" else "llm"
    workers = max(1, int(getattr(backend, "max_in_flight", 1)))

    def one(chunk):
        out = []
        for j in range(n_per_chunk):
            text = " ".join(backend.generate(_request(chunk, j, seed)).split())
            out.append(SyntheticQuery(f"{chunk.chunk_id}/q{j}", text, chunk.chunk_id, provenance))
        return out

    results: list[SyntheticQuery] = []
    fh = open(out_path, "a" if start else "w", encoding="utf-8", newline="\n") if out_path else None
    try:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pending = [pool.submit(one, c) for c in chunks[start:]]
            for i, fut in enumerate(pending, start=start):
                try:
                    batch = fut.result()
                except BackendError as exc:
                    for f in pending:
                        f.cancel()
                    if fh:
                        fh.flush()
                    raise QueryGenerationError(
                        f"generation stopped at chunk {i} ({chunks[i].chunk_id}): {exc}", i, results
                    ) from exc
                results.extend(batch)
                if fh:
                    for q in batch:
                        fh.write(_dumps(q) + "\n")
    finally:
        if fh:
            fh.close()
    return results


def _dumps(q: SyntheticQuery) -> str:
    return json.dumps(
        {"provenance": q.provenance, "query_id": q.query_id, "source_chunk_id": q.source_chunk_id, "text": q.text},
        ensure_ascii=False,
        sort_keys=True,
    )


def write_queries(queries: Iterable[SyntheticQuery], path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for q in queries:
            fh.write(_dumps(q) + "\n")


def read_queries(path) -> list[SyntheticQuery]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                out.append(
                    SyntheticQuery(r["query_id"], r["text"], r.get("source_chunk_id", ""), r.get("provenance", "real"))
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return out


def query_entropy(q) -> float:
    """Shannon entropy (bits) of the unigram token distribution of a query."""
    text = q.text if isinstance(q, SyntheticQuery) else q
    counts = Counter(t.surface for t in tokenize(text))
    n = sum(counts.values())
    if n == 0:
        raise ValueError("query has no tokens")
    h = -math.fsum((c / n) * math.log2(c / n) for c in counts.values())
    return h if h > 0 else 0.0


def diversity(queries: Sequence) -> float:
    """Mean per-query entropy over the combined real and synthetic query set."""
    if not queries:
        raise ValueError("diversity of an empty query set is undefined")
    return math.fsum(query_entropy(q) for q in queries) / len(queries)


def distinct_bigram_ratio(queries: Sequence) -> float:
    """Distinct token bigrams over total bigrams across the set (inter-query variety).

    Reported alongside :func:`diversity`, which only measures within-query entropy.
    """
    total = 0
    distinct = set()
    for q in queries:
        text = q.text if isinstance(q, SyntheticQuery) else q
        s = [t.surface for t in tokenize(text)]
        pairs = list(zip(s, s[1:]))
        total += len(pairs)
        distinct.update(pairs)
    return len(distinct) / total if total else 0.0
