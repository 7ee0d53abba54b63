"""Exact top-k dense retrieval over unit-norm chunk embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import container
from .corpus import Chunk
from .summarizer import Summary, contextualize_chunk

__all__ = ["ExactIndex", "VectorIndexError", "VectorIndex", "build_index", "load_index", "save_index", "search"]

INDEX_MAGIC = b"TIDX"


class VectorIndexError(ValueError):
    """Corrupt index file, dimension mismatch or encoder fingerprint mismatch."""


@dataclass(frozen=True)
class VectorIndex:
    dim: int
    ids: tuple[str, ...]
    vectors: np.ndarray
    fingerprint: str = ""
    use_summaries: bool = False

    def __post_init__(self):
        if self.vectors.shape != (len(self.ids), self.dim):
            raise VectorIndexError(f"vectors have shape {self.vectors.shape}, expected {(len(self.ids), self.dim)}")
        if len(set(self.ids)) != len(self.ids):
            raise VectorIndexError("chunk ids in an index must be unique")

    def __len__(self):
        return len(self.ids)

    def search(self, query, k: int):
        return search(self, query, k)


def build_index(chunks: Sequence[Chunk], encoder, summaries: Mapping[str, Summary] | None = None,
                use_summaries: bool = True, use_prompt: bool | None = None) -> VectorIndex:
    """Embed every chunk (optionally prefixed by its document summary) in corpus order."""
    texts = []
    for c in chunks:
        if use_summaries:
            if summaries is None or c.doc_id not in summaries:
                raise VectorIndexError(f"no summary for document {c.doc_id!r}")
            texts.append(contextualize_chunk(c, summaries[c.doc_id]))
        else:
            texts.append(c.text)
    vecs = encoder.embed_documents(texts, use_prompt) if texts else np.zeros((0, encoder.config.dim))
    return VectorIndex(encoder.config.dim, tuple(c.chunk_id for c in chunks), vecs, encoder.fingerprint(), use_summaries)


def search(index: VectorIndex, query, k: int) -> list[tuple[str, float]]:
    """Top ``k`` entries by dot product; ties go to the smaller chunk id."""
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dim,):
        raise VectorIndexError(f"query has shape {query.shape}, index dim is {index.dim}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if not len(index):
        return []
    scores = index.vectors @ query
    # lexsort: last key is primary
    order = np.lexsort((np.asarray(index.ids), -scores))[:k]
    return [(index.ids[i], float(scores[i])) for i in order]


def save_index(index: VectorIndex, path) -> None:
    meta = {
        "dim": index.dim,
        "fingerprint": index.fingerprint,
        "ids": list(index.ids),
        "use_summaries": index.use_summaries,
    }
    container.write(path, INDEX_MAGIC, meta, {"vectors": np.asarray(index.vectors, dtype=np.float64)})


def load_index(path, fingerprint: str | None = None, allow_mismatch: bool = False) -> VectorIndex:
    """Read an index; with ``fingerprint`` given, refuse one built by a different encoder."""
    try:
        meta, tensors = container.read(path, INDEX_MAGIC)
    except container.ContainerError as exc:
        raise VectorIndexError(f"{path}: {exc}") from None
    vectors = tensors["vectors"].reshape(len(meta["ids"]), meta["dim"])
    index = VectorIndex(meta["dim"], tuple(meta["ids"]), vectors, meta["fingerprint"], meta.get("use_summaries", False))
    if fingerprint is not None and fingerprint != index.fingerprint and not allow_mismatch:
        raise VectorIndexError(
            f"{path}: index was built with encoder {index.fingerprint[:12]}, "
            f"not {fingerprint[:12]} (pass allow_mismatch to override)"
        )
    return index


class ExactIndex(BaseEstimator):
    """Estimator-style wrapper: ``fit`` stores unit vectors, ``kneighbors`` searches."""

    def __init__(self, k=10):
        self.k = k

    def fit(self, X, ids=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {X.shape}")
        ids = tuple(ids) if ids is not None else tuple(f"{i:08d}" for i in range(len(X)))
        self.index_ = VectorIndex(X.shape[1], ids, X)
        return self

    def kneighbors(self, X, k=None):
        check_is_fitted(self, "index_")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return [search(self.index_, x, k or self.k) for x in X]
