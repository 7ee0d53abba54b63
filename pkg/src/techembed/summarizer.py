"""Attention-weighted extractive summaries used as chunk context.

Each sentence embedding ``e`` gets the additive-attention score
``u . tanh(W e)``; a softmax over the document's sentences gives the
weights, and the ``m`` heaviest sentences (in document order) form the
summary. ``W`` and ``u`` are fitted without labels so that the
attention-weighted mixture of sentence embeddings points the same way as the
embedding of the whole document.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff import Tensor, l2_normalize, softmax
from .corpus import Chunk, Document, token_ids, tokenize

__all__ = [
    "AttentionSummarizer",
    "Sentence",
    "Summary",
    "SummaryWeights",
    "attention_scores",
    "contextualize_chunk",
    "extract_summary",
    "split_sentences",
    "summary_objective",
    "train_summarizer",
]

_BOUNDARY = re.compile(r"(?<=[.!?])\s+|\n+")
MIN_SENTENCE_TOKENS = 3


class SummarizerError(RuntimeError):
    pass


@dataclass(frozen=True)
class Sentence:
    doc_id: str
    ordinal: int
    text: str
    token_ids: tuple[int, ...]


@dataclass(frozen=True)
class SummaryWeights:
    W: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        if self.W.ndim != 2 or self.W.shape[0] != self.W.shape[1] or self.u.shape != (self.W.shape[0],):
            raise ValueError(f"W must be d x d and u length d, got {self.W.shape} and {self.u.shape}")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.u))):
            raise ValueError("summary weights must be finite")

    @property
    def dim(self):
        return self.u.shape[0]

    def as_tensors(self):
        return {"W_s": self.W, "u": self.u}

    @classmethod
    def from_tensors(cls, tensors):
        return cls(np.asarray(tensors["W_s"], dtype=np.float64), np.asarray(tensors["u"], dtype=np.float64))

    @classmethod
    def random(cls, dim: int, seed: int):
        rng = np.random.default_rng(seed)
        W = rng.normal(0.0, 1.0 / math.sqrt(dim), (dim, dim))
        u = rng.normal(0.0, 1.0 / math.sqrt(dim), dim)
        # float32-representable so the weights survive a checkpoint round trip
        return cls(_f32(W), _f32(u))


@dataclass(frozen=True)
class Summary:
    doc_id: str
    selected: tuple[int, ...]
    text: str
    weights: tuple[float, ...] = ()


def split_sentences(doc: Document, vocab=None) -> list[Sentence]:
    """Split on ``.``/``!``/``?`` followed by whitespace and on newlines.

    Fragments under three tokens are merged into the previous sentence, or
    into the next one when there is no previous sentence.
    """
    pieces = [p.strip() for p in _BOUNDARY.split(doc.text) if p and p.strip()]
    merged: list[str] = []
    carry = ""
    for piece in pieces:
        if carry:
            piece = carry + " " + piece
            carry = ""
        if len(tokenize(piece)) < MIN_SENTENCE_TOKENS:
            if merged:
                merged[-1] = merged[-1] + " " + piece
            else:
                carry = piece
            continue
        merged.append(piece)
    if carry:
        merged.append(carry)
    return [Sentence(doc.doc_id, i, s, tuple(token_ids(s, vocab))) for i, s in enumerate(merged)]


def _scores(E, W, u):
    """Additive attention weights; works on arrays or autodiff tensors."""
    return softmax((E @ W.transpose(1, 0)).tanh() @ u, axis=0)


def _sentence_embeddings(sentences: Sequence[Sentence], encoder) -> np.ndarray:
    return encoder.encode_ids([list(s.token_ids) for s in sentences], "d", use_prompt=False)


def attention_scores(doc: Document, weights: SummaryWeights, encoder, sentences=None) -> np.ndarray:
    sentences = sentences if sentences is not None else split_sentences(doc, encoder.vocab)
    if weights.dim != encoder.config.dim:
        raise ValueError(f"summary weights have dim {weights.dim}, encoder has dim {encoder.config.dim}")
    E = _sentence_embeddings(sentences, encoder)
    return _scores(Tensor(E), Tensor(weights.W), Tensor(weights.u)).data


def select_top(weights: Sequence[float], m: int) -> list[int]:
    """Indices of the ``m`` largest weights (ties to the lower index), ascending."""
    order = sorted(range(len(weights)), key=lambda i: (-weights[i], i))
    return sorted(order[:m])


def extract_summary(doc: Document, weights: SummaryWeights, encoder, m: int = 3) -> Summary:
    if m < 1:
        raise ValueError("m must be >= 1")
    sentences = split_sentences(doc, encoder.vocab)
    w = attention_scores(doc, weights, encoder, sentences)
    chosen = select_top(list(w), m)
    return Summary(doc.doc_id, tuple(chosen), " ".join(sentences[i].text for i in chosen), tuple(float(x) for x in w))


def summary_objective(W, u, sentence_embs: Sequence[np.ndarray], doc_embs: np.ndarray) -> Tensor:
    """Mean cosine between each document's attention mixture and its full embedding.

    ``W`` and ``u`` may be tensors requiring gradients.
    """
    W = W if isinstance(W, Tensor) else Tensor(W)
    u = u if isinstance(u, Tensor) else Tensor(u)
    total = None
    for E, target in zip(sentence_embs, doc_embs):
        a = _scores(Tensor(E), W, u)
        mix = l2_normalize((Tensor(E) * a.reshape(-1, 1)).sum(axis=0))
        cos = (mix * target).sum()
        total = cos if total is None else total + cos
    return total * (1.0 / len(doc_embs))


def train_summarizer(documents: Sequence[Document], encoder, epochs: int = 50, lr: float = 1.0, seed: int = 0):
    """Fit ``(W, u)`` by full-batch gradient ascent on :func:`summary_objective`.

    A step that would lower the objective is retried at half the step size
    (up to 30 times), so the per-epoch objective never decreases. Returns the
    weights and the objective log (initial value first).
    """
    init = SummaryWeights.random(encoder.config.dim, seed)
    if epochs == 0:
        return init, []
    sent_embs, doc_embs = [], []
    for doc in documents:
        sentences = split_sentences(doc, encoder.vocab)
        sent_embs.append(_sentence_embeddings(sentences, encoder))
    doc_embs = encoder.encode_ids([token_ids(d.text, encoder.vocab) for d in documents], "d", use_prompt=False)

    W, u = init.W.copy(), init.u.copy()

    def value_and_grad(W, u):
        tW, tu = Tensor(W, requires_grad=True), Tensor(u, requires_grad=True)
        obj = summary_objective(tW, tu, sent_embs, doc_embs)
        obj.backward()
        if not (np.all(np.isfinite(tW.grad)) and np.all(np.isfinite(tu.grad))):
            raise SummarizerError(f"non-finite summarizer gradient (objective {float(obj.data)})")
        return float(obj.data), tW.grad, tu.grad

    current, gW, gu = value_and_grad(W, u)
    history = [current]
    step = lr
    for _ in range(epochs):
        for _ in range(30):
            W_new, u_new = _f32(W + step * gW), _f32(u + step * gu)
            value = float(summary_objective(W_new, u_new, sent_embs, doc_embs).data)
            if value >= current:
                break
            step *= 0.5
        else:
            history.append(current)
            continue
        W, u = W_new, u_new
        current, gW, gu = value_and_grad(W, u)
        history.append(current)
    return SummaryWeights(W, u), history


def _f32(a):
    return a.astype(np.float32).astype(np.float64)


def contextualize_chunk(chunk: Chunk, summary: Summary | None) -> str:
    """Text the document encoder sees at index time: summary, blank line, chunk."""
    if summary is None:
        return chunk.text
    if summary.doc_id != chunk.doc_id:
        raise ValueError(f"summary is for {summary.doc_id!r}, chunk {chunk.chunk_id!r} belongs to {chunk.doc_id!r}")
    if not summary.text:
        return chunk.text
    return summary.text + "\n\n" + chunk.text


def write_summaries(summaries: Sequence[Summary], path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in summaries:
            row = {"doc_id": s.doc_id, "selected": list(s.selected), "text": s.text}
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_summaries(path) -> dict[str, Summary]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                out[r["doc_id"]] = Summary(r["doc_id"], tuple(r["selected"]), r["text"])
    return out


class AttentionSummarizer(TransformerMixin, BaseEstimator):
    """``fit`` learns the attention weights, ``transform`` maps documents to summaries.

    ``encoder`` is a loaded :class:`~techembed.encoder.Checkpoint`.
    """

    def __init__(self, encoder=None, m=3, epochs=50, lr=1.0, seed=0):
        self.encoder = encoder
        self.m = m
        self.epochs = epochs
        self.lr = lr
        self.seed = seed

    def fit(self, X, y=None):
        if self.encoder is None:
            raise ValueError("AttentionSummarizer needs an encoder")
        self.weights_, self.objective_ = train_summarizer(list(X), self.encoder, self.epochs, self.lr, self.seed)
        return self

    def transform(self, X):
        check_is_fitted(self, "weights_")
        return [extract_summary(doc, self.weights_, self.encoder, self.m) for doc in X]
