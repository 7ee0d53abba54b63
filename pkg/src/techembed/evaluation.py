"""IR metrics (MAP, MRR, precision@K, recall@K) and TREC-format run/qrels I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

__all__ = [
    "EvaluationError",
    "MetricsReport",
    "Qrels",
    "average_precision",
    "evaluate",
    "precision_at_k",
    "read_qrels",
    "read_run",
    "recall_at_k",
    "reciprocal_rank",
    "write_qrels",
    "write_run",
]

DEFAULT_KS = (5, 10, 15, 20)
HEADLINE_K = 10

Ranked = Sequence[str]
RunFile = Mapping[str, Sequence[tuple[str, float]]]


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Qrels:
    judgments: Mapping[str, frozenset[str]]
    level: str = "chunk"

    def __post_init__(self):
        if self.level not in ("chunk", "doc"):
            raise EvaluationError(f"qrels level must be 'chunk' or 'doc', got {self.level!r}")
        for qid, rel in self.judgments.items():
            if not rel:
                raise EvaluationError(f"query {qid!r} has no relevant targets")

    def __getitem__(self, qid):
        return self.judgments[qid]

    def __contains__(self, qid):
        return qid in self.judgments

    def __len__(self):
        return len(self.judgments)


def _check_relevant(relevant):
    if not relevant:
        raise EvaluationError("relevant set must be non-empty")


def average_precision(ranked: Ranked, relevant) -> float:
    _check_relevant(relevant)
    hits = 0
    total = 0.0
    for rank, target in enumerate(ranked, start=1):
        if target in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def reciprocal_rank(ranked: Ranked, relevant) -> float:
    _check_relevant(relevant)
    for rank, target in enumerate(ranked, start=1):
        if target in relevant:
            return 1 / rank
    return 0.0


def _hits_at(ranked, relevant, k):
    if k < 1:
        raise EvaluationError(f"cutoff K must be >= 1, got {k}")
    return sum(1 for t in ranked[:k] if t in relevant)


def precision_at_k(ranked: Ranked, relevant, k: int) -> float:
    """Hits in the top ``k`` over ``k``; short lists are not padded."""
    _check_relevant(relevant)
    return _hits_at(ranked, relevant, k) / k


def recall_at_k(ranked: Ranked, relevant, k: int) -> float:
    _check_relevant(relevant)
    return _hits_at(ranked, relevant, k) / len(relevant)


def doc_of(chunk_id: str) -> str:
    return chunk_id.rsplit("#", 1)[0]


def to_doc_ranking(ranked: Ranked) -> list[str]:
    """Map chunk ids to documents, keeping each document at its best chunk's rank."""
    seen = set()
    out = []
    for cid in ranked:
        d = doc_of(cid)
        if d not in seen:
            seen.add(d)
            out.append(d)
    return out


@dataclass
class MetricsReport:
    metrics: dict[str, float]
    per_query: dict[str, dict[str, float]]
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"config": self.config, "metrics": self.metrics, "per_query": self.per_query},
            indent=2,
            sort_keys=True,
        ) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(d["metrics"], d["per_query"], d.get("config", {}))

    def recall(self, k: int) -> float:
        return self.metrics[f"recall@{k}"]


def evaluate(run: RunFile, qrels: Qrels, ks: Sequence[int] = DEFAULT_KS, headline_k: int = HEADLINE_K,
             config: Mapping | None = None) -> MetricsReport:
    """Score every query in ``run`` against ``qrels``; means are unweighted over queries."""
    unjudged = sorted(q for q in run if q not in qrels)
    if unjudged:
        raise EvaluationError(f"run has queries without judgments: {', '.join(unjudged)}")
    if not run:
        raise EvaluationError("run is empty")
    cutoffs = sorted(set(ks) | {headline_k})
    for k in cutoffs:
        if k < 1:
            raise EvaluationError(f"cutoff K must be >= 1, got {k}")
    per_query = {}
    for qid in sorted(run):
        ranked = [t for t, _ in run[qid]]
        if qrels.level == "doc":
            ranked = to_doc_ranking(ranked)
        rel = qrels[qid]
        row = {"ap": average_precision(ranked, rel), "rr": reciprocal_rank(ranked, rel)}
        for k in cutoffs:
            row[f"precision@{k}"] = precision_at_k(ranked, rel, k)
            row[f"recall@{k}"] = recall_at_k(ranked, rel, k)
        per_query[qid] = row
    n = len(per_query)
    rows = [per_query[q] for q in sorted(per_query)]
    metrics = {
        "map": sum(r["ap"] for r in rows) / n,
        "mrr": sum(r["rr"] for r in rows) / n,
    }
    for k in cutoffs:
        metrics[f"precision@{k}"] = sum(r[f"precision@{k}"] for r in rows) / n
        metrics[f"recall@{k}"] = sum(r[f"recall@{k}"] for r in rows) / n
    echo = {"ks": list(ks), "headline_k": headline_k, "level": qrels.level, "n_queries": n}
    echo.update(config or {})
    return MetricsReport(metrics, per_query, echo)


# -- TREC I/O -------------------------------------------------------------------


def read_qrels(path, level: str = "chunk") -> Qrels:
    """``query_id 0 target_id relevance`` per line; relevance <= 0 is ignored."""
    judged: dict[str, set[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise EvaluationError(f"{path}: line {lineno}: expected 4 columns, got {len(parts)}")
            qid, _, target, rel = parts
            try:
                grade = int(rel)
            except ValueError:
                raise EvaluationError(f"{path}: line {lineno}: relevance {rel!r} is not an integer") from None
            judged.setdefault(qid, set())
            if grade > 0:
                judged[qid].add(target)
    return Qrels({q: frozenset(t) for q, t in judged.items()}, level)


def write_qrels(qrels: Qrels, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in sorted(qrels.judgments):
            for target in sorted(qrels.judgments[qid]):
                fh.write(f"{qid} 0 {target} 1\n")


def write_run(run: RunFile, path, tag: str = "techembed"):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in sorted(run):
            for rank, (target, score) in enumerate(run[qid], start=1):
                fh.write(f"{qid} Q0 {target} {rank} {score:.17g} {tag}\n")


def read_run(path) -> dict[str, list[tuple[str, float]]]:
    rows: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise EvaluationError(f"{path}: line {lineno}: expected 6 columns, got {len(parts)}")
            qid, _, target, rank, score, _ = parts
            rows.setdefault(qid, []).append((int(rank), target, float(score)))
    run = {}
    for qid, items in rows.items():
        items.sort()
        targets = [t for _, t, _ in items]
        if len(set(targets)) != len(targets):
            raise EvaluationError(f"{path}: query {qid!r} lists a target twice")
        run[qid] = [(t, s) for _, t, s in items]
    return run
