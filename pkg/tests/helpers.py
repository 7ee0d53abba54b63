"""Independent oracles shared by the unit and acceptance tests.

Nothing here imports the code under test for the quantity being checked.
"""

from __future__ import annotations

import math
import re
from collections import Counter

import numpy as np

from techembed.corpus import Vocabulary
from techembed.encoder import EncoderConfig, init_checkpoint

REL_FLOOR = 1e-6


def rel_err(a, b, floor=REL_FLOOR):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_diff(f, x: np.ndarray, idx, h: float) -> float:
    old = x[idx]
    x[idx] = old + h
    up = f()
    x[idx] = old - h
    down = f()
    x[idx] = old
    return (up - down) / (2 * h)


def brute_metrics(ranked, relevant, ks):
    """Straight-from-the-definition metrics for one query."""
    hits_at = [0]
    for t in ranked:
        hits_at.append(hits_at[-1] + (t in relevant))
    precisions = [hits_at[r] / r for r in range(1, len(ranked) + 1) if ranked[r - 1] in relevant]
    out = {"ap": sum(precisions) / len(relevant)}
    first = next((r for r in range(1, len(ranked) + 1) if ranked[r - 1] in relevant), None)
    out["rr"] = 0.0 if first is None else 1.0 / first
    for k in ks:
        h = hits_at[min(k, len(ranked))]
        out[f"precision@{k}"] = h / k
        out[f"recall@{k}"] = h / len(relevant)
    return out


def brute_entropy(text: str) -> float:
    toks = re.findall(r"\w+|[^\w\s]+", text.lower())
    counts = Counter(toks)
    n = len(toks)
    return sum(-(c / n) * math.log2(c / n) for c in counts.values())


def tiny_checkpoint(dim=8, prompt_len=2, layers=1, heads=2, vocab_size=64, seed=0, temperature=0.05, **kw):
    words = [f"w{i}" for i in range(40)]
    vocab = Vocabulary.build([" ".join(words)], vocab_size)
    cfg = EncoderConfig(dim=dim, vocab_size=vocab_size, layers=layers, heads=heads, max_seq=32,
                        prompt_len=prompt_len, temperature=temperature, seed=seed, **kw)
    return init_checkpoint(cfg, vocab)


def contrastive_gradcheck(ckpt, batch, trainable, h=1e-3, base_fraction=0.01, seed=0):
    """Max relative error between analytic and central-difference gradients.

    Prompt tensors are checked entry by entry; for ``trainable="all"`` a
    random ``base_fraction`` of base entries (at least one per tensor) is.
    """
    from techembed.encoder import PROMPT_NAMES, contrastive_loss

    params = {k: np.asarray(v, dtype=np.float64).copy() for k, v in ckpt.params.items()}
    _, grads = contrastive_loss(batch, ckpt, trainable, params=params)

    def f():
        return contrastive_loss(batch, ckpt, trainable, params=params)[0]

    rng = np.random.default_rng(seed)
    worst, checked = 0.0, 0
    for name, g in sorted(grads.items()):
        flat = list(np.ndindex(g.shape))
        if name in PROMPT_NAMES:
            picks = flat
        else:
            n = max(1, int(round(base_fraction * len(flat))))
            picks = [flat[i] for i in rng.choice(len(flat), n, replace=False)]
        for idx in picks:
            num = central_diff(f, params[name], idx, h)
            worst = max(worst, float(rel_err(g[idx], num)))
            checked += 1
    return worst, checked


def summarizer_gradcheck(W, u, sent_embs, doc_embs, h=1e-4):
    from techembed.autodiff import Tensor
    from techembed.summarizer import summary_objective

    W, u = W.copy(), u.copy()
    tW, tu = Tensor(W, requires_grad=True), Tensor(u, requires_grad=True)
    summary_objective(tW, tu, sent_embs, doc_embs).backward()

    def f():
        return float(summary_objective(W, u, sent_embs, doc_embs).data)

    worst = 0.0
    for arr, grad in ((W, tW.grad), (u, tu.grad)):
        for idx in np.ndindex(arr.shape):
            worst = max(worst, float(rel_err(grad[idx], central_diff(f, arr, idx, h))))
    return worst


ACCEPTANCE: list[str] = []


class criterion:
    """Record one acceptance criterion as PASS/FAIL; failures still raise."""

    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = self.detail if exc_type is None else f"{exc_type.__name__}: {exc}".splitlines()[0]
        line = f"criterion {self.number} [{status}] {self.title}" + (f" -- {detail}" if detail else "")
        ACCEPTANCE.append(line)
        print(line)
        return False
