"""Dual encoder with query/document soft prompts and contrastive training.

The base model is a small pre-LN transformer encoder (token embeddings,
sinusoidal positions, multi-head self-attention, GELU feed-forward) whose
mean-pooled, L2-normalised output is the embedding. Two sets of soft-prompt
vectors, one per tower, can be prepended to the input sequence. Training runs
in two stages: :func:`pretrain` updates every base parameter with the prompts
disabled, :func:`prompt_tune` updates only the prompts on a frozen base.

Parameters are stored as float32 (the checkpoint format) and promoted to
float64 for every forward and backward pass.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import container
from .autodiff import Tensor, concat, embedding, gelu, l2_normalize, layer_norm, log_softmax, softmax
from .corpus import Vocabulary, token_ids

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "DualEncoder",
    "EncoderConfig",
    "TrainConfig",
    "TrainingError",
    "contrastive_loss",
    "encode_document",
    "encode_query",
    "info_nce",
    "init_checkpoint",
    "load_checkpoint",
    "make_batches",
    "pretrain",
    "prompt_tune",
    "save_checkpoint",
    "similarity",
]

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TEMB"
MAX_POSITIONS = 4096
PROMPT_NAMES = ("prompt_q", "prompt_d")


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    vocab_size: int = 8192
    layers: int = 2
    heads: int = 4
    max_seq: int = 320
    prompt_len: int = 8
    temperature: float = 0.05
    seed: int = 0
    share_base: bool = True
    ff_mult: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.prompt_len + self.max_seq > MAX_POSITIONS:
            raise ValueError("prompt_len + max_seq exceeds the positional range")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if min(self.dim, self.layers, self.heads, self.max_seq, self.prompt_len) < 1:
            raise ValueError("dim, layers, heads, max_seq and prompt_len must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _base_names(cfg: EncoderConfig, prefix: str = "") -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.dim, cfg.dim * cfg.ff_mult
    names = [(prefix + "tok_emb", (cfg.vocab_size, d))]
    for i in range(cfg.layers):
        p = f"{prefix}l{i}."
        names += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "wq", (d, d)), (p + "bq", (d,)),
            (p + "wk", (d, d)), (p + "bk", (d,)),
            (p + "wv", (d, d)), (p + "bv", (d,)),
            (p + "wo", (d, d)), (p + "bo", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "w1", (d, f)), (p + "b1", (f,)),
            (p + "w2", (f, d)), (p + "b2", (d,)),
        ]  # fmt: skip
    names += [(prefix + "lnf.g", (d,)), (prefix + "lnf.b", (d,))]
    return names


def parameter_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes = dict(_base_names(cfg))
    if not cfg.share_base:
        shapes.update(_base_names(cfg, "doc."))
    shapes["prompt_q"] = (cfg.prompt_len, cfg.dim)
    shapes["prompt_d"] = (cfg.prompt_len, cfg.dim)
    return shapes


def _init_params(cfg: EncoderConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf.startswith("b") and len(shape) == 1:
            arr = np.zeros(shape)
        elif leaf in ("tok_emb", "prompt_q", "prompt_d"):
            arr = rng.normal(0.0, 1.0, shape)
        else:
            arr = rng.normal(0.0, 0.02, shape)
        params[name] = arr.astype(np.float32)
    return params


def _positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : (d - d // 2)])
    return pe


@dataclass
class Checkpoint:
    """Encoder parameters plus everything needed to reproduce its embeddings."""

    config: EncoderConfig
    params: dict[str, np.ndarray]
    vocab: Vocabulary
    stage: str = "init"
    summarizer: dict[str, np.ndarray] | None = None
    history: dict = field(default_factory=dict)
    truncated: int = field(default=0, compare=False)

    @property
    def use_prompt(self) -> bool:
        return self.stage == "tuned"

    def base_items(self):
        return {k: v for k, v in self.params.items() if k not in PROMPT_NAMES}

    def to_bytes(self) -> bytes:
        tensors = {f"base/{k}": v for k, v in self.base_items().items()}
        tensors["prompt_q/prompt_q"] = self.params["prompt_q"]
        tensors["prompt_d/prompt_d"] = self.params["prompt_d"]
        for k, v in (self.summarizer or {}).items():
            tensors[f"summarizer/{k}"] = v
        meta = {
            "config": asdict(self.config),
            "history": self.history,
            "stage": self.stage,
            "vocab": {"size": self.vocab.size, "tokens": list(self.vocab.tokens)},
        }
        return container.dumps(CHECKPOINT_MAGIC, meta, tensors)

    def fingerprint(self) -> str:
        return container.sha256(self.to_bytes())

    # -- encoding ------------------------------------------------------------
    def ids(self, text: str) -> list[int]:
        return token_ids(text, self.vocab)

    def encode_ids(self, seqs: Sequence[Sequence[int]], tower: str, use_prompt: bool | None = None,
                   batch_size: int = 64) -> np.ndarray:
        """Embed token-id sequences; returns an ``(n, dim)`` float64 array of unit rows."""
        use_prompt = self.use_prompt if use_prompt is None else use_prompt
        out = np.zeros((len(seqs), self.config.dim))
        order = sorted(range(len(seqs)), key=lambda i: (len(seqs[i]), i))
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            emb = forward(self.params, self.config, [seqs[i] for i in idx], tower, use_prompt, self)
            out[idx] = emb.data
        return out

    def embed_queries(self, texts: Sequence[str], use_prompt: bool | None = None) -> np.ndarray:
        return self.encode_ids([self.ids(t) for t in texts], "q", use_prompt)

    def embed_documents(self, texts: Sequence[str], use_prompt: bool | None = None) -> np.ndarray:
        return self.encode_ids([self.ids(t) for t in texts], "d", use_prompt)


def init_checkpoint(config: EncoderConfig, vocab: Vocabulary) -> Checkpoint:
    if vocab.size != config.vocab_size:
        raise ValueError(f"vocabulary size {vocab.size} != config.vocab_size {config.vocab_size}")
    return Checkpoint(config, _init_params(config), vocab, stage="init")


def forward(params: Mapping[str, np.ndarray | Tensor], cfg: EncoderConfig, seqs: Sequence[Sequence[int]],
            tower: str, use_prompt: bool, counter: Checkpoint | None = None) -> Tensor:
    """Encode a batch of token-id sequences to unit vectors, differentiably.

    ``params`` values may be plain arrays (treated as constants) or tensors
    that require gradients.
    """
    if any(len(s) == 0 for s in seqs):
        raise ValueError("cannot encode an empty token sequence")
    trimmed = []
    for s in seqs:
        if len(s) > cfg.max_seq:
            if counter is not None:
                counter.truncated += 1
            s = s[: cfg.max_seq]
        trimmed.append(s)
    B, T = len(trimmed), max(len(s) for s in trimmed)
    ids = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T))
    for b, s in enumerate(trimmed):
        ids[b, : len(s)] = s
        mask[b, : len(s)] = 1.0

    def P(name):
        v = params[name]
        return v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))

    pre = "doc." if tower == "d" and not cfg.share_base else ""
    d, H = cfg.dim, cfg.heads
    dh = d // H
    x = embedding(P(pre + "tok_emb"), ids) + _positions(T, d)
    k = 0
    if use_prompt:
        prompt = P("prompt_q" if tower == "q" else "prompt_d")
        k = prompt.shape[0]
        x = concat([prompt.reshape(1, k, d) + np.zeros((B, 1, 1)), x], axis=1)
        mask = np.concatenate([np.ones((B, k)), mask], axis=1)
    S = k + T
    key_bias = ((1.0 - mask) * -1e9)[:, None, None, :]
    scale = 1.0 / math.sqrt(dh)
    for i in range(cfg.layers):
        p = f"{pre}l{i}."
        h = layer_norm(x, P(p + "ln1.g"), P(p + "ln1.b"))

        def heads(w, b):
            return (h @ P(p + w) + P(p + b)).reshape(B, S, H, dh).transpose(0, 2, 1, 3)

        q, kk, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
        att = softmax((q @ kk.transpose(0, 1, 3, 2)) * scale + key_bias, axis=-1)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
        x = x + (ctx @ P(p + "wo") + P(p + "bo"))
        h = layer_norm(x, P(p + "ln2.g"), P(p + "ln2.b"))
        x = x + (gelu(h @ P(p + "w1") + P(p + "b1")) @ P(p + "w2") + P(p + "b2"))
    x = layer_norm(x, P(pre + "lnf.g"), P(pre + "lnf.b"))
    pool = mask.copy()
    pool[:, :k] = 0.0
    pool /= pool.sum(axis=1, keepdims=True)
    pooled = (x * pool[:, :, None]).sum(axis=1)
    return l2_normalize(pooled)


def encode_query(tokens: Sequence[int], ckpt: Checkpoint, use_prompt: bool = True) -> np.ndarray:
    return ckpt.encode_ids([list(tokens)], "q", use_prompt)[0]


def encode_document(tokens: Sequence[int], ckpt: Checkpoint, use_prompt: bool = True) -> np.ndarray:
    return ckpt.encode_ids([list(tokens)], "d", use_prompt)[0]


def similarity(e_q, e_d) -> float:
    e_q, e_d = np.asarray(e_q, dtype=np.float64), np.asarray(e_d, dtype=np.float64)
    if e_q.shape != e_d.shape:
        raise ValueError(f"dimension mismatch: {e_q.shape} vs {e_d.shape}")
    return float(e_q @ e_d)


def info_nce(scores, temperature: float) -> Tensor:
    """In-batch softmax cross-entropy; row ``i`` of ``scores`` has its positive at column ``i``."""
    if not isinstance(scores, Tensor):
        scores = Tensor(scores)
    B = scores.shape[0]
    logp = log_softmax(scores * (1.0 / temperature), axis=1)
    return (logp * np.eye(B, scores.shape[1])).sum() * (-1.0 / B)


@dataclass(frozen=True)
class Pair:
    query: tuple[int, ...]
    doc: tuple[int, ...]
    key: str


def contrastive_loss(batch: Sequence[Pair], ckpt: Checkpoint, trainable: str = "prompts",
                     params: Mapping[str, np.ndarray] | None = None):
    """Loss and gradients for one batch.

    ``trainable`` is ``"all"`` (pre-training: every base tensor, prompts off)
    or ``"prompts"`` (fine-tuning: only ``prompt_q``/``prompt_d``, prompts on).
    ``params`` overrides the checkpoint's tensors, e.g. for finite differences.
    """
    if len(batch) < 2:
        raise ValueError("a contrastive batch needs at least 2 pairs")
    if len({p.key for p in batch}) != len(batch):
        raise ValueError("positive documents in a batch must be distinct")
    source = ckpt.params if params is None else params
    if trainable == "all":
        names = [n for n in source if n not in PROMPT_NAMES]
        use_prompt = False
    elif trainable == "prompts":
        names = list(PROMPT_NAMES)
        use_prompt = True
    else:
        raise ValueError(f"trainable must be 'all' or 'prompts', got {trainable!r}")
    leaves = {n: Tensor(np.asarray(source[n], dtype=np.float64), requires_grad=True) for n in names}
    tensors = {n: leaves.get(n, source[n]) for n in source}
    cfg = ckpt.config
    eq = forward(tensors, cfg, [p.query for p in batch], "q", use_prompt, ckpt)
    ed = forward(tensors, cfg, [p.doc for p in batch], "d", use_prompt, ckpt)
    loss = info_nce(eq @ ed.transpose(1, 0), cfg.temperature)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} on batch of {len(batch)} pairs: {[p.key for p in batch]}")
    loss.backward()
    grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in leaves.items()}
    return value, grads


def make_batches(pairs: Sequence[Pair], batch_size: int, rng: np.random.Generator) -> list[list[Pair]]:
    """Shuffle and pack pairs so no batch repeats a positive document."""
    pending = deque(pairs[i] for i in rng.permutation(len(pairs)))
    batches = []
    while pending:
        batch, keys, skipped = [], set(), []
        while pending and len(batch) < batch_size:
            p = pending.popleft()
            if p.key in keys:
                skipped.append(p)
            else:
                batch.append(p)
                keys.add(p.key)
        pending.extendleft(reversed(skipped))
        if len(batch) >= 2:
            batches.append(batch)
        elif not skipped:
            break
        else:
            # only repeats of one document remain
            break
    return batches


class _Adam:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            params[name] = (params[name].astype(np.float64) - update).astype(np.float32)


def _train(ckpt: Checkpoint, pairs: Sequence[Pair], train: TrainConfig, trainable: str, stage: str) -> Checkpoint:
    params = {k: v.copy() for k, v in ckpt.params.items()}
    out = replace(ckpt, params=params, stage=stage, history={})
    rng = np.random.default_rng(train.seed)
    opt = _Adam(train)
    epoch_losses = []
    initial = None
    over = 0
    for epoch in range(train.epochs):
        batches = make_batches(pairs, train.batch_size, rng)
        if not batches:
            raise TrainingError("no batch of >= 2 distinct positive documents could be formed")
        if initial is None:
            initial = float(np.mean([contrastive_loss(b, out, trainable)[0] for b in batches]))
        losses = []
        for batch in batches:
            value, grads = contrastive_loss(batch, out, trainable)
            for n, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise TrainingError(f"non-finite gradient for {n} in epoch {epoch}")
            opt.step(out.params, grads)
            losses.append(value)
        mean = float(np.mean(losses))
        epoch_losses.append(mean)
        log.info("%s epoch %d: loss %.4f", stage, epoch, mean)
        over = over + 1 if mean > 10.0 * initial else 0
        if over >= 2:
            raise TrainingError(f"training diverged: loss {mean:.4g} > 10x initial {initial:.4g} for 2 epochs")
    out.history = {"epoch_losses": epoch_losses, "initial_loss": initial, "stage": stage, "trainable": trainable}
    if stage == "tuned" and ckpt.history:
        out.history["pretrain"] = ckpt.history
    return out


def pretrain(ckpt: Checkpoint, pairs: Sequence[Pair], train: TrainConfig | None = None) -> Checkpoint:
    """Contrastive training of every base tensor with the prompts disabled."""
    train = train or TrainConfig()
    if train.epochs == 0:
        return replace(ckpt, params={k: v.copy() for k, v in ckpt.params.items()}, stage="pretrained")
    return _train(ckpt, pairs, train, "all", "pretrained")


def prompt_tune(ckpt: Checkpoint, pairs: Sequence[Pair], train: TrainConfig | None = None) -> Checkpoint:
    """Contrastive training of ``prompt_q``/``prompt_d`` only; base tensors are left untouched."""
    train = train or TrainConfig(lr=1e-2)
    if train.epochs == 0:
        return replace(ckpt, params={k: v.copy() for k, v in ckpt.params.items()}, stage="tuned")
    return _train(ckpt, pairs, train, "prompts", "tuned")


def save_checkpoint(ckpt: Checkpoint, path, summarizer: Mapping[str, np.ndarray] | None = None) -> str:
    """Write ``ckpt`` (optionally with summarizer weights); returns its fingerprint."""
    if summarizer is not None:
        ckpt = replace(ckpt, summarizer={k: np.asarray(v, dtype=np.float32) for k, v in summarizer.items()})
    data = ckpt.to_bytes()
    with open(path, "wb") as fh:
        fh.write(data)
    return container.sha256(data)


def load_checkpoint(path, expect: EncoderConfig | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
        meta, tensors = container.loads(data, CHECKPOINT_MAGIC)
    except container.ContainerError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    cfg = EncoderConfig(**meta["config"])
    if expect is not None:
        for name in ("dim", "vocab_size", "layers", "heads", "prompt_len"):
            if getattr(expect, name) != getattr(cfg, name):
                raise CheckpointError(
                    f"{path}: checkpoint has {name}={getattr(cfg, name)}, requested {getattr(expect, name)}"
                )
    params, summ = {}, {}
    for key, arr in tensors.items():
        section, name = key.split("/", 1)
        if section == "summarizer":
            summ[name] = arr
        else:
            params[name] = arr
    expected = parameter_shapes(cfg)
    if set(params) != set(expected):
        raise CheckpointError(f"{path}: tensor set does not match config")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {params[name].shape}, expected {shape}")
    vocab = Vocabulary(meta["vocab"]["tokens"], size=meta["vocab"]["size"])
    return Checkpoint(cfg, params, vocab, meta["stage"], summ or None, meta.get("history", {}))


def fingerprint_file(path) -> str:
    with open(path, "rb") as fh:
        return container.sha256(fh.read())


class DualEncoder(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` pre-trains, ``tune`` prompt-tunes, ``transform`` embeds documents.

    ``fit(queries, documents)`` takes aligned lists of query texts and their
    positive document texts; the vocabulary is built from both.
    """

    def __init__(self, dim=64, vocab_size=8192, layers=2, heads=4, max_seq=320, prompt_len=8,
                 temperature=0.05, share_base=True, epochs=20, batch_size=32, lr=1e-3,
                 tune_epochs=20, tune_lr=1e-2, seed=0):
        self.dim = dim
        self.vocab_size = vocab_size
        self.layers = layers
        self.heads = heads
        self.max_seq = max_seq
        self.prompt_len = prompt_len
        self.temperature = temperature
        self.share_base = share_base
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.tune_epochs = tune_epochs
        self.tune_lr = tune_lr
        self.seed = seed

    def _config(self):
        return EncoderConfig(self.dim, self.vocab_size, self.layers, self.heads, self.max_seq,
                             self.prompt_len, self.temperature, self.seed, self.share_base)

    def _pairs(self, queries, documents, vocab):
        if len(queries) != len(documents):
            raise ValueError(f"{len(queries)} queries but {len(documents)} documents")
        return [Pair(tuple(token_ids(q, vocab)), tuple(token_ids(d, vocab)), d) for q, d in zip(queries, documents)]

    def fit(self, queries, documents):
        vocab = Vocabulary.build(list(documents) + list(queries), self.vocab_size)
        ckpt = init_checkpoint(self._config(), vocab)
        train = TrainConfig(self.epochs, self.batch_size, self.lr, self.seed)
        self.checkpoint_ = pretrain(ckpt, self._pairs(queries, documents, vocab), train)
        return self

    def tune(self, queries, documents):
        check_is_fitted(self, "checkpoint_")
        pairs = self._pairs(queries, documents, self.checkpoint_.vocab)
        train = TrainConfig(self.tune_epochs, self.batch_size, self.tune_lr, self.seed)
        self.checkpoint_ = prompt_tune(self.checkpoint_, pairs, train)
        return self

    def transform(self, X):
        check_is_fitted(self, "checkpoint_")
        return self.checkpoint_.embed_documents(list(X))

    def encode_queries(self, X):
        check_is_fitted(self, "checkpoint_")
        return self.checkpoint_.embed_queries(list(X))


def pairs_from_texts(ckpt: Checkpoint, items: Iterable[tuple[str, str, str]]) -> list[Pair]:
    """Build training pairs from ``(query_text, document_text, document_key)`` triples."""
    return [Pair(tuple(ckpt.ids(q)), tuple(ckpt.ids(d)), key) for q, d, key in items]
