"""Pipeline configuration, stage functions, experiments and the four-arm ablation."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import jsonschema
import numpy as np

from .corpus import Corpus, Vocabulary, ingest
from .encoder import (
    Checkpoint,
    EncoderConfig,
    TrainConfig,
    init_checkpoint,
    load_checkpoint,
    pairs_from_texts,
    pretrain,
    prompt_tune,
    save_checkpoint,
)
from .evaluation import MetricsReport, evaluate, read_qrels, write_run
from .index import VectorIndex, build_index, load_index, save_index, search
from .querygen import QUESTION_TEMPLATES, SyntheticQuery, diversity, distinct_bigram_ratio, generate_queries, read_queries
from .summarizer import Summary, contextualize_chunk, extract_summary, train_summarizer
from .textgen import RemoteBackend, TemplateBackend

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "PipelineConfig",
    "run_ablation",
    "run_experiment",
]

ARMS = ("w/o tuning", "w/o queries", "w/o summaries", "full")


class ConfigError(ValueError):
    """Invalid pipeline configuration; ``pointer`` is the JSON pointer of the offending value."""

    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


CONFIG_SCHEMA = {
    "type": "object",
    "required": ["seed", "paths"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer"},
        "paths": {
            "type": "object",
            "required": ["corpus"],
            "additionalProperties": False,
            "properties": {
                k: {"type": "string", "minLength": 1}
                for k in ("corpus", "queries", "qrels", "pretrained", "checkpoint", "index", "summaries", "synthetic", "out")
            },
        },
        "encoder": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dim": {"type": "integer", "minimum": 1},
                "vocab_size": {"type": "integer", "minimum": 8},
                "layers": {"type": "integer", "minimum": 1},
                "heads": {"type": "integer", "minimum": 1},
                "max_seq": {"type": "integer", "minimum": 1},
                "prompt_len": {"type": "integer", "minimum": 1},
                "temperature": {"type": "number", "exclusiveMinimum": 0},
                "share_base": {"type": "boolean"},
                "ff_mult": {"type": "integer", "minimum": 1},
            },
        },
        "chunking": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"chunk_size": {"type": "integer", "minimum": 8}, "overlap": {"type": "integer", "minimum": 0}},
        },
        "summarizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "m": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "querygen": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_per_chunk": {"type": "integer", "minimum": 1},
                "backend": {"enum": ["template", "remote"]},
            },
        },
        "pretrain": {"$ref": "#/$defs/train"},
        "tune": {"$ref": "#/$defs/train"},
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ks": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "headline_k": {"type": "integer", "minimum": 1},
                "level": {"enum": ["chunk", "doc"]},
                "test_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "depth": {"type": "integer", "minimum": 1},
            },
        },
        "use_summaries": {"type": "boolean"},
        "use_synthetic": {"type": "boolean"},
        "allow_mismatch": {"type": "boolean"},
    },
    "$defs": {
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 2},
                "lr": {"type": "number", "exclusiveMinimum": 0},
            },
        }
    },
}


def _pointer(parts) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in parts)


def validate_config(raw: Mapping) -> None:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (list(e.absolute_path), e.message))
    if not errors:
        return
    err = errors[0]
    path = list(err.absolute_path)
    if err.validator == "required":
        missing = [k for k in err.validator_value if k not in err.instance]
        path.append(missing[0])
        raise ConfigError("required property is missing", _pointer(path))
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        path.append(extra[0])
        raise ConfigError("unknown property", _pointer(path))
    raise ConfigError(err.message, _pointer(path))


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    paths: dict
    encoder: EncoderConfig
    chunk_size: int = 256
    overlap: int = 32
    summary_m: int = 3
    summary_epochs: int = 50
    summary_lr: float = 1.0
    n_per_chunk: int = 2
    backend: str = "template"
    pretrain: TrainConfig = TrainConfig(epochs=20, batch_size=32, lr=1e-3)
    tune: TrainConfig = TrainConfig(epochs=20, batch_size=32, lr=1e-2)
    ks: tuple[int, ...] = (5, 10, 15, 20)
    headline_k: int = 10
    level: str = "chunk"
    test_fraction: float = 0.2
    depth: int = 100
    use_summaries: bool = True
    use_synthetic: bool = True
    allow_mismatch: bool = False
    raw: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_dict(cls, raw: Mapping, base_dir=None, check_paths: bool = True) -> "PipelineConfig":
        """Validate ``raw`` and resolve relative paths against ``base_dir``.

        Every configured path other than ``out`` is an input and must exist.
        """
        validate_config(raw)
        raw = copy.deepcopy(dict(raw))
        base = Path(base_dir) if base_dir else Path(".")
        paths = {k: str(base / v) for k, v in raw["paths"].items()}
        paths.setdefault("out", str(base / "techembed-out"))
        if check_paths:
            for name in sorted(paths):
                if name != "out" and not Path(paths[name]).exists():
                    raise ConfigError(f"file not found: {paths[name]}", f"/paths/{name}")
        seed = raw["seed"]
        enc = EncoderConfig(seed=seed, **raw.get("encoder", {}))
        ch = raw.get("chunking", {})
        sm = raw.get("summarizer", {})
        qg = raw.get("querygen", {})
        ev = raw.get("eval", {})
        pt = raw.get("pretrain", {})
        tu = raw.get("tune", {})
        if ch.get("overlap", 32) >= ch.get("chunk_size", 256):
            raise ConfigError("overlap must be smaller than chunk_size", "/chunking/overlap")
        return cls(
            seed=seed,
            paths=paths,
            encoder=enc,
            chunk_size=ch.get("chunk_size", 256),
            overlap=ch.get("overlap", 32),
            summary_m=sm.get("m", 3),
            summary_epochs=sm.get("epochs", 50),
            summary_lr=sm.get("lr", 1.0),
            n_per_chunk=qg.get("n_per_chunk", 2),
            backend=qg.get("backend", "template"),
            pretrain=TrainConfig(pt.get("epochs", 20), pt.get("batch_size", 32), pt.get("lr", 1e-3), seed),
            tune=TrainConfig(tu.get("epochs", 20), tu.get("batch_size", 32), tu.get("lr", 1e-2), seed),
            ks=tuple(ev.get("ks", (5, 10, 15, 20))),
            headline_k=ev.get("headline_k", 10),
            level=ev.get("level", "chunk"),
            test_fraction=ev.get("test_fraction", 0.2),
            depth=ev.get("depth", 100),
            use_summaries=raw.get("use_summaries", True),
            use_synthetic=raw.get("use_synthetic", True),
            allow_mismatch=raw.get("allow_mismatch", False),
            raw=raw,
        )

    @classmethod
    def load(cls, path, overrides: Mapping | None = None, check_paths: bool = True) -> "PipelineConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg} (line {exc.lineno})") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        for pointer, value in (overrides or {}).items():
            _set_pointer(raw, pointer, value)
        return cls.from_dict(raw, base_dir=path.parent, check_paths=check_paths)

    def path(self, name: str, default: str | None = None) -> Path:
        if name in self.paths:
            return Path(self.paths[name])
        if default is None:
            raise ConfigError("required path is not configured", f"/paths/{name}")
        return self.out / default

    @property
    def out(self) -> Path:
        return Path(self.paths["out"])

    def echo(self) -> dict:
        return {
            "seed": self.seed,
            "use_summaries": self.use_summaries,
            "use_synthetic": self.use_synthetic,
            "chunk_size": self.chunk_size,
            "overlap": self.overlap,
            "summary_m": self.summary_m,
            "encoder": asdict(self.encoder),
        }


def _set_pointer(doc: dict, pointer: str, value):
    parts = [p.replace("~1", "/").replace("~0", "~") for p in pointer.strip("/").split("/")]
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


# -- stages ---------------------------------------------------------------------


def derive_seed(seed: int, label: str) -> int:
    h = hashlib.blake2b(f"{seed}:{label}".encode(), digest_size=4).digest()
    return int.from_bytes(h, "little")


def load_corpus(cfg: PipelineConfig) -> Corpus:
    return ingest(cfg.path("corpus")).chunked(cfg.chunk_size, cfg.overlap)


def build_vocab(corpus: Corpus, cfg: PipelineConfig) -> Vocabulary:
    texts = [d.text for d in corpus.documents] + list(QUESTION_TEMPLATES)
    return Vocabulary.build(texts, cfg.encoder.vocab_size)


def make_backend(cfg: PipelineConfig):
    if cfg.backend == "remote":
        return RemoteBackend.from_env()
    return TemplateBackend(QUESTION_TEMPLATES)


def stage_pretrain(corpus: Corpus, cfg: PipelineConfig) -> Checkpoint:
    """Seeded init, then contrastive pre-training on template queries over raw chunks."""
    ckpt = init_checkpoint(cfg.encoder, build_vocab(corpus, cfg))
    queries = generate_queries(corpus.chunks, TemplateBackend(QUESTION_TEMPLATES), cfg.n_per_chunk,
                               derive_seed(cfg.seed, "pretrain-queries"))
    lookup = corpus.chunk_lookup()
    pairs = pairs_from_texts(ckpt, [(q.text, lookup[q.source_chunk_id].text, q.source_chunk_id) for q in queries])
    return pretrain(ckpt, pairs, cfg.pretrain)


def stage_summarize(corpus: Corpus, ckpt: Checkpoint, cfg: PipelineConfig):
    weights, history = train_summarizer(corpus.documents, ckpt, cfg.summary_epochs, cfg.summary_lr,
                                        derive_seed(cfg.seed, "summarizer"))
    summaries = {d.doc_id: extract_summary(d, weights, ckpt, cfg.summary_m) for d in corpus.documents}
    return weights, summaries, history


def stage_genqueries(corpus: Corpus, cfg: PipelineConfig, out_path=None) -> list[SyntheticQuery]:
    return generate_queries(corpus.chunks, make_backend(cfg), cfg.n_per_chunk, derive_seed(cfg.seed, "synthetic"),
                            out_path=out_path)


def split_queries(queries: Sequence[SyntheticQuery], test_fraction: float, seed: int):
    """Deterministic train/test split of real queries by seeded shuffle."""
    ids = sorted(q.query_id for q in queries)
    rng = np.random.default_rng(derive_seed(seed, "split"))
    order = rng.permutation(len(ids))
    n_test = int(round(test_fraction * len(ids)))
    test_ids = {ids[i] for i in order[:n_test]}
    train = [q for q in queries if q.query_id not in test_ids]
    test = [q for q in queries if q.query_id in test_ids]
    return train, test


def tuning_pairs(ckpt: Checkpoint, corpus: Corpus, summaries: Mapping[str, Summary] | None,
                 queries: Sequence[SyntheticQuery]):
    lookup = corpus.chunk_lookup()
    items = []
    for q in queries:
        chunk = lookup.get(q.source_chunk_id)
        if chunk is None:
            raise ConfigError(f"query {q.query_id!r} refers to unknown chunk {q.source_chunk_id!r}", "/paths/queries")
        text = contextualize_chunk(chunk, summaries[chunk.doc_id]) if summaries else chunk.text
        items.append((q.text, text, q.source_chunk_id))
    return pairs_from_texts(ckpt, items)


def stage_tune(ckpt: Checkpoint, corpus: Corpus, summaries, queries, cfg: PipelineConfig) -> Checkpoint:
    return prompt_tune(ckpt, tuning_pairs(ckpt, corpus, summaries, queries), cfg.tune)


def retrieve(index: VectorIndex, ckpt: Checkpoint, queries: Sequence[SyntheticQuery], depth: int):
    vecs = ckpt.embed_queries([q.text for q in queries])
    return {q.query_id: search(index, v, depth) for q, v in zip(queries, vecs)}


# -- experiments ----------------------------------------------------------------


def require_inputs(cfg: PipelineConfig, names: Sequence[str], defaults: Mapping[str, str] | None = None) -> dict[str, Path]:
    """Resolve input artifacts and fail before any compute if one is missing."""
    defaults = defaults or {}
    found = {}
    for name in names:
        p = cfg.path(name, defaults.get(name))
        if not p.exists():
            raise ConfigError(f"file not found: {p}", f"/paths/{name}")
        found[name] = p
    return found


def run_experiment(cfg: PipelineConfig, out_dir=None):
    """Encode the held-out real queries, search the index and score them.

    The checkpoint and index default to ``tuned.temb`` and ``index.tidx`` in
    the output directory. Writes ``run.trec`` and ``report.json``.
    """
    p = require_inputs(cfg, ["queries", "qrels", "checkpoint", "index"],
                 {"checkpoint": "tuned.temb", "index": "index.tidx"})
    out = Path(out_dir) if out_dir else cfg.out
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(p["checkpoint"])
    index = load_index(p["index"], ckpt.fingerprint(), cfg.allow_mismatch)
    _, test = split_queries(read_queries(p["queries"]), cfg.test_fraction, cfg.seed)
    qrels = read_qrels(p["qrels"], cfg.level)
    run = retrieve(index, ckpt, test, max(cfg.depth, max(cfg.ks)))
    echo = cfg.echo()
    echo["use_summaries"] = index.use_summaries
    echo["checkpoint_stage"] = ckpt.stage
    report = evaluate(run, qrels, cfg.ks, cfg.headline_k, echo)
    write_run(run, out / "run.trec")
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    return report, run


@dataclass
class AblationResult:
    reports: dict[str, MetricsReport]
    artifacts: dict[str, dict[str, str]]
    pretrain_history: dict
    tune_history: dict
    summary_history: list
    diversity: dict

    def table(self, ks: Sequence[int] = (5, 10, 15, 20)) -> str:
        head = "Arm".ljust(16) + "".join(f"R={k}".rjust(8) for k in ks)
        lines = [head, "-" * len(head)]
        for arm in ARMS:
            r = self.reports[arm]
            lines.append(arm.ljust(16) + "".join(f"{r.recall(k):8.3f}" for k in ks))
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(
            {
                "arms": {a: {"metrics": r.metrics, "config": r.config} for a, r in self.reports.items()},
                "artifacts": self.artifacts,
                "diversity": self.diversity,
                "pretrain_history": self.pretrain_history,
                "summary_history": self.summary_history,
                "tune_history": self.tune_history,
            },
            indent=2,
            sort_keys=True,
        ) + "\n"


def run_ablation(cfg: PipelineConfig, out_dir=None) -> AblationResult:
    """Run the shared stages once and the four arms on top.

    Arms: (a) pre-trained encoder, no prompt tuning; (b) prompt tuning on the
    real training queries only; (c) the full tuned encoder over an index built
    without summaries; (d) the full pipeline. Seeds and all other settings are
    shared, so (c) and (d) use the same checkpoint bytes.
    """
    require_inputs(cfg, ["corpus", "queries", "qrels"])
    out = Path(out_dir) if out_dir else cfg.out / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(cfg)
    real = read_queries(cfg.path("queries"))
    qrels = read_qrels(cfg.path("qrels"), cfg.level)
    train_real, test = split_queries(real, cfg.test_fraction, cfg.seed)

    base = stage_pretrain(corpus, cfg)
    weights, summaries, summ_hist = stage_summarize(corpus, base, cfg)
    synthetic = stage_genqueries(corpus, cfg)
    base_path = out / "pretrain.temb"
    save_checkpoint(base, base_path, weights.as_tensors())

    full = stage_tune(base, corpus, summaries, train_real + synthetic, cfg)
    real_only = stage_tune(base, corpus, summaries, train_real, cfg)

    arms = {
        "w/o tuning": (base, True),
        "w/o queries": (real_only, True),
        "w/o summaries": (full, False),
        "full": (full, True),
    }
    depth = max(cfg.depth, max(cfg.ks))
    reports, artifacts = {}, {}
    for arm, (ckpt, use_summ) in arms.items():
        slug = arm.replace("/", "").replace(" ", "-")
        adir = out / slug
        adir.mkdir(exist_ok=True)
        ckpt_path = adir / "encoder.temb"
        save_checkpoint(ckpt, ckpt_path, weights.as_tensors())
        index = build_index(corpus.chunks, ckpt, summaries, use_summ)
        save_index(index, adir / "index.tidx")
        run = retrieve(index, ckpt, test, depth)
        echo = cfg.echo()
        echo.update({"arm": arm, "use_summaries": use_summ, "checkpoint_stage": ckpt.stage,
                     "use_synthetic": arm != "w/o queries", "prompt_tuned": arm != "w/o tuning"})
        report = evaluate(run, qrels, cfg.ks, cfg.headline_k, echo)
        write_run(run, adir / "run.trec", tag=slug)
        (adir / "report.json").write_text(report.to_json(), encoding="utf-8")
        reports[arm] = report
        artifacts[arm] = {"checkpoint": str(ckpt_path), "index": str(adir / "index.tidx"), "run": str(adir / "run.trec")}
    result = AblationResult(
        reports,
        artifacts,
        base.history,
        full.history,
        summ_hist,
        {
            "diversity": diversity(train_real + synthetic),
            "diversity_real": diversity(train_real),
            "distinct_bigram_ratio": distinct_bigram_ratio(train_real + synthetic),
        },
    )
    (out / "ablation.json").write_text(result.to_json(), encoding="utf-8")
    (out / "ablation.txt").write_text(result.table(cfg.ks) + "\n", encoding="utf-8")
    return result
