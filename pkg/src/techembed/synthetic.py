"""Deterministic synthetic technical-documentation benchmark.

Each document describes one product whose name is the document-global term.
The name appears in the introduction and in the product-specific sections,
never in the boilerplate sections that are copied verbatim across many
documents. Queries come in two kinds:

* local: built from terms that only occur in the target chunk's document;
* global: a boilerplate phrase plus the product name, targeting a chunk that
  does not itself contain the name, so the right document can only be told
  apart through document-level context.

Run ``python -m techembed.synthetic OUTDIR`` to write ``corpus.jsonl``,
``queries.jsonl``, ``qrels.txt`` and a ready-to-use ``config.json``.
"""

from __future__ import annotations

import json
import random
import sys
from dataclasses import dataclass
from pathlib import Path

from .corpus import Corpus, Document, tokenize
from .evaluation import Qrels, write_qrels
from .querygen import SyntheticQuery, write_queries

_ONSETS = "b c d f g h j k l m n p r s t v w z br cr dr fl gr kr pl pr st tr vr zh".split()
_VOWELS = "a e i o u ai ea io ou".split()
_CODAS = ["", "", "n", "r", "x", "l", "s", "k", "m", "th"]

KINDS = ["controller", "compiler", "router", "scheduler", "profiler", "linker", "bridge", "sensor"]
DOMAINS = ["clock", "memory", "network", "power", "storage", "timing", "cache", "thermal"]

INTRO = [
    "The {G} {kind} is a {domain} component for embedded designs.",
    "This guide explains how the {G} {kind} is configured and operated.",
    "Every {G} installation keeps its settings in one {G} profile.",
]
OUTRO = "Report {G} defects through the usual {G} support channel."

UNIQUE_SECTIONS = [
    "On the {G}, the {a} register selects the {b} mode. Write {a} before enabling {b} "
    "or the {b} unit stays idle. The default {a} value is {n}.",
    "The {G} exposes {a} as a tunable limit for {b}. Raising {a} above {n} makes {b} "
    "unstable, so keep {a} low.",
    "Use the {a} command to inspect {b} on the {G}. The {a} output lists every {b} "
    "entry with its {n} field.",
    "When {a} fails, the {G} logs a {b} fault. Clear the {b} fault and rerun {a} "
    "with retry count {n}.",
]

# boilerplate paragraphs shared verbatim by many documents; no product name
SHARED_SECTIONS = [
    "To recover from a brownout, assert the resync_strobe line and wait for holdoff_ack. "
    "The resync_strobe pulse must last at least four cycles before holdoff_ack rises. "
    "Firmware then polls holdoff_ack until the recovery completes.",
    "Calibration uses the drift_table and the skew_offset value. Load the drift_table "
    "from flash, then program skew_offset for each lane. A stale drift_table produces "
    "a large skew_offset error.",
    "Licensing is checked by the token_daemon against the seat_ledger. If the "
    "token_daemon cannot reach the seat_ledger, a grace window of one day applies. "
    "Restart the token_daemon after editing the seat_ledger.",
    "Firmware images are signed with the vault_key and verified by boot_guard. "
    "Rotate the vault_key yearly and reprovision boot_guard afterwards. An unsigned "
    "image is rejected by boot_guard.",
    "Telemetry batches are pushed by the spool_agent to the metric_sink. Tune the "
    "spool_agent flush interval to limit load on the metric_sink. Dropped batches "
    "are retried by the spool_agent.",
]
SHARED_KEYS = [
    ("resync_strobe", "holdoff_ack"),
    ("drift_table", "skew_offset"),
    ("token_daemon", "seat_ledger"),
    ("vault_key", "boot_guard"),
    ("spool_agent", "metric_sink"),
]

LOCAL_QUERIES = [
    "how does {a} affect {b}",
    "what value should {a} have for {b}",
    "{a} setting for {b} mode",
    "troubleshoot {b} when {a} is wrong",
]
GLOBAL_QUERIES = [
    "{k1} and {k2} on the {G}",
    "{G} {k1} {k2} procedure",
    "how to handle {k1} with {k2} for {G}",
]


@dataclass(frozen=True)
class Benchmark:
    corpus: Corpus
    queries: tuple[SyntheticQuery, ...]
    qrels: Qrels
    global_query_ids: frozenset[str]

    def write(self, outdir, config_overrides=None):
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        self.corpus.to_jsonl(out / "corpus.jsonl")
        write_queries(self.queries, out / "queries.jsonl")
        write_qrels(self.qrels, out / "qrels.txt")
        cfg = default_config(out)
        cfg.update(config_overrides or {})
        (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _word(rng: random.Random, syllables: int) -> str:
    return "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(syllables)) + rng.choice(_CODAS)


def _fresh_words(rng: random.Random, n: int, used: set[str], syllables=(2, 3)) -> list[str]:
    out = []
    while len(out) < n:
        w = _word(rng, rng.choice(syllables))
        if w not in used and len(w) > 3:
            used.add(w)
            out.append(w)
    return out


BENCH_CHUNK_SIZE = 40
BENCH_OVERLAP = 8


def make_benchmark(
    n_docs: int = 50,
    seed: int = 42,
    global_fraction: float = 0.3,
    chunk_size: int = BENCH_CHUNK_SIZE,
    overlap: int = BENCH_OVERLAP,
) -> Benchmark:
    rng = random.Random(seed)
    used: set[str] = set()
    docs = []
    for j in range(n_docs):
        G = _fresh_words(rng, 1, used, syllables=(3,))[0]
        kind, domain = rng.choice(KINDS), rng.choice(DOMAINS)
        paras = [" ".join(s.format(G=G, kind=kind, domain=domain) for s in INTRO)]
        uniques = rng.sample(UNIQUE_SECTIONS, 3)
        shared = rng.sample(range(len(SHARED_SECTIONS)), 2)
        body, terms = [], []
        for tpl in uniques:
            a, b = _fresh_words(rng, 2, used)
            a = f"{a}_{rng.choice(['cfg', 'ctl', 'sel', 'lim'])}"
            terms.append(f"{a}:{b}")
            body.append(tpl.format(G=G, a=a, b=b, n=rng.randint(2, 64)))
        # shared boilerplate goes back to back in the middle of the body
        body[1:1] = [SHARED_SECTIONS[s] for s in shared]
        paras.extend(body)
        paras.append(OUTRO.format(G=G))
        docs.append(
            Document(f"doc{j:03d}", "\n".join(paras), title=f"{G} {kind} guide",
                     metadata={"product": G, "shared": ",".join(str(s) for s in shared), "terms": ",".join(terms)})
        )
    corpus = Corpus(tuple(docs)).chunked(chunk_size, overlap)

    queries, judgments, global_ids = [], {}, set()
    by_doc: dict[str, list] = {}
    for c in corpus.chunks:
        by_doc.setdefault(c.doc_id, []).append(c)
    candidates_global = []
    candidates_local = []
    for doc in docs:
        G = doc.metadata["product"]
        shared = [int(s) for s in doc.metadata["shared"].split(",")]
        for c in by_doc[doc.doc_id]:
            surfaces = {t.surface for t in tokenize(c.text)}
            if G not in surfaces:
                for s in shared:
                    k1, k2 = SHARED_KEYS[s]
                    if k1 in surfaces and k2 in surfaces:
                        candidates_global.append((c, G, k1, k2))
                        break
            pairs = [p.split(":") for p in doc.metadata["terms"].split(",")]
            locals_ = [(a, b) for a, b in pairs if a in surfaces and b in surfaces]
            if locals_:
                candidates_local.append((c, locals_))

    # hit the requested global share exactly; when global candidates run out,
    # drop local ones instead
    n_global = min(len(candidates_global),
                   round(global_fraction * len(candidates_local) / (1.0 - global_fraction)))
    n_local = min(len(candidates_local), round(n_global * (1.0 - global_fraction) / global_fraction))
    rng.shuffle(candidates_global)
    keep = set(rng.sample(range(len(candidates_local)), n_local))
    candidates_local = [c for i, c in enumerate(candidates_local) if i in keep]
    for i, (c, G, k1, k2) in enumerate(sorted(candidates_global[:n_global], key=lambda x: x[0].chunk_id)):
        text = rng.choice(GLOBAL_QUERIES).format(G=G, k1=k1, k2=k2)
        qid = f"g{i:04d}"
        queries.append(SyntheticQuery(qid, text, c.chunk_id, "real"))
        judgments[qid] = frozenset({c.chunk_id})
        global_ids.add(qid)
    for i, (c, locals_) in enumerate(candidates_local):
        a, b = rng.choice(locals_)
        text = rng.choice(LOCAL_QUERIES).format(a=a, b=b)
        qid = f"l{i:04d}"
        queries.append(SyntheticQuery(qid, text, c.chunk_id, "real"))
        judgments[qid] = frozenset({c.chunk_id})
    return Benchmark(corpus, tuple(queries), Qrels(judgments, "chunk"), frozenset(global_ids))


def default_config(outdir) -> dict:
    out = Path(outdir)
    return {
        "seed": 42,
        "paths": {
            "corpus": str(out / "corpus.jsonl"),
            "queries": str(out / "queries.jsonl"),
            "qrels": str(out / "qrels.txt"),
            "out": str(out / "run"),
        },
        "chunking": {"chunk_size": BENCH_CHUNK_SIZE, "overlap": BENCH_OVERLAP},
    }


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m techembed.synthetic OUTDIR", file=sys.stderr)
        return 1
    bench = make_benchmark()
    bench.write(argv[0])
    print(f"wrote {len(bench.corpus)} documents, {len(bench.corpus.chunks)} chunks, "
          f"{len(bench.queries)} queries to {argv[0]}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
