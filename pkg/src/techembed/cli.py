"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from xml.sax.saxutils import escape

from . import pipeline
from .corpus import write_chunks
from .encoder import load_checkpoint, save_checkpoint
from .evaluation import MetricsReport
from .index import build_index, load_index, save_index, search
from .pipeline import ConfigError, PipelineConfig
from .querygen import read_queries
from .summarizer import read_summaries, write_summaries

log = logging.getLogger("techembed")

# default artifact names inside --out
CHUNKS = "chunks.jsonl"
PRETRAINED = "pretrain.temb"
SUMMARIES = "summaries.jsonl"
SUMMARIZER = "summarizer.temb"
SYNTHETIC = "queries.synthetic.jsonl"
TUNED = "tuned.temb"
INDEX = "index.tidx"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _klist(text: str) -> list[int]:
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError(f"cutoffs must be positive integers, got {text!r}")
    return ks


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="pipeline config (JSON)")
    common.add_argument("--seed", type=int)
    common.add_argument("--k", type=_klist, metavar="LIST",
                        help="recall/precision cutoffs, e.g. 5,10,20; `search` uses the first as the result count")
    common.add_argument("--use-summaries", type=_bool, metavar="BOOL")
    common.add_argument("--backend", choices=["template", "remote"])
    common.add_argument("--out", type=Path, metavar="DIR")
    common.add_argument("--allow-mismatch", action="store_true",
                        help="accept an index built by a different encoder")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="techembed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "ingest": "validate the corpus and write chunks.jsonl",
        "pretrain": "train the full encoder on template queries",
        "summarize": "fit the summarizer and write per-document summaries",
        "genqueries": "generate synthetic queries for every chunk",
        "tune": "prompt-tune the pre-trained encoder on real and synthetic queries",
        "index": "embed every chunk into an exact index",
        "search": "query the index with free text",
        "eval": "score held-out queries and write run.trec and report.json",
        "ablate": "run the four-arm ablation",
        "report": "render a metrics JSON as a text table and optional SVG",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text)
        if name == "search":
            p.add_argument("query")
        if name == "report":
            p.add_argument("metrics", nargs="?", type=Path, help="report.json or ablation.json (default: OUT/report.json)")
            p.add_argument("--svg", action="store_true", help="also write a recall@k bar chart")
    return parser


def _overrides(args) -> dict:
    ov = {}
    if args.seed is not None:
        ov["/seed"] = args.seed
    if args.k is not None:
        ov["/eval/ks"] = args.k
    if args.use_summaries is not None:
        ov["/use_summaries"] = args.use_summaries
    if args.backend is not None:
        ov["/querygen/backend"] = args.backend
    if args.out is not None:
        ov["/paths/out"] = str(args.out.resolve())
    if args.allow_mismatch:
        ov["/allow_mismatch"] = True
    return ov


def _load_config(args) -> PipelineConfig:
    if not args.config.is_file():
        raise ConfigError(f"config file not found: {args.config}")
    return PipelineConfig.load(args.config, _overrides(args))


def _out(cfg: PipelineConfig) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    return cfg.out


def cmd_ingest(cfg, args):
    corpus = pipeline.load_corpus(cfg)
    path = _out(cfg) / CHUNKS
    write_chunks(corpus.chunks, path)
    print(f"{len(corpus)} documents, {len(corpus.chunks)} chunks -> {path}")


def cmd_pretrain(cfg, args):
    corpus = pipeline.load_corpus(cfg)
    ckpt = pipeline.stage_pretrain(corpus, cfg)
    path = _out(cfg) / PRETRAINED
    fp = save_checkpoint(ckpt, path)
    h = ckpt.history
    print(f"loss {h['initial_loss']:.4f} -> {h['epoch_losses'][-1]:.4f}" if h.get("epoch_losses") else "no epochs run")
    print(f"{path} sha256={fp}")


def _pretrained(cfg):
    return pipeline.require_inputs(cfg, ["pretrained"], {"pretrained": PRETRAINED})["pretrained"]


def cmd_summarize(cfg, args):
    ckpt_path = _pretrained(cfg)
    corpus = pipeline.load_corpus(cfg)
    ckpt = load_checkpoint(ckpt_path)
    weights, summaries, history = pipeline.stage_summarize(corpus, ckpt, cfg)
    out = _out(cfg)
    write_summaries([summaries[d.doc_id] for d in corpus.documents], out / SUMMARIES)
    save_checkpoint(ckpt, out / SUMMARIZER, weights.as_tensors())
    if history:
        print(f"objective {history[0]:.4f} -> {history[-1]:.4f}")
    print(f"{len(summaries)} summaries -> {out / SUMMARIES}")


def cmd_genqueries(cfg, args):
    corpus = pipeline.load_corpus(cfg)
    path = _out(cfg) / SYNTHETIC
    queries = pipeline.stage_genqueries(corpus, cfg, out_path=path)
    print(f"{len(queries)} queries -> {path}")


def cmd_tune(cfg, args):
    needed = ["queries"] + (["summaries"] if cfg.use_summaries else []) + (["synthetic"] if cfg.use_synthetic else [])
    p = pipeline.require_inputs(cfg, needed, {"summaries": SUMMARIES, "synthetic": SYNTHETIC})
    base = load_checkpoint(_pretrained(cfg))
    corpus = pipeline.load_corpus(cfg)
    train, _ = pipeline.split_queries(read_queries(p["queries"]), cfg.test_fraction, cfg.seed)
    if cfg.use_synthetic:
        train = train + read_queries(p["synthetic"])
    summaries = read_summaries(p["summaries"]) if cfg.use_summaries else None
    tuned = pipeline.stage_tune(base, corpus, summaries, train, cfg)
    path = _out(cfg) / TUNED
    fp = save_checkpoint(tuned, path)
    h = tuned.history
    if h.get("epoch_losses"):
        print(f"loss {h['initial_loss']:.4f} -> {h['epoch_losses'][-1]:.4f}")
    print(f"{path} sha256={fp}")


def cmd_index(cfg, args):
    needed = ["checkpoint"] + (["summaries"] if cfg.use_summaries else [])
    p = pipeline.require_inputs(cfg, needed, {"checkpoint": TUNED, "summaries": SUMMARIES})
    ckpt = load_checkpoint(p["checkpoint"])
    corpus = pipeline.load_corpus(cfg)
    summaries = read_summaries(p["summaries"]) if cfg.use_summaries else None
    index = build_index(corpus.chunks, ckpt, summaries, cfg.use_summaries)
    path = _out(cfg) / INDEX
    save_index(index, path)
    print(f"{len(index)} chunks -> {path}")


def cmd_search(cfg, args):
    p = pipeline.require_inputs(cfg, ["checkpoint", "index"], {"checkpoint": TUNED, "index": INDEX})
    ckpt = load_checkpoint(p["checkpoint"])
    index = load_index(p["index"], ckpt.fingerprint(), cfg.allow_mismatch)
    k = args.k[0] if args.k else cfg.headline_k
    vec = ckpt.embed_queries([args.query])[0]
    for rank, (cid, score) in enumerate(search(index, vec, k), start=1):
        print(f"{rank}\t{cid}\t{score:.6f}")


def cmd_eval(cfg, args):
    report, _ = pipeline.run_experiment(cfg, _out(cfg))
    print(format_table({"model": report.metrics}, cfg.ks))
    print(f"-> {cfg.out / 'report.json'}")


def cmd_ablate(cfg, args):
    result = pipeline.run_ablation(cfg, _out(cfg) / "ablation")
    print(result.table(cfg.ks))
    print(f"-> {cfg.out / 'ablation'}")


def _metric_rows(path: Path) -> dict[str, dict[str, float]]:
    data = json.loads(path.read_text(encoding="utf-8"))
    if "arms" in data:
        return {arm: data["arms"][arm]["metrics"] for arm in pipeline.ARMS if arm in data["arms"]}
    return {"model": MetricsReport.from_json(path.read_text(encoding="utf-8")).metrics}


def format_table(rows: dict[str, dict[str, float]], ks) -> str:
    cols = ["map", "mrr"] + [f"recall@{k}" for k in ks] + [f"precision@{k}" for k in ks]
    cols = [c for c in cols if all(c in m for m in rows.values())]
    width = max(len(r) for r in rows) + 2
    head = "".ljust(width) + "".join(c.rjust(max(len(c), 6) + 2) for c in cols)
    lines = [head, "-" * len(head)]
    for name, m in rows.items():
        lines.append(name.ljust(width) + "".join(f"{m[c]:.4f}".rjust(max(len(c), 6) + 2) for c in cols))
    return "\n".join(lines)


def render_svg(rows: dict[str, dict[str, float]], ks) -> str:
    """Grouped bar chart of recall@k, one group per cutoff and one bar per row."""
    palette = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948"]
    names = list(rows)
    bar, gap, plot_h, left, top = 18, 24, 200, 50, 20
    group_w = bar * len(names) + gap
    width = left + group_w * len(ks) + 160
    height = top + plot_h + 50
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">']
    base = top + plot_h
    out.append(f'<line x1="{left}" y1="{base}" x2="{left + group_w * len(ks)}" y2="{base}" stroke="#333"/>')
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = base - tick * plot_h
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{tick:.2f}</text>')
        out.append(f'<line x1="{left}" y1="{y:.1f}" x2="{left + group_w * len(ks)}" y2="{y:.1f}" stroke="#ddd"/>')
    for gi, k in enumerate(ks):
        x0 = left + gi * group_w + gap / 2
        for ni, name in enumerate(names):
            v = rows[name].get(f"recall@{k}", 0.0)
            h = v * plot_h
            out.append(f'<rect x="{x0 + ni * bar:.1f}" y="{base - h:.1f}" width="{bar - 2}" height="{h:.1f}" '
                       f'fill="{palette[ni % len(palette)]}"><title>{escape(name)} R@{k} = {v:.4f}</title></rect>')
        out.append(f'<text x="{x0 + bar * len(names) / 2:.1f}" y="{base + 16}" text-anchor="middle">R={k}</text>')
    lx = left + group_w * len(ks) + 16
    for ni, name in enumerate(names):
        y = top + ni * 18
        out.append(f'<rect x="{lx}" y="{y}" width="12" height="12" fill="{palette[ni % len(palette)]}"/>')
        out.append(f'<text x="{lx + 18}" y="{y + 10}">{escape(name)}</text>')
    out.append(f'<text x="{left}" y="{height - 8}">recall@k</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_report(cfg, args):
    path = args.metrics or cfg.out / "report.json"
    if not path.is_file():
        raise ConfigError(f"metrics file not found: {path}")
    rows = _metric_rows(path)
    ks = [k for k in cfg.ks if all(f"recall@{k}" in m for m in rows.values())]
    table = format_table(rows, ks)
    out = _out(cfg)
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    if args.svg:
        (out / "report.svg").write_text(render_svg(rows, ks), encoding="utf-8")
        print(f"-> {out / 'report.svg'}")


COMMANDS = {
    "ingest": cmd_ingest,
    "pretrain": cmd_pretrain,
    "summarize": cmd_summarize,
    "genqueries": cmd_genqueries,
    "tune": cmd_tune,
    "index": cmd_index,
    "search": cmd_search,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
