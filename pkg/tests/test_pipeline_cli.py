import json

import pytest

from techembed.cli import main
from techembed.corpus import Corpus, Document
from techembed.evaluation import MetricsReport
from techembed.pipeline import ConfigError, PipelineConfig, run_experiment, split_queries
from techembed.querygen import SyntheticQuery, write_queries
from techembed.synthetic import make_benchmark

SMALL = {
    "encoder": {"dim": 16, "layers": 1, "heads": 2, "vocab_size": 512, "prompt_len": 2},
    "pretrain": {"epochs": 2, "batch_size": 8},
    "tune": {"epochs": 2, "batch_size": 8},
    "summarizer": {"epochs": 3},
}


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    make_benchmark(n_docs=6, seed=1).write(root, SMALL)
    cfg = root / "config.json"
    for cmd in ("ingest", "pretrain", "summarize", "genqueries", "tune", "index", "eval"):
        assert main([cmd, "--config", str(cfg)]) == 0, cmd
    return root


def _write_cfg(path, raw):
    path.write_text(json.dumps(raw))
    return path


def test_missing_corpus_pointer(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "c.json", {"seed": 1, "paths": {}})
    with pytest.raises(ConfigError) as exc:
        PipelineConfig.load(cfg)
    assert exc.value.pointer == "/paths/corpus"
    assert main(["eval", "--config", str(cfg)]) == 1
    assert "/paths/corpus" in capsys.readouterr().err


def test_missing_seed_and_unknown_key(tmp_path):
    (tmp_path / "c.jsonl").write_text('{"doc_id": "a", "text": "x"}\n')
    with pytest.raises(ConfigError, match="/seed"):
        PipelineConfig.from_dict({"paths": {"corpus": "c.jsonl"}}, tmp_path)
    with pytest.raises(ConfigError, match="/encoder/dims"):
        PipelineConfig.from_dict({"seed": 1, "paths": {"corpus": "c.jsonl"}, "encoder": {"dims": 3}}, tmp_path)
    with pytest.raises(ConfigError, match="/eval/ks/0"):
        PipelineConfig.from_dict({"seed": 1, "paths": {"corpus": "c.jsonl"}, "eval": {"ks": [0]}}, tmp_path)


def test_unresolvable_path(tmp_path):
    with pytest.raises(ConfigError, match="/paths/corpus"):
        PipelineConfig.from_dict({"seed": 1, "paths": {"corpus": "nope.jsonl"}}, tmp_path)


def test_unknown_flag_names_token(bench, capsys):
    assert main(["eval", "--config", str(bench / "config.json"), "--frobnicate"]) == 1
    assert "--frobnicate" in capsys.readouterr().err


def test_bad_bool_is_usage_error(bench, capsys):
    assert main(["index", "--config", str(bench / "config.json"), "--use-summaries", "maybe"]) == 1
    assert "maybe" in capsys.readouterr().err


def test_runtime_error_exit_2(bench, tmp_path, capsys):
    bad = tmp_path / "broken.temb"
    bad.write_bytes(b"XXXX" + b"\0" * 20)
    raw = json.loads((bench / "config.json").read_text())
    raw["paths"]["checkpoint"] = str(bad)
    cfg = _write_cfg(tmp_path / "c.json", raw)
    assert main(["index", "--config", str(cfg), "--out", str(tmp_path / "o"),
                 "--use-summaries", "false"]) == 2
    assert "magic" in capsys.readouterr().err


def test_pipeline_artifacts(bench):
    out = bench / "run"
    for name in ("chunks.jsonl", "pretrain.temb", "summaries.jsonl", "summarizer.temb", "queries.synthetic.jsonl",
                 "tuned.temb", "index.tidx", "run.trec", "report.json"):
        assert (out / name).is_file(), name
    rep = MetricsReport.from_json((out / "report.json").read_text())
    assert {"map", "mrr", "recall@5", "recall@20"} <= set(rep.metrics)
    assert rep.config["checkpoint_stage"] == "tuned"


def test_eval_is_repeatable(bench, tmp_path):
    cfg = str(bench / "config.json")
    assert main(["eval", "--config", cfg, "--out", str(tmp_path)]) != 0  # no index in the new out dir
    raw = json.loads((bench / "config.json").read_text())
    raw["paths"].update(checkpoint=str(bench / "run/tuned.temb"), index=str(bench / "run/index.tidx"))
    cfg2 = _write_cfg(tmp_path / "c.json", raw)
    assert main(["eval", "--config", str(cfg2), "--out", str(tmp_path / "x")]) == 0
    assert (tmp_path / "x/run.trec").read_bytes() == (bench / "run/run.trec").read_bytes()


def test_use_summaries_toggle_only_changes_echo(bench, tmp_path):
    raw = json.loads((bench / "config.json").read_text())
    raw["paths"]["checkpoint"] = str(bench / "run/tuned.temb")
    raw["paths"]["summaries"] = str(bench / "run/summaries.jsonl")
    cfg = str(_write_cfg(tmp_path / "c.json", raw))
    reports = {}
    for flag in ("true", "false"):
        out = tmp_path / flag
        assert main(["index", "--config", cfg, "--use-summaries", flag, "--out", str(out)]) == 0
        assert main(["eval", "--config", cfg, "--use-summaries", flag, "--out", str(out)]) == 0
        reports[flag] = json.loads((out / "report.json").read_text())["config"]
    diff = {k for k in reports["true"] if reports["true"][k] != reports["false"].get(k)}
    assert diff == {"use_summaries"}


def test_missing_artifacts_fail_before_compute(bench, tmp_path):
    raw = json.loads((bench / "config.json").read_text())
    raw["paths"]["out"] = str(tmp_path / "empty")
    cfg = PipelineConfig.from_dict(raw)
    with pytest.raises(ConfigError, match="/paths/checkpoint"):
        run_experiment(cfg)
    assert not (tmp_path / "empty").exists()


def test_search_three_chunk_index(tmp_path, capsys):
    docs = [Document(f"d{i}", f"reset the timing constraint number {i} now") for i in range(3)]
    Corpus(tuple(docs)).to_jsonl(tmp_path / "corpus.jsonl")
    write_queries([SyntheticQuery(f"q{i}", f"timing {i}", f"d{i}#0", "real") for i in range(3)],
                  tmp_path / "queries.jsonl")
    (tmp_path / "qrels.txt").write_text("".join(f"q{i} 0 d{i}#0 1\n" for i in range(3)))
    raw = {"seed": 3, "paths": {"corpus": "corpus.jsonl", "queries": "queries.jsonl", "qrels": "qrels.txt"}}
    raw.update(SMALL)
    raw["chunking"] = {"chunk_size": 16, "overlap": 2}
    cfg = str(_write_cfg(tmp_path / "config.json", raw))
    for cmd in ("pretrain", "summarize", "genqueries", "tune", "index"):
        assert main([cmd, "--config", cfg]) == 0, cmd
    capsys.readouterr()
    assert main(["search", "--config", cfg, "--k", "3", "reset the timing constraint"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3
    assert [ln.split("\t")[0] for ln in lines] == ["1", "2", "3"]
    assert sorted(ln.split("\t")[1] for ln in lines) == ["d0#0", "d1#0", "d2#0"]


def test_report_table_and_svg(bench, capsys):
    cfg = str(bench / "config.json")
    assert main(["report", "--config", cfg, "--svg"]) == 0
    text = (bench / "run/report.txt").read_text()
    assert "recall@5" in text and "model" in text
    svg = (bench / "run/report.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<rect") >= 4


def test_split_queries_deterministic():
    qs = [SyntheticQuery(f"q{i}", "x", "d#0", "real") for i in range(50)]
    a_train, a_test = split_queries(qs, 0.2, 42)
    b_train, b_test = split_queries(list(reversed(qs)), 0.2, 42)
    assert len(a_test) == 10 and len(a_train) == 40
    assert {q.query_id for q in a_test} == {q.query_id for q in b_test}
    assert {q.query_id for q in split_queries(qs, 0.2, 7)[1]} != {q.query_id for q in a_test}


def test_ablation_arms_share_checkpoints(bench, tmp_path):
    from techembed.encoder import load_checkpoint
    from techembed.pipeline import ARMS, run_ablation

    cfg = PipelineConfig.load(bench / "config.json")
    result = run_ablation(cfg, tmp_path)
    assert list(result.reports) == list(ARMS)
    art = result.artifacts
    full = open(art["full"]["checkpoint"], "rb").read()
    assert open(art["w/o summaries"]["checkpoint"], "rb").read() == full
    assert open(art["w/o summaries"]["index"], "rb").read() != open(art["full"]["index"], "rb").read()
    assert load_checkpoint(art["w/o tuning"]["checkpoint"]).stage == "pretrained"
    header = result.table().splitlines()[0].split()
    assert header == ["Arm", "R=5", "R=10", "R=15", "R=20"]
    assert (tmp_path / "ablation.json").is_file()
    assert main(["report", "--config", str(bench / "config.json"), str(tmp_path / "ablation.json")]) == 0
    assert "w/o summaries" in (bench / "run/report.txt").read_text()
