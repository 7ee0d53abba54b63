import io
import json

import pytest
from hypothesis import given, strategies as st
from sklearn.base import clone

from techembed.corpus import (
    Chunker,
    Corpus,
    CorpusError,
    Document,
    Vocabulary,
    chunk_document,
    ingest,
    read_chunks,
    tokenize,
    window_spans,
    write_chunks,
)


def _doc(n_tokens, doc_id="d1"):
    return Document(doc_id, " ".join(f"t{i}" for i in range(n_tokens)))


def test_tokenize_example():
    toks = tokenize("Set clock_freq=100MHz.")
    assert [t.surface for t in toks] == ["set", "clock_freq", "=", "100mhz", "."]


def test_tokenize_empty():
    assert tokenize("") == []


def test_case_folding_gives_same_id():
    a, b = tokenize("A a")
    assert a.id == b.id


def test_vocab_known_and_oov_ids():
    v = Vocabulary(["alpha", "beta"], size=16)
    assert v.id_of("<pad>") == 0
    assert v.id_of("alpha") == 1
    oov = v.id_of("never-seen")
    assert v.oov_start <= oov < v.size
    assert oov == Vocabulary(["x"], size=16).id_of("never-seen")


def test_vocab_build_orders_by_count_then_token():
    v = Vocabulary.build(["b a b c c c"], size=32)
    assert v.tokens[:4] == ("<pad>", "c", "b", "a")


def test_vocab_save_load(tmp_path):
    v = Vocabulary.build(["one two two"], size=32)
    v.save(tmp_path / "v.txt")
    assert Vocabulary.load(tmp_path / "v.txt", size=32) == v


@pytest.mark.parametrize(
    "n, size, overlap, spans",
    [
        (250, 100, 20, [(0, 100), (80, 180), (150, 250)]),
        (50, 100, 20, [(0, 50)]),
        (100, 100, 20, [(0, 100)]),
    ],
)
def test_chunk_spans(n, size, overlap, spans):
    chunks = chunk_document(_doc(n), size, overlap)
    assert [(c.token_start, c.token_end) for c in chunks] == spans
    assert [c.chunk_id for c in chunks] == [f"d1#{i}" for i in range(len(spans))]


def test_chunk_text_is_original_substring():
    doc = Document("d", "Alpha beta.\n  Gamma, delta epsilon zeta eta theta iota kappa")
    c = chunk_document(doc, 8, 2)[0]
    assert c.text == "Alpha beta.\n  Gamma, delta epsilon zeta"


def test_overlap_not_smaller_than_size_is_rejected():
    with pytest.raises(CorpusError):
        chunk_document(_doc(20), 10, 10)


@given(n=st.integers(1, 400), size=st.integers(8, 64), data=st.data())
def test_windows_cover_every_token(n, size, data):
    overlap = data.draw(st.integers(0, size - 1))
    spans = window_spans(n, size, overlap)
    covered = set()
    for s, e in spans:
        assert 0 <= s < e <= n
        assert e - s == min(size, n)
        covered.update(range(s, e))
    assert covered == set(range(n))
    assert spans == window_spans(n, size, overlap)


def test_ingest_two_lines():
    src = io.StringIO('{"doc_id": "a", "text": "x y"}\n{"doc_id": "b", "text": "z"}\n')
    corpus = ingest(src)
    assert [d.doc_id for d in corpus] == ["a", "b"]


def test_ingest_duplicate_names_id():
    src = io.StringIO('{"doc_id": "a", "text": "x"}\n{"doc_id": "a", "text": "y"}\n')
    with pytest.raises(CorpusError, match="'a'"):
        ingest(src)


def test_ingest_missing_text_names_line():
    src = io.StringIO('{"doc_id": "a", "text": "x"}\n{"doc_id": "b"}\n')
    with pytest.raises(CorpusError, match="line 2"):
        ingest(src)


def test_ingest_malformed_json_names_line():
    with pytest.raises(CorpusError, match="line 1"):
        ingest(io.StringIO("{not json\n"))


def test_doc_id_with_whitespace_rejected():
    with pytest.raises(CorpusError):
        Document("a b", "text")


def test_corpus_jsonl_round_trip(tmp_path):
    corpus = Corpus((Document("a", "one two", title="T", metadata={"k": "v"}), Document("b", "three")))
    corpus.to_jsonl(tmp_path / "c.jsonl")
    assert ingest(tmp_path / "c.jsonl") == corpus


def test_chunks_round_trip(tmp_path):
    chunks = chunk_document(_doc(30), 10, 3)
    write_chunks(chunks, tmp_path / "c.jsonl")
    assert read_chunks(tmp_path / "c.jsonl") == chunks
    assert json.loads((tmp_path / "c.jsonl").read_text().splitlines()[0])["chunk_id"] == "d1#0"


def test_chunker_estimator():
    est = Chunker(chunk_size=10, overlap=2)
    assert clone(est).get_params() == {"chunk_size": 10, "overlap": 2}
    out = est.fit().transform([_doc(25, "x"), _doc(5, "y")])
    assert [c.chunk_id for c in out] == ["x#0", "x#1", "x#2", "y#0"]
