from techembed.corpus import tokenize
from techembed.synthetic import make_benchmark


def test_default_benchmark_shape():
    b = make_benchmark()
    assert len(b.corpus) >= 50
    assert len(b.corpus.chunks) >= 200
    assert len(b.global_query_ids) / len(b.queries) == 0.3
    assert all(b.qrels[q.query_id] == {q.source_chunk_id} for q in b.queries)


def test_global_queries_need_document_context():
    b = make_benchmark()
    chunks = b.corpus.chunk_lookup()
    for q in b.queries:
        if q.query_id not in b.global_query_ids:
            continue
        chunk = chunks[q.source_chunk_id]
        product = b.corpus.document(chunk.doc_id).metadata["product"]
        assert product in {t.surface for t in tokenize(q.text)}
        assert product not in {t.surface for t in tokenize(chunk.text)}
        # every introduction sentence carries the name
        intro = b.corpus.document(chunk.doc_id).text.split("\n")[0]
        assert all(product in sentence for sentence in intro.split(". "))


def test_deterministic(tmp_path):
    make_benchmark(n_docs=5, seed=3).write(tmp_path / "a")
    make_benchmark(n_docs=5, seed=3).write(tmp_path / "b")
    for name in ("corpus.jsonl", "queries.jsonl", "qrels.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
