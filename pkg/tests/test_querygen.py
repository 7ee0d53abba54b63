import math

import pytest
from hypothesis import given, strategies as st

from helpers import brute_entropy
from techembed.corpus import Document, chunk_document
from techembed.querygen import (
    QUESTION_TEMPLATES,
    QueryGenerationError,
    SyntheticQuery,
    content_keywords,
    distinct_bigram_ratio,
    diversity,
    generate_queries,
    query_entropy,
    read_queries,
    write_queries,
)
from techembed.textgen import BackendError, TemplateBackend


def _chunks(n=3):
    texts = [
        "Timing constraints limit the clock. Timing constraints apply per domain.",
        "The reset line must be held low. Reset timing matters.",
        "Cache lines are flushed on write. The cache controller tracks lines.",
    ]
    return [chunk_document(Document(f"d{i}", texts[i % 3]), 64, 8)[0] for i in range(n)]


def test_three_chunks_two_each():
    qs = generate_queries(_chunks(), TemplateBackend(QUESTION_TEMPLATES), n_per_chunk=2, seed=1)
    assert len(qs) == 6
    assert [q.source_chunk_id for q in qs] == ["d0#0", "d0#0", "d1#0", "d1#0", "d2#0", "d2#0"]
    assert [q.query_id for q in qs[:2]] == ["d0#0/q0", "d0#0/q1"]
    assert {q.provenance for q in qs} == {"template"}


def test_same_seed_same_file(tmp_path):
    backend = TemplateBackend(QUESTION_TEMPLATES)
    generate_queries(_chunks(), backend, 2, seed=5, out_path=tmp_path / "a.jsonl")
    generate_queries(_chunks(), backend, 2, seed=5, out_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert read_queries(tmp_path / "a.jsonl") == generate_queries(_chunks(), backend, 2, seed=5)


def test_timing_chunk_query_mentions_topic():
    assert content_keywords(_chunks()[0].text) == ["constraints", "timing"]
    q = generate_queries(_chunks(1), TemplateBackend(QUESTION_TEMPLATES), 1, seed=0)[0]
    assert "timing" in q.text or "constraints" in q.text


def test_keyword_ties_alphabetical():
    assert content_keywords("zeta alpha beta") == ["alpha", "beta"]


def test_failure_flushes_and_resumes(tmp_path):
    class Flaky:
        kind, max_in_flight = "remote", 1

        def __init__(self, fail_on):
            self.fail_on = fail_on

        def generate(self, req):
            if self.fail_on and self.fail_on in req.slots["passage"]:
                raise BackendError("boom", 503)
            return f"q {req.slots['keyword']}"

    chunks = _chunks()
    path = tmp_path / "q.jsonl"
    with pytest.raises(QueryGenerationError) as exc:
        generate_queries(chunks, Flaky("reset line"), 1, seed=0, out_path=path)
    assert exc.value.cursor == 1
    assert len(read_queries(path)) == 1
    generate_queries(chunks, Flaky(None), 1, seed=0, out_path=path, start=exc.value.cursor)
    full = read_queries(path)
    assert [q.source_chunk_id for q in full] == ["d0#0", "d1#0", "d2#0"]
    assert {q.provenance for q in full} == {"llm"}


def test_write_read_round_trip(tmp_path):
    qs = [SyntheticQuery("q1", "what is x?", "d#0", "real"), SyntheticQuery("q2", "y", "d#1")]
    write_queries(qs, tmp_path / "q.jsonl")
    assert read_queries(tmp_path / "q.jsonl") == qs


@pytest.mark.parametrize("text, bits", [("w x y z", 2.0), ("a a a", 0.0), ("a a b b", 1.0), ("solo", 0.0)])
def test_entropy_examples(text, bits):
    assert query_entropy(text) == pytest.approx(bits, abs=1e-12)


def test_entropy_empty_raises():
    with pytest.raises(ValueError):
        query_entropy("   ")


def test_diversity_mean():
    assert diversity(["w x y z", "a a b b"]) == pytest.approx(1.5, abs=1e-12)
    with pytest.raises(ValueError):
        diversity([])


words = st.sampled_from(["reset", "clock", "the", "timing", "a", "?", "bus", "cache"])
queries = st.lists(st.lists(words, min_size=1, max_size=10).map(" ".join), min_size=1, max_size=12)


@given(queries)
def test_entropy_bounds_and_oracle(qs):
    for q in qs:
        h = query_entropy(q)
        n = len(q.split())
        assert -1e-12 <= h <= math.log2(n) + 1e-12
        assert abs(h - brute_entropy(q)) < 1e-9


@given(queries, st.randoms())
def test_diversity_permutation_and_duplication_invariant(qs, rnd):
    d = diversity(qs)
    shuffled = list(qs)
    rnd.shuffle(shuffled)
    assert abs(diversity(shuffled) - d) < 1e-12
    assert abs(diversity(qs + qs) - d) < 1e-12


def test_distinct_bigram_ratio():
    assert distinct_bigram_ratio(["a b c", "a b d"]) == pytest.approx(3 / 4)
    # unlike diversity, duplicates lower it
    assert distinct_bigram_ratio(["a b c"] * 2) == pytest.approx(1 / 2)
