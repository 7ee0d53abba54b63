import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import tiny_checkpoint
from techembed.corpus import Document, chunk_document
from techembed.index import ExactIndex, VectorIndex, VectorIndexError, build_index, load_index, save_index, search
from techembed.summarizer import Summary


def _unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _oracle(ids, vectors, q, k):
    rows = sorted(((-float(np.dot(v, q)), cid) for cid, v in zip(ids, vectors)))
    return [(cid, -s) for s, cid in rows[:k]]


@pytest.fixture(scope="module")
def chunks():
    docs = [Document(f"d{i}", " ".join(f"w{(i * 7 + j) % 40}" for j in range(20))) for i in range(5)]
    return [c for d in docs for c in chunk_document(d, 10, 0)]


def test_build_ten_chunks(chunks):
    ckpt = tiny_checkpoint()
    summaries = {f"d{i}": Summary(f"d{i}", (0,), f"w{i}") for i in range(5)}
    idx = build_index(chunks, ckpt, summaries)
    assert len(idx) == 10
    assert np.allclose(np.linalg.norm(idx.vectors, axis=1), 1.0, atol=1e-9)
    assert idx.ids == tuple(c.chunk_id for c in chunks)
    assert idx.fingerprint == ckpt.fingerprint()


def test_no_summaries_embeds_raw_text(chunks):
    ckpt = tiny_checkpoint()
    idx = build_index(chunks, ckpt, None, use_summaries=False)
    assert np.array_equal(idx.vectors, ckpt.embed_documents([c.text for c in chunks]))


def test_missing_summary_names_doc(chunks):
    with pytest.raises(VectorIndexError, match="d4"):
        build_index(chunks, tiny_checkpoint(), {f"d{i}": Summary(f"d{i}", (), "x") for i in range(4)})


def test_rebuild_identical_bytes(chunks, tmp_path):
    for name in ("a", "b"):
        save_index(build_index(chunks, tiny_checkpoint(), None, False), tmp_path / f"{name}.tidx")
    assert (tmp_path / "a.tidx").read_bytes() == (tmp_path / "b.tidx").read_bytes()


def test_k_at_least_size_returns_all_sorted():
    rng = np.random.default_rng(0)
    idx = VectorIndex(4, ("c", "a", "b"), _unit(rng, 3, 4))
    out = search(idx, idx.vectors[0], 10)
    assert len(out) == 3
    assert [s for _, s in out] == sorted((s for _, s in out), reverse=True)


def test_stored_vector_ranks_first():
    rng = np.random.default_rng(1)
    idx = VectorIndex(6, tuple(f"x{i}" for i in range(20)), _unit(rng, 20, 6))
    cid, score = search(idx, idx.vectors[7], 1)[0]
    assert cid == "x7" and score == pytest.approx(1.0, abs=1e-12)


def test_ties_by_ascending_id():
    v = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    idx = VectorIndex(2, ("zz", "aa", "mm"), v)
    assert [c for c, _ in search(idx, np.array([1.0, 0.0]), 3)] == ["aa", "zz", "mm"]


@given(st.integers(0, 10_000), st.integers(1, 30))
def test_matches_full_sort_oracle(seed, k):
    rng = np.random.default_rng(seed)
    vecs = _unit(rng, 100, 8)
    vecs[5] = vecs[9]  # force a tie
    ids = tuple(f"c{i:03d}" for i in rng.permutation(100))
    idx = VectorIndex(8, ids, vecs)
    q = _unit(rng, 1, 8)[0]
    got, want = search(idx, q, k), _oracle(ids, vecs, q, k)
    assert [c for c, _ in got] == [c for c, _ in want]
    assert max(abs(a - b) for (_, a), (_, b) in zip(got, want)) < 1e-12


def test_query_dim_mismatch():
    idx = VectorIndex(3, ("a",), np.ones((1, 3)) / np.sqrt(3))
    with pytest.raises(VectorIndexError):
        search(idx, np.ones(4), 1)


def test_round_trip_and_fingerprint(tmp_path):
    rng = np.random.default_rng(2)
    idx = VectorIndex(5, ("a", "b"), _unit(rng, 2, 5), "f" * 64, True)
    save_index(idx, tmp_path / "i.tidx")
    back = load_index(tmp_path / "i.tidx", "f" * 64)
    assert back.ids == idx.ids and back.vectors.tobytes() == idx.vectors.tobytes() and back.use_summaries
    with pytest.raises(VectorIndexError, match="allow_mismatch"):
        load_index(tmp_path / "i.tidx", "0" * 64)
    assert load_index(tmp_path / "i.tidx", "0" * 64, allow_mismatch=True).ids == idx.ids


def test_empty_index_round_trip(tmp_path):
    save_index(VectorIndex(4, (), np.zeros((0, 4))), tmp_path / "e.tidx")
    back = load_index(tmp_path / "e.tidx")
    assert len(back) == 0 and search(back, np.ones(4), 3) == []


def test_corrupt_file(tmp_path):
    save_index(VectorIndex(2, ("a",), np.array([[1.0, 0.0]])), tmp_path / "i.tidx")
    data = (tmp_path / "i.tidx").read_bytes()
    (tmp_path / "t.tidx").write_bytes(data[:-3])
    with pytest.raises(VectorIndexError):
        load_index(tmp_path / "t.tidx")


def test_estimator():
    rng = np.random.default_rng(3)
    X = _unit(rng, 15, 4)
    res = ExactIndex(k=3).fit(X).kneighbors(X[:2])
    assert [r[0][0] for r in res] == ["00000000", "00000001"]
    assert all(len(r) == 3 for r in res)
