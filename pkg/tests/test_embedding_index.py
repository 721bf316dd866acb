import json

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matchforge.embedding_index import (
    EmbeddingError,
    EmptyIndexError,
    HashEmbedder,
    PAD_TOKEN,
    RemoteEmbedder,
    TokenEmbeddings,
    VectorIndex,
    build_documents,
    embed,
    maxsim,
    pooled_similarity,
    tokenize,
)
from matchforge.schema_model import Attribute, AttributeRef, Schema, Table


@pytest.fixture
def embedder():
    return HashEmbedder(dim=64, seed=0)


def brute_force_maxsim(query: TokenEmbeddings, doc: TokenEmbeddings) -> float:
    total = 0.0
    for q in query.vectors:
        best = -np.inf
        for d in doc.vectors:
            best = max(best, float(np.dot(q, d)))
        total += best
    return total


def test_tokenize_lowercases_and_splits():
    assert tokenize("Person ID") == ["person", "id"]
    assert tokenize("marital_status(string)") == ["marital", "status", "string"]
    assert tokenize("  ") == []


def test_embed_two_words(embedder):
    emb = embed("person id", embedder)
    assert emb.tokens == ("person", "id")
    assert emb.vectors.shape == (2, 64)
    np.testing.assert_allclose(np.linalg.norm(emb.vectors, axis=1), 1.0, atol=1e-9)


def test_embed_deterministic(embedder):
    a = embed("visit occurrence id", embedder)
    b = embed("visit occurrence id", embedder)
    assert a.tokens == b.tokens
    np.testing.assert_array_equal(a.vectors, b.vectors)


def test_embed_self_similarity(embedder):
    a = embed("person", embedder)
    b = embed("person", HashEmbedder(dim=64, seed=0))
    assert abs(float(np.dot(a.vectors[0], b.vectors[0])) - 1.0) < 1e-9


def test_embed_empty_text_pads(embedder):
    emb = embed("!!!", embedder)
    assert emb.tokens == (PAD_TOKEN,)
    assert emb.vectors.shape == (1, 64)


def test_different_seeds_differ():
    a = HashEmbedder(dim=64, seed=0)
    b = HashEmbedder(dim=64, seed=1)
    sim = float(np.dot(a.embed_tokens(["person"])[0], b.embed_tokens(["person"])[0]))
    assert abs(sim) < 0.9


def test_maxsim_identical(embedder):
    emb = embed("admissions marital status", embedder)
    assert maxsim(emb, emb) == pytest.approx(len(emb.tokens), abs=1e-9)


def test_maxsim_orthogonal():
    q = TokenEmbeddings(tokens=("a",), vectors=np.array([[1.0, 0.0]]))
    d = TokenEmbeddings(tokens=("b", "c"), vectors=np.array([[0.0, 1.0], [0.0, -1.0]]))
    assert maxsim(q, d) == pytest.approx(0.0, abs=1e-9)


def test_maxsim_matches_brute_force(embedder):
    rng = np.random.default_rng(7)
    for _ in range(25):
        q_tokens = [f"q{rng.integers(0, 50)}" for _ in range(int(rng.integers(1, 6)))]
        d_tokens = [f"d{rng.integers(0, 50)}" for _ in range(int(rng.integers(1, 9)))]
        q = embed(" ".join(q_tokens), embedder)
        d = embed(" ".join(d_tokens), embedder)
        assert maxsim(q, d) == pytest.approx(brute_force_maxsim(q, d), abs=1e-9)


def test_maxsim_dimension_mismatch(embedder):
    q = embed("a", embedder)
    d = embed("a", HashEmbedder(dim=32))
    with pytest.raises(ValueError, match="dimension mismatch"):
        maxsim(q, d)


def test_maxsim_bounded_by_query_length(embedder):
    q = embed("alpha beta gamma", embedder)
    d = embed("delta epsilon", embedder)
    assert maxsim(q, d) <= len(q.tokens) + 1e-12


def test_maxsim_unaffected_by_other_documents(embedder):
    # Scoring is pairwise; a third document cannot change this pair's score.
    q = embed("person id", embedder)
    d = embed("person identifier", embedder)
    before = maxsim(q, d)
    _ = embed("an unrelated document about notes", embedder)
    assert maxsim(q, d) == before


def test_pooled_similarity_self_and_symmetry(embedder):
    assert pooled_similarity("person id", "person id", embedder) == pytest.approx(1.0, abs=1e-9)
    ab = pooled_similarity("person id", "visit detail", embedder)
    ba = pooled_similarity("visit detail", "person id", embedder)
    assert ab == pytest.approx(ba, abs=1e-12)


def test_pooled_similarity_matches_direct_recomputation(embedder):
    a, b = "patient admission date", "visit occurrence id"
    ea, eb = embed(a, embedder), embed(b, embedder)
    pa = ea.vectors.mean(axis=0)
    pa /= np.linalg.norm(pa)
    pb = eb.vectors.mean(axis=0)
    pb /= np.linalg.norm(pb)
    assert pooled_similarity(a, b, embedder) == pytest.approx(float(np.dot(pa, pb)), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=1, max_size=6),
       st.lists(st.integers(0, 30), min_size=1, max_size=8))
def test_maxsim_upper_bound_property(q_ids, d_ids):
    embedder = HashEmbedder(dim=16, seed=3)
    q = embed(" ".join(f"t{i}" for i in q_ids), embedder)
    d = embed(" ".join(f"t{i}" for i in d_ids), embedder)
    score = maxsim(q, d)
    assert score <= len(q.tokens) + 1e-9
    if set(q.tokens) <= set(d.tokens):
        assert score == pytest.approx(len(q.tokens), abs=1e-9)


# ---------------------------------------------------------------------------
# Documents and index


def tiny_target() -> Schema:
    return Schema(
        "omop",
        (
            Table(
                "person",
                "identity of each person",
                (
                    Attribute("person_id", "unique person identifier", "bigint"),
                    Attribute("gender_source_value", "gender source code", "varchar(50)"),
                    Attribute("birth_datetime", "date and time of birth", "datetime"),
                ),
            ),
            Table(
                "note",
                "notes about a patient",
                (
                    Attribute("note_text", "content of the note", "varchar(max)"),
                    Attribute("note_date", "date the note was recorded", "date"),
                    Attribute("note_title", "title of the note", "varchar(250)"),
                ),
            ),
        ),
    )


def test_build_documents_counts(embedder):
    docs = build_documents(tiny_target(), embedder)
    assert len(docs) == 6
    assert [d.doc_id for d in docs] == list(range(6))


def test_build_documents_text_contains_data_type(embedder):
    for doc in build_documents(tiny_target(), embedder):
        data_type = tiny_target().resolve(doc.target_ref).data_type
        assert data_type in doc.text


def test_build_documents_metadata_is_table_description(embedder):
    docs = build_documents(tiny_target(), embedder)
    assert docs[0].table_metadata == "identity of each person"
    assert docs[3].table_metadata == "notes about a patient"


def test_bundled_target_one_document_per_attribute(target_schema, hash_embedder):
    docs = build_documents(target_schema, hash_embedder)
    assert len(docs) == target_schema.attribute_count() == 24
    assert [d.target_ref for d in docs] == list(target_schema.attribute_refs())


def test_build_documents_parallel_matches_serial(embedder):
    serial = build_documents(tiny_target(), embedder, workers=1)
    parallel = build_documents(tiny_target(), HashEmbedder(dim=64, seed=0), workers=4)
    for a, b in zip(serial, parallel):
        assert a.doc_id == b.doc_id
        assert a.target_ref == b.target_ref
        np.testing.assert_array_equal(a.embeddings.vectors, b.embeddings.vectors)


def test_retrieve_exact_match_first(embedder):
    index = VectorIndex.build(tiny_target(), embedder)
    doc = index.documents[0]
    results = index.retrieve(doc.embeddings, k=3)
    assert results[0].target_ref == doc.target_ref
    assert [r.rank for r in results] == [1, 2, 3]
    assert all(results[i].score >= results[i + 1].score for i in range(len(results) - 1))


def test_retrieve_k_larger_than_corpus(embedder):
    index = VectorIndex.build(tiny_target(), embedder)
    results = index.retrieve(embed("person", embedder), k=100)
    assert len(results) == 6


def test_retrieve_matches_exhaustive_oracle(embedder):
    from matchforge.embedding_index import maxsim as score_fn

    index = VectorIndex.build(tiny_target(), embedder)
    query = embed("note date", embedder)
    expected = sorted(
        ((score_fn(query, d.embeddings), d.doc_id, d.target_ref) for d in index.documents),
        key=lambda t: (-t[0], t[1]),
    )
    results = index.retrieve(query, k=6)
    assert [r.target_ref for r in results] == [t[2] for t in expected]


def test_retrieve_tie_break_by_doc_id():
    # Duplicate attribute texts force exact score ties.
    schema = Schema(
        "dup",
        (
            Table("t1", "", (Attribute("same", "", "int"),)),
            Table("t2", "", (Attribute("same", "", "int"),)),
        ),
    )
    embedder = HashEmbedder(dim=16, seed=5)
    index = VectorIndex.build(schema, embedder)
    results = index.retrieve(embed("same int", embedder), k=2)
    assert results[0].target_ref == AttributeRef("t1", "same")
    assert results[1].target_ref == AttributeRef("t2", "same")
    assert results[0].score == pytest.approx(results[1].score, abs=1e-12)


def test_retrieve_empty_index():
    index = VectorIndex("empty", 16, ())
    with pytest.raises(EmptyIndexError):
        index.retrieve(embed("x", HashEmbedder(dim=16)), k=1)


def test_retrieve_order_invariant_under_document_shuffle(embedder):
    import random

    built = VectorIndex.build(tiny_target(), embedder)
    shuffled_docs = list(built.documents)
    random.Random(8).shuffle(shuffled_docs)
    shuffled = VectorIndex(built.schema_name, built.dim, shuffled_docs)
    query = embed("note title text", embedder)
    assert [c.target_ref for c in built.retrieve(query, 6)] == [
        c.target_ref for c in shuffled.retrieve(query, 6)
    ]


def test_index_round_trip_bit_exact(tmp_path, embedder):
    index = VectorIndex.build(tiny_target(), embedder)
    path = tmp_path / "index.json"
    index.save(path)
    first_bytes = path.read_bytes()

    loaded = VectorIndex.load(path)
    assert loaded.schema_name == index.schema_name
    for a, b in zip(index.documents, loaded.documents):
        assert a.target_ref == b.target_ref
        assert a.embeddings.tokens == b.embeddings.tokens
        np.testing.assert_array_equal(a.embeddings.vectors, b.embeddings.vectors)

    loaded.save(path)
    assert path.read_bytes() == first_bytes


def test_index_build_reproducible(tmp_path):
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    VectorIndex.build(tiny_target(), HashEmbedder(dim=64, seed=9)).save(p1)
    VectorIndex.build(tiny_target(), HashEmbedder(dim=64, seed=9)).save(p2)
    assert p1.read_bytes() == p2.read_bytes()


# ---------------------------------------------------------------------------
# Remote embedder


def _mock_embed_transport(dim=8, fail_times=0, wrong_count=False):
    state = {"calls": 0}

    def handler(request: httpx.Request) -> httpx.Response:
        state["calls"] += 1
        if state["calls"] <= fail_times:
            return httpx.Response(500, text="boom")
        body = json.loads(request.content)
        rng = np.random.default_rng(0)
        out = []
        for text in body["texts"]:
            tokens = text.split()
            if wrong_count:
                tokens = tokens + ["extra"]
            vecs = rng.standard_normal((len(tokens), dim))
            vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
            out.append(vecs.tolist())
        return httpx.Response(200, json={"dim": dim, "embeddings": out})

    return httpx.MockTransport(handler), state


def test_remote_embedder_happy_path():
    transport, state = _mock_embed_transport(dim=8)
    remote = RemoteEmbedder("http://embed.test", transport=transport, backoff_base=0)
    emb = embed("person id", remote)
    assert emb.vectors.shape == (2, 8)
    assert remote.dim == 8
    assert state["calls"] == 1


def test_remote_embedder_retries_then_succeeds():
    transport, state = _mock_embed_transport(dim=8, fail_times=2)
    remote = RemoteEmbedder(
        "http://embed.test", transport=transport, max_retries=3, backoff_base=0
    )
    emb = embed("person id", remote)
    assert emb.vectors.shape == (2, 8)
    assert state["calls"] == 3


def test_remote_embedder_exhausts_retries():
    transport, _ = _mock_embed_transport(dim=8, fail_times=10)
    remote = RemoteEmbedder(
        "http://embed.test", transport=transport, max_retries=2, backoff_base=0
    )
    with pytest.raises(EmbeddingError, match="after retries"):
        embed("person id", remote)


def test_remote_embedder_rejects_token_count_mismatch():
    transport, _ = _mock_embed_transport(dim=8, wrong_count=True)
    remote = RemoteEmbedder("http://embed.test", transport=transport, backoff_base=0)
    with pytest.raises(EmbeddingError, match="vectors"):
        embed("person id", remote)
