from __future__ import annotations

import math

import pytest
from hypothesis import given, settings, strategies as st

from conquer.domain import ConceptOrigin, ConceptSet, KnowledgeSource, RunConfig
from conquer.gateway import DimensionMismatch, EmbeddingVector, LlmGateway
from conquer.knowledge import (
    AllConceptsFailed,
    ConceptNetClient,
    FixtureCorpus,
    NotFound,
    Retriever,
    RetrievalQuery,
    SourceDocument,
    Unreachable,
    WikipediaClient,
    build_fixture_corpus,
    chunk_text,
    cosine_similarity,
    normalize_term,
    rank_chunks,
)
from conquer.mock import MockBackend

from conftest import make_question


def _doc(n_tokens: int) -> SourceDocument:
    return SourceDocument(
        source=KnowledgeSource.WIKIPEDIA,
        concept="c",
        title="T",
        text=" ".join(f"w{i}" for i in range(n_tokens)),
    )


# -- chunking ---------------------------------------------------------------


def test_chunk_spans_for_300_tokens():
    chunks = chunk_text(_doc(300), 128, 50)
    assert [c.token_span for c in chunks] == [(0, 128), (78, 206), (156, 284), (234, 300)]
    assert chunks[0].text.split() == [f"w{i}" for i in range(128)]
    assert chunks[-1].text.split() == [f"w{i}" for i in range(234, 300)]


def test_chunk_exact_window_is_single_chunk():
    chunks = chunk_text(_doc(128), 128, 50)
    assert [c.token_span for c in chunks] == [(0, 128)]


def test_chunk_subwindow_input():
    chunks = chunk_text(_doc(50), 128, 50)
    assert [c.token_span for c in chunks] == [(0, 50)]
    assert len(chunks[0].text.split()) == 50


def test_chunk_rejects_bad_overlap():
    with pytest.raises(ValueError):
        chunk_text(_doc(10), 128, 128)


@settings(max_examples=150, deadline=None)
@given(st.integers(min_value=1, max_value=2000))
def test_chunk_tiling_properties(n):
    size, overlap = 128, 50
    stride = size - overlap
    chunks = chunk_text(_doc(n), size, overlap)
    spans = [c.token_span for c in chunks]

    expected_count = 1 if n <= size else math.ceil((n - size) / stride) + 1
    assert len(spans) == expected_count

    assert spans[0][0] == 0
    assert spans[-1][1] == n
    for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
        assert s2 - s1 == stride
        assert e1 - s2 == overlap
        assert e2 > e1

    # Removing the overlaps reconstructs the token stream exactly.
    tokens = []
    for i, (start, end) in enumerate(spans):
        words = chunks[i].text.split()
        assert len(words) == end - start
        tokens.extend(words if i == 0 else words[overlap:])
    assert tokens == _doc(n).text.split()


# -- ranking ----------------------------------------------------------------


def _vec(values) -> EmbeddingVector:
    return EmbeddingVector(values=tuple(values), model="m")


def _chunk(i: int):
    return chunk_text(_doc(4), 128, 50)[0].__class__(
        source=KnowledgeSource.WIKIPEDIA,
        concept="c",
        article_title=f"doc{i}",
        text=f"chunk {i}",
        token_span=(i, i + 2),
    )


def test_rank_query_identical_vector_is_first():
    target = _vec([0.6, 0.8])
    pairs = [(_chunk(0), _vec([1.0, 0.0])), (_chunk(1), target), (_chunk(2), _vec([0.0, 1.0]))]
    ranked = rank_chunks(target, pairs, 1)
    assert ranked[0].article_title == "doc1"
    assert abs(ranked[0].similarity - 1.0) < 1e-9


def test_rank_orthogonal_similarity_zero():
    ranked = rank_chunks(_vec([1.0, 0.0]), [(_chunk(0), _vec([0.0, 2.0]))], 1)
    assert abs(ranked[0].similarity - 0.0) < 1e-9


def test_rank_ties_break_by_input_position():
    same = _vec([1.0, 1.0])
    pairs = [(_chunk(i), same) for i in range(4)]
    ranked = rank_chunks(_vec([2.0, 2.0]), pairs, 3)
    assert [c.article_title for c in ranked] == ["doc0", "doc1", "doc2"]


def test_rank_matches_exhaustive_sort_oracle():
    import numpy as np

    rng = np.random.default_rng(42)
    for _ in range(25):
        n = 50
        vectors = rng.standard_normal((n, 8))
        # Plant exact duplicates so ties actually occur.
        vectors[7] = vectors[3]
        vectors[21] = vectors[3]
        query = _vec(rng.standard_normal(8))
        pairs = [(_chunk(i), _vec(vectors[i])) for i in range(n)]

        sims = [cosine_similarity(query, vec) for _, vec in pairs]
        oracle = sorted(range(n), key=lambda i: (-sims[i], i))[:3]

        ranked = rank_chunks(query, pairs, 3)
        assert [c.article_title for c in ranked] == [f"doc{i}" for i in oracle]


def test_rank_k_larger_than_pool():
    pairs = [(_chunk(i), _vec([1.0, float(i)])) for i in range(3)]
    assert len(rank_chunks(_vec([1.0, 1.0]), pairs, 10)) == 3


def test_rank_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        rank_chunks(_vec([1.0, 0.0]), [(_chunk(0), _vec([1.0, 0.0, 0.0]))], 1)


# -- wikipedia client ---------------------------------------------------------


class FakeResponse:
    def __init__(self, status_code: int, payload=None):
        self.status_code = status_code
        self._payload = payload

    def json(self):
        return self._payload


class FakeSession:
    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = 0

    def get(self, url, params=None, headers=None, timeout=None):
        self.calls += 1
        item = self.responses.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


def _wiki_responses(title="Photosynthesis", extract="Plants convert light."):
    return [
        FakeResponse(200, {"query": {"search": [{"title": title}]}}),
        FakeResponse(200, {"query": {"pages": [{"title": title, "extract": extract}]}}),
    ]


def test_fetch_wikipedia_resolves_search_then_extract(tmp_path):
    client = WikipediaClient(session=FakeSession(_wiki_responses()), cache_dir=tmp_path)
    doc = client.fetch("photosynthesis")
    assert doc.title == "Photosynthesis"
    assert doc.source is KnowledgeSource.WIKIPEDIA
    assert len(doc.text) > 0


def test_fetch_wikipedia_uses_disk_cache(tmp_path):
    session = FakeSession(_wiki_responses())
    client = WikipediaClient(session=session, cache_dir=tmp_path)
    client.fetch("photosynthesis")
    assert session.calls == 2
    again = client.fetch("photosynthesis")
    assert session.calls == 2  # served from disk
    assert again.title == "Photosynthesis"


def test_fetch_wikipedia_not_found():
    client = WikipediaClient(session=FakeSession([FakeResponse(200, {"query": {"search": []}})]))
    with pytest.raises(NotFound):
        client.fetch("zzzzxqy nonsense")


def test_fetch_wikipedia_unreachable():
    import requests

    client = WikipediaClient(session=FakeSession([requests.ConnectionError("down")]))
    with pytest.raises(Unreachable):
        client.fetch("photosynthesis")


def test_fetch_wikipedia_rejects_empty_concept():
    client = WikipediaClient(session=FakeSession([]))
    with pytest.raises(ValueError):
        client.fetch("   ")


# -- conceptnet client --------------------------------------------------------


def test_conceptnet_surface_text_brackets_stripped():
    edges = {
        "edges": [
            {"surfaceText": "Find [[a money]] in [[a bank]]"},
            {
                "surfaceText": None,
                "start": {"label": "bank"},
                "rel": {"label": "UsedFor"},
                "end": {"label": "storing money"},
            },
            {"surfaceText": "[[a bank]] is for [[saving]]"},
        ]
    }
    client = ConceptNetClient(session=FakeSession([FakeResponse(200, edges)]))
    doc = client.fetch("bank")
    lines = doc.text.splitlines()
    assert lines[0] == "Find a money in a bank"
    assert lines[1] == "bank UsedFor storing money"
    assert len(lines) == 3
    assert doc.source is KnowledgeSource.CONCEPTNET


def test_conceptnet_zero_edges_not_found():
    client = ConceptNetClient(session=FakeSession([FakeResponse(200, {"edges": []})]))
    with pytest.raises(NotFound):
        client.fetch("qqqq")


def test_conceptnet_respects_edge_limit():
    edges = {"edges": [{"surfaceText": f"fact [[{i}]]"} for i in range(30)]}
    client = ConceptNetClient(session=FakeSession([FakeResponse(200, edges)]), edge_limit=20)
    doc = client.fetch("thing")
    assert len(doc.text.splitlines()) == 20


def test_conceptnet_404_is_not_found():
    client = ConceptNetClient(session=FakeSession([FakeResponse(404)]))
    with pytest.raises(NotFound):
        client.fetch("nosuchterm")


def test_normalize_term():
    assert normalize_term("Natural Selection!") == "natural_selection"
    assert normalize_term("CRISPR-Cas9") == "crispr_cas9"


# -- fixture corpus and retriever ---------------------------------------------


def _retriever(tmp_path, cfg=None, seed=7):
    cfg = cfg or RunConfig(
        mock=True, seed=seed, cache_dir=tmp_path / "cache", corpus_dir=tmp_path / "corpus"
    )
    gateway = LlmGateway(MockBackend(seed=seed), cache_dir=cfg.cache_dir)
    return Retriever(gateway, cfg), cfg


def _write_corpus(tmp_path, docs: dict[str, str]):
    corpus = tmp_path / "corpus"
    corpus.mkdir(exist_ok=True)
    for concept, text in docs.items():
        (corpus / f"{normalize_term(concept)}.txt").write_text(text, "utf-8")


def _query(concepts, question="How do plants make food?", top_k=3):
    cs = ConceptSet(question_id="q1", concepts=tuple(concepts), origin=ConceptOrigin.LLM_EXTRACTED)
    return RetrievalQuery(question_text=question, concepts=cs, top_k=top_k)


def test_fixture_corpus_missing_file_not_found(tmp_path):
    corpus = FixtureCorpus(tmp_path)
    with pytest.raises(NotFound):
        corpus.fetch("absent", KnowledgeSource.WIKIPEDIA)


def test_retrieve_returns_at_most_top_k(tmp_path):
    long_text = " ".join(f"tok{i}" for i in range(400))
    _write_corpus(tmp_path, {"plant": long_text, "water": long_text, "light": long_text})
    retriever, _ = _retriever(tmp_path)
    chunks = retriever.retrieve(_query(["plant", "water", "light"]), KnowledgeSource.WIKIPEDIA)
    assert len(chunks) == 3
    assert all(c.similarity is not None for c in chunks)


def test_retrieve_planted_verbatim_chunk_ranks_first(tmp_path):
    question = "How do plants make food?"
    _write_corpus(
        tmp_path,
        {
            "plant": " ".join(f"filler{i}" for i in range(100)),
            "food": question,  # single-chunk doc identical to the question text
        },
    )
    retriever, _ = _retriever(tmp_path)
    chunks = retriever.retrieve(_query(["plant", "food"], question=question), KnowledgeSource.WIKIPEDIA)
    assert chunks[0].concept == "food"
    assert abs(chunks[0].similarity - 1.0) < 1e-9


def test_retrieve_seven_concepts_still_returns_top_three(tmp_path):
    concepts = ["plant", "sunlight", "water", "photosynthesis", "growth", "stress", "environment"]
    _write_corpus(
        tmp_path,
        {c: " ".join(f"{c}word{i}" for i in range(160)) for c in concepts},
    )
    retriever, _ = _retriever(tmp_path)
    chunks = retriever.retrieve(_query(concepts, top_k=3), KnowledgeSource.WIKIPEDIA)
    assert len(chunks) == 3
    sims = [c.similarity for c in chunks]
    assert sims == sorted(sims, reverse=True)


def test_retrieve_single_short_document_returns_its_best_chunk(tmp_path):
    _write_corpus(tmp_path, {"plant": "a plant is a living organism that grows"})
    retriever, _ = _retriever(tmp_path)
    chunks = retriever.retrieve(_query(["plant"]), KnowledgeSource.WIKIPEDIA)
    assert len(chunks) == 1
    assert chunks[0].token_span == (0, 8)


def test_retrieve_skips_missing_concepts(tmp_path):
    _write_corpus(tmp_path, {"plant": "plants are green organisms that grow"})
    retriever, _ = _retriever(tmp_path)
    chunks = retriever.retrieve(_query(["nosuchfile", "plant"]), KnowledgeSource.WIKIPEDIA)
    assert chunks
    assert all(c.concept == "plant" for c in chunks)


def test_retrieve_all_concepts_failed(tmp_path):
    (tmp_path / "corpus").mkdir()
    retriever, _ = _retriever(tmp_path)
    with pytest.raises(AllConceptsFailed):
        retriever.retrieve(_query(["missing", "gone"]), KnowledgeSource.WIKIPEDIA)


def test_retrieve_is_deterministic(tmp_path):
    _write_corpus(tmp_path, {"plant": " ".join(f"tok{i}" for i in range(300))})
    retriever_a, _ = _retriever(tmp_path)
    retriever_b, _ = _retriever(tmp_path)
    q = _query(["plant"])
    result_a = [c.to_dict() for c in retriever_a.retrieve(q, KnowledgeSource.WIKIPEDIA)]
    result_b = [c.to_dict() for c in retriever_b.retrieve(q, KnowledgeSource.WIKIPEDIA)]
    assert result_a == result_b


def test_retrieve_never_skips_a_better_chunk(tmp_path):
    _write_corpus(
        tmp_path,
        {c: " ".join(f"{c}tok{i}" for i in range(200)) for c in ("alpha", "beta", "gamma")},
    )
    cfg = RunConfig(
        mock=True, seed=7, cache_dir=tmp_path / "cache", corpus_dir=tmp_path / "corpus", top_k=2
    )
    retriever, _ = _retriever(tmp_path, cfg=cfg)
    query = _query(["alpha", "beta", "gamma"], top_k=2)
    selected = retriever.retrieve(query, KnowledgeSource.WIKIPEDIA)

    # Re-rank everything with an oversized k to get the full ordering.
    full = retriever.retrieve(_query(["alpha", "beta", "gamma"], top_k=50), KnowledgeSource.WIKIPEDIA)
    assert [c.text for c in selected] == [c.text for c in full[:2]]
    unreturned_best = max(c.similarity for c in full[2:])
    assert min(c.similarity for c in selected) >= unreturned_best


def test_retrieve_per_concept_mode(tmp_path):
    _write_corpus(
        tmp_path,
        {c: " ".join(f"{c}tok{i}" for i in range(300)) for c in ("alpha", "beta")},
    )
    cfg = RunConfig(
        mock=True, seed=7, cache_dir=tmp_path / "cache",
        corpus_dir=tmp_path / "corpus", per_concept_top_k=True, top_k=2,
    )
    retriever, _ = _retriever(tmp_path, cfg=cfg)
    chunks = retriever.retrieve(_query(["alpha", "beta"], top_k=2), KnowledgeSource.WIKIPEDIA)
    by_concept = {}
    for c in chunks:
        by_concept.setdefault(c.concept, []).append(c)
    assert set(by_concept) == {"alpha", "beta"}
    assert all(len(group) == 2 for group in by_concept.values())


def test_retrieve_requires_concepts(tmp_path):
    retriever, _ = _retriever(tmp_path)
    cs = ConceptSet(question_id="q", concepts=("x",), origin=ConceptOrigin.LLM_EXTRACTED)
    query = RetrievalQuery(question_text="q", concepts=cs)
    object.__setattr__(query.concepts, "concepts", ())
    with pytest.raises(ValueError):
        retriever.retrieve(query, KnowledgeSource.WIKIPEDIA)


def test_build_fixture_corpus_covers_question_words(tmp_path):
    q = make_question()
    count = build_fixture_corpus([q], tmp_path / "corpus", extra_concepts=("photosynthesis",))
    assert (tmp_path / "corpus" / "plant.txt").exists()
    assert (tmp_path / "corpus" / "doesnt.txt").exists()
    assert (tmp_path / "corpus" / "photosynthesis.txt").exists()
    assert count == len(list((tmp_path / "corpus").glob("*.txt")))
    # Articles are long enough to produce more than one chunk.
    text = (tmp_path / "corpus" / "plant.txt").read_text()
    assert len(text.split()) > 128
