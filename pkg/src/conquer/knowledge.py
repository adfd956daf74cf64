"""Knowledge retrieval: fetch source documents per concept, chunk, embed, rank.

Documents come from Wikipedia or ConceptNet (or a local fixture corpus for
hermetic runs), are split with a sliding token window, embedded against the
student question, and ranked by cosine similarity.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests

from .domain import ConceptSet, KnowledgeChunk, KnowledgeSource, RunConfig
from .gateway import DimensionMismatch, EmbeddingVector, LlmGateway

logger = logging.getLogger(__name__)

WIKIPEDIA_API = "https://en.wikipedia.org/w/api.php"
CONCEPTNET_API = "http://api.conceptnet.io/c/en/"
USER_AGENT = "conquer/0.1 (quiz-generation research pipeline)"


class KnowledgeError(Exception):
    pass


class NotFound(KnowledgeError):
    """The concept resolved to no document; the caller skips it."""


class Unreachable(KnowledgeError):
    pass


class AllConceptsFailed(KnowledgeError):
    """Every concept fetch failed, leaving nothing to retrieve from."""


@dataclass(frozen=True)
class SourceDocument:
    source: KnowledgeSource
    concept: str
    title: str
    text: str


@dataclass(frozen=True)
class RetrievalQuery:
    question_text: str
    concepts: ConceptSet
    chunk_size: int = 128
    chunk_overlap: int = 50
    top_k: int = 3

    @classmethod
    def from_config(cls, question_text: str, concepts: ConceptSet, cfg: RunConfig):
        return cls(
            question_text=question_text,
            concepts=concepts,
            chunk_size=cfg.chunk_size,
            chunk_overlap=cfg.chunk_overlap,
            top_k=cfg.top_k,
        )


def normalize_term(concept: str) -> str:
    """Lowercased form with runs of non-alphanumerics collapsed to ``_``."""
    norm = re.sub(r"[^a-z0-9]+", "_", concept.lower()).strip("_")
    return norm


class WhitespaceTokenizer:
    """Default tokenizer: whitespace-delimited words, joined back by spaces."""

    def tokenize(self, text: str) -> list[str]:
        return text.split()

    def join(self, tokens: list[str]) -> str:
        return " ".join(tokens)


def chunk_text(
    doc: SourceDocument,
    chunk_size: int,
    chunk_overlap: int,
    tokenizer: WhitespaceTokenizer | None = None,
) -> list[KnowledgeChunk]:
    """Sliding-window chunks with stride ``chunk_size - chunk_overlap``.

    Consecutive spans overlap by exactly ``chunk_overlap`` tokens; the final
    window may be shorter. Spans tile the token stream so that removing the
    overlaps reconstructs it exactly.
    """
    if not 0 <= chunk_overlap < chunk_size:
        raise ValueError("chunk_overlap must satisfy 0 <= overlap < chunk_size")
    tokenizer = tokenizer or WhitespaceTokenizer()
    tokens = tokenizer.tokenize(doc.text)
    if not tokens:
        raise ValueError("document text has no tokens")

    stride = chunk_size - chunk_overlap
    chunks = []
    start = 0
    while True:
        end = min(start + chunk_size, len(tokens))
        chunks.append(
            KnowledgeChunk(
                source=doc.source,
                concept=doc.concept,
                article_title=doc.title,
                text=tokenizer.join(tokens[start:end]),
                token_span=(start, end),
            )
        )
        if end == len(tokens):
            return chunks
        start += stride


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if len(a.values) != len(b.values):
        raise DimensionMismatch(f"vector lengths {len(a.values)} != {len(b.values)}")
    va = np.asarray(a.values)
    vb = np.asarray(b.values)
    sim = float(np.dot(va, vb) / (np.linalg.norm(va) * np.linalg.norm(vb)))
    return max(-1.0, min(1.0, sim))


def rank_chunks(
    query_vec: EmbeddingVector,
    chunks: list[tuple[KnowledgeChunk, EmbeddingVector]],
    k: int,
) -> list[KnowledgeChunk]:
    """Top-k chunks by descending cosine similarity to the query.

    Ties break by input position, which callers supply in (document order,
    ascending token span) order. Returned chunks carry their similarity.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    sims = [cosine_similarity(query_vec, vec) for _, vec in chunks]
    order = sorted(range(len(chunks)), key=lambda i: (-sims[i], i))
    return [
        dataclasses.replace(chunks[i][0], similarity=sims[i]) for i in order[:k]
    ]


class WikipediaClient:
    """Wikipedia search + plain-text extract, with an on-disk document cache."""

    def __init__(
        self,
        *,
        session: requests.Session | None = None,
        cache_dir: Path | None = None,
        api_url: str = WIKIPEDIA_API,
        timeout: float = 30.0,
    ):
        self.session = session or requests.Session()
        self.cache_dir = cache_dir
        self.api_url = api_url
        self.timeout = timeout

    def _cache_path(self, concept: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return Path(self.cache_dir) / "wikipedia" / f"{normalize_term(concept)}.json"

    def _get(self, params: dict) -> dict:
        try:
            resp = self.session.get(
                self.api_url,
                params=params,
                headers={"User-Agent": USER_AGENT},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise Unreachable(f"wikipedia request failed: {exc}") from exc
        if resp.status_code != 200:
            raise Unreachable(f"wikipedia returned status {resp.status_code}")
        return resp.json()

    def fetch(self, concept: str) -> SourceDocument:
        """Resolve the concept via search and return the top article's text."""
        if not concept.strip():
            raise ValueError("concept must be non-empty")
        cache_path = self._cache_path(concept)
        if cache_path is not None and cache_path.exists():
            data = json.loads(cache_path.read_text("utf-8"))
            return SourceDocument(
                source=KnowledgeSource.WIKIPEDIA,
                concept=concept,
                title=data["title"],
                text=data["text"],
            )

        search = self._get(
            {
                "action": "query",
                "list": "search",
                "srsearch": concept,
                "srlimit": 1,
                "format": "json",
                "formatversion": 2,
            }
        )
        hits = search.get("query", {}).get("search", [])
        if not hits:
            raise NotFound(f"no wikipedia article for {concept!r}")
        title = hits[0]["title"]

        extract = self._get(
            {
                "action": "query",
                "prop": "extracts",
                "explaintext": 1,
                "titles": title,
                "format": "json",
                "formatversion": 2,
            }
        )
        pages = extract.get("query", {}).get("pages", [])
        text = pages[0].get("extract", "") if pages else ""
        if not text.strip():
            raise NotFound(f"empty extract for {title!r}")

        if cache_path is not None:
            cache_path.parent.mkdir(parents=True, exist_ok=True)
            cache_path.write_text(
                json.dumps({"title": title, "text": text}, ensure_ascii=False), "utf-8"
            )
        return SourceDocument(
            source=KnowledgeSource.WIKIPEDIA, concept=concept, title=title, text=text
        )


def _render_edge(edge: dict) -> str:
    surface = edge.get("surfaceText")
    if surface:
        return surface.replace("[[", "").replace("]]", "")
    start = edge.get("start", {}).get("label", "")
    rel = edge.get("rel", {}).get("label", "")
    end = edge.get("end", {}).get("label", "")
    return f"{start} {rel} {end}".strip()


class ConceptNetClient:
    """Renders a concept's ConceptNet edges as one relational sentence per line."""

    def __init__(
        self,
        *,
        session: requests.Session | None = None,
        api_url: str = CONCEPTNET_API,
        edge_limit: int = 20,
        timeout: float = 30.0,
    ):
        self.session = session or requests.Session()
        self.api_url = api_url
        self.edge_limit = edge_limit
        self.timeout = timeout

    def fetch(self, concept: str) -> SourceDocument:
        if not concept.strip():
            raise ValueError("concept must be non-empty")
        term = normalize_term(concept)
        url = f"{self.api_url}{term}"
        try:
            resp = self.session.get(
                url,
                params={"limit": self.edge_limit},
                headers={"User-Agent": USER_AGENT},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise Unreachable(f"conceptnet request failed: {exc}") from exc
        if resp.status_code == 404:
            raise NotFound(f"no conceptnet node for {concept!r}")
        if resp.status_code != 200:
            raise Unreachable(f"conceptnet returned status {resp.status_code}")
        edges = resp.json().get("edges", [])[: self.edge_limit]
        lines = [line for line in (_render_edge(e) for e in edges) if line]
        if not lines:
            raise NotFound(f"no edges for {concept!r}")
        return SourceDocument(
            source=KnowledgeSource.CONCEPTNET,
            concept=concept,
            title=concept,
            text="\n".join(lines),
        )


class FixtureCorpus:
    """Local ``<concept>.txt`` files standing in for both remote sources."""

    def __init__(self, corpus_dir: Path | str):
        self.corpus_dir = Path(corpus_dir)

    def fetch(self, concept: str, source: KnowledgeSource) -> SourceDocument:
        if not concept.strip():
            raise ValueError("concept must be non-empty")
        path = self.corpus_dir / f"{normalize_term(concept)}.txt"
        if not path.exists():
            raise NotFound(f"no fixture document for {concept!r}")
        text = path.read_text("utf-8")
        if not text.strip():
            raise NotFound(f"empty fixture document for {concept!r}")
        return SourceDocument(source=source, concept=concept, title=concept, text=text)


def build_fixture_corpus(questions, out_dir: Path | str, extra_concepts=()) -> int:
    """Write a ``<concept>.txt`` fixture corpus covering a question set.

    One deterministic pseudo-article per distinct question word (plus any
    ``extra_concepts``), sized to span multiple chunks at the default chunk
    parameters. Returns the number of files written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab: dict[str, set[str]] = {}
    for q in questions:
        words = []
        for token in q.text.split():
            word = "".join(ch for ch in token if ch.isalnum()).lower()
            if word:
                words.append(word)
        for word in words:
            vocab.setdefault(word, set()).update(words)
    for concept in extra_concepts:
        vocab.setdefault(concept.lower(), set()).add(concept.lower())

    for word, related in sorted(vocab.items()):
        lines = [
            f"{word.capitalize()} is a recurring subject in introductory course material "
            f"and appears throughout reference works on the topic."
        ]
        for other in sorted(related - {word}):
            lines.append(
                f"Discussions of {word} often consider {other} and describe how the "
                f"two interact in practice."
            )
        lines.append(
            f"A standard treatment of {word} first defines the term, then surveys its "
            f"history, its measurement, and the debates that continue to surround it. "
            f"Worked examples show how {word} behaves in simple settings before the "
            f"treatment moves on to harder cases, common misconceptions, and the open "
            f"questions practitioners still argue about today."
        )
        (out / f"{normalize_term(word)}.txt").write_text("\n".join(lines), "utf-8")
    return len(vocab)


class Retriever:
    """Fetch, chunk, embed, and rank knowledge for one retrieval query."""

    def __init__(
        self,
        gateway: LlmGateway,
        cfg: RunConfig,
        *,
        wikipedia: WikipediaClient | None = None,
        conceptnet: ConceptNetClient | None = None,
        fixture: FixtureCorpus | None = None,
    ):
        self.gateway = gateway
        self.cfg = cfg
        if fixture is None and cfg.corpus_dir is not None:
            fixture = FixtureCorpus(cfg.corpus_dir)
        self.fixture = fixture
        self.wikipedia = wikipedia or WikipediaClient(cache_dir=cfg.cache_dir)
        self.conceptnet = conceptnet or ConceptNetClient(edge_limit=cfg.conceptnet_edge_limit)

    def fetch(self, concept: str, source: KnowledgeSource) -> SourceDocument:
        if self.fixture is not None:
            return self.fixture.fetch(concept, source)
        if source is KnowledgeSource.WIKIPEDIA:
            return self.wikipedia.fetch(concept)
        return self.conceptnet.fetch(concept)

    def retrieve(self, query: RetrievalQuery, source: KnowledgeSource) -> list[KnowledgeChunk]:
        """Global top-k chunks across all concepts (per-concept mode optional).

        Concepts whose fetch fails are skipped; only a fully failed fetch set
        raises AllConceptsFailed.
        """
        if not query.concepts.concepts:
            raise ValueError("query concepts must be non-empty")

        per_concept_chunks: list[list[KnowledgeChunk]] = []
        for concept in query.concepts.concepts:
            try:
                doc = self.fetch(concept, source)
            except (NotFound, Unreachable) as exc:
                logger.info("skipping concept %r: %s", concept, exc)
                continue
            if not doc.text.split():
                continue
            per_concept_chunks.append(
                chunk_text(doc, query.chunk_size, query.chunk_overlap)
            )
        all_chunks = [chunk for group in per_concept_chunks for chunk in group]
        if not all_chunks:
            raise AllConceptsFailed(
                f"no documents retrieved for any of {len(query.concepts.concepts)} concepts"
            )

        texts = [query.question_text] + [c.text for c in all_chunks]
        vectors = self.gateway.embed(texts, self.cfg.embedding_model)
        query_vec, chunk_vecs = vectors[0], vectors[1:]

        if self.cfg.per_concept_top_k:
            selected: list[KnowledgeChunk] = []
            offset = 0
            for group in per_concept_chunks:
                pairs = list(zip(group, chunk_vecs[offset : offset + len(group)]))
                selected.extend(rank_chunks(query_vec, pairs, query.top_k))
                offset += len(group)
            return selected
        return rank_chunks(query_vec, list(zip(all_chunks, chunk_vecs)), query.top_k)
