"""Local BM25 index over a JSONL document corpus, plus an optional remote backend."""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import httpx

from .errors import DuplicateIdError, EmptyCorpusError, RetrievalBackendError
from .protocol import escape_tags

logger = logging.getLogger(__name__)

DEFAULT_K = 3
NO_RESULTS = "No results found."

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    text: str


@dataclass(frozen=True)
class RetrievalHit:
    doc: Document
    score: float
    rank: int


@dataclass
class SearchIndex:
    docs: dict[str, Document]
    postings: dict[str, list[tuple[str, int]]]
    doc_lengths: dict[str, int]
    n_docs: int
    avg_length: float
    k1: float = 1.2
    b: float = 0.75
    idf: dict[str, float] = field(default_factory=dict)

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "index.json"
        payload = {
            "k1": self.k1,
            "b": self.b,
            "docs": [vars(self.docs[d]) for d in sorted(self.docs)],
        }
        path.write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "SearchIndex":
        p = Path(path)
        if p.is_dir():
            p = p / "index.json"
        payload = json.loads(p.read_text(encoding="utf-8"))
        docs = [Document(**d) for d in payload["docs"]]
        return build_index(docs, k1=payload["k1"], b=payload["b"])


def load_corpus(path: str | Path) -> list[Document]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                docs.append(Document(id=str(row["id"]), title=row["title"], text=row["text"]))
    return docs


def bm25_idf(n_docs: int, df: int) -> float:
    return math.log((n_docs - df + 0.5) / (df + 0.5) + 1.0)


def build_index(docs: Sequence[Document], k1: float = 1.2, b: float = 0.75) -> SearchIndex:
    if not docs:
        raise EmptyCorpusError("cannot index an empty corpus")
    by_id: dict[str, Document] = {}
    for d in docs:
        if d.id in by_id:
            raise DuplicateIdError(d.id)
        by_id[d.id] = d

    postings: dict[str, list[tuple[str, int]]] = {}
    lengths: dict[str, int] = {}
    for doc_id in sorted(by_id):
        terms = tokenize(by_id[doc_id].text)
        lengths[doc_id] = len(terms)
        for term, tf in sorted(Counter(terms).items()):
            postings.setdefault(term, []).append((doc_id, tf))

    n = len(by_id)
    avg = sum(lengths.values()) / n
    idf = {term: bm25_idf(n, len(plist)) for term, plist in postings.items()}
    return SearchIndex(by_id, postings, lengths, n, avg, k1, b, idf)


def _query_terms(query: str) -> list[str]:
    return list(dict.fromkeys(tokenize(query)))


def search(index: SearchIndex, query: str, k: int = DEFAULT_K) -> list[RetrievalHit]:
    if k < 1:
        raise ValueError("k must be positive")
    scores: dict[str, float] = {}
    for term in _query_terms(query):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf[term]
        for doc_id, tf in plist:
            norm = index.k1 * (1 - index.b + index.b * index.doc_lengths[doc_id] / index.avg_length)
            scores[doc_id] = scores.get(doc_id, 0.0) + idf * tf * (index.k1 + 1) / (tf + norm)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return [RetrievalHit(index.docs[d], s, r) for r, (d, s) in enumerate(ranked, 1)]


def format_information(hits: Iterable[RetrievalHit], max_chars: Optional[int] = 1000) -> str:
    lines = []
    for hit in hits:
        text = hit.doc.text if max_chars is None else hit.doc.text[:max_chars]
        lines.append(f"[{hit.rank}] {escape_tags(hit.doc.title)}: {escape_tags(text)}")
    return "\n".join(lines) if lines else NO_RESULTS


class LexicalRetriever:
    def __init__(self, index: SearchIndex, k: int = DEFAULT_K, max_chars: Optional[int] = 1000) -> None:
        self.index = index
        self.k = k
        self.max_chars = max_chars

    def search(self, query: str, k: Optional[int] = None) -> list[RetrievalHit]:
        return search(self.index, query, k or self.k)

    def information(self, query: str) -> str:
        return format_information(self.search(query), self.max_chars)


class RemoteRetriever:
    """Client for a search service speaking ``{"query", "k"} -> {"hits": [...]}``."""

    def __init__(
        self,
        endpoint: str,
        k: int = DEFAULT_K,
        max_chars: Optional[int] = 1000,
        timeout: float = 10.0,
        client: Optional[httpx.Client] = None,
    ) -> None:
        self.endpoint = endpoint
        self.k = k
        self.max_chars = max_chars
        self._client = client or httpx.Client(timeout=timeout)

    def search(self, query: str, k: Optional[int] = None) -> list[RetrievalHit]:
        try:
            resp = self._client.post(self.endpoint, json={"query": query, "k": k or self.k})
            resp.raise_for_status()
            rows = resp.json()["hits"]
        except (httpx.HTTPError, KeyError, ValueError) as exc:
            raise RetrievalBackendError(f"remote search failed: {exc}") from exc
        return [
            RetrievalHit(Document(str(r["id"]), r.get("title", ""), r.get("text", "")), float(r.get("score", 0.0)), i)
            for i, r in enumerate(rows, 1)
        ]

    def information(self, query: str) -> str:
        return format_information(self.search(query), self.max_chars)


def dense_search(config: dict, query: str, k: int = DEFAULT_K, index: Optional[SearchIndex] = None) -> list[RetrievalHit]:
    """Dispatch on ``config["backend"]``: ``lexical`` (needs ``index``) or ``remote``."""
    backend = config.get("backend", "lexical")
    if backend == "lexical":
        if index is None:
            raise ValueError("lexical backend needs an index")
        return search(index, query, k)
    if backend == "remote":
        return RemoteRetriever(config["endpoint"], timeout=config.get("timeout", 10.0)).search(query, k)
    raise ValueError(f"unknown retrieval backend {backend!r}")
