from __future__ import annotations

import abc
import math
import random
import re
import threading
from collections import Counter
from dataclasses import dataclass
from typing import AbstractSet, Dict, FrozenSet, Iterable, List, Optional

from docnav.corpus import Document, QAItem
from docnav.log_helper import log
from docnav.wire import ChannelPool, Endpoint, TransportError

"""
Page retrievers. Every retriever answers `(query, excluded, k)` with at most k ranked pages,
none of them excluded, sorted by descending score with ties broken by ascending index.
"""

BM25_K1 = 1.2
BM25_B = 0.75

TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> List[str]:
    """Lowercase, split on anything that is not a letter or digit."""
    return TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class RankedPage:
    index: int
    score: float


def rank(scores: Dict[int, float], excluded: AbstractSet[int], k: int) -> List[RankedPage]:
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    candidates = sorted(
        (RankedPage(index, score) for index, score in scores.items() if index not in excluded),
        key=lambda r: (-r.score, r.index),
    )
    return candidates[:k]


@dataclass(frozen=True)
class PageIndexStats:
    term_freqs: Dict[int, Dict[str, int]]
    page_lengths: Dict[int, int]
    doc_freqs: Dict[str, int]
    avg_length: float

    @property
    def n_pages(self) -> int:
        return len(self.page_lengths)

    def idf(self, term: str) -> float:
        df = self.doc_freqs.get(term, 0)
        return math.log(1 + (self.n_pages - df + 0.5) / (df + 0.5))

    def scores(self, query: str, k1: float = BM25_K1, b: float = BM25_B) -> Dict[int, float]:
        """BM25 score of every page. Repeated query terms count once."""
        terms = [t for t in dict.fromkeys(tokenize(query)) if t in self.doc_freqs]
        scores = {}
        for index, tf in self.term_freqs.items():
            score = 0.0
            norm = k1 * (1 - b + b * self.page_lengths[index] / self.avg_length) if terms else 0.0
            for term in terms:
                freq = tf.get(term, 0)
                if freq:
                    score += self.idf(term) * freq * (k1 + 1) / (freq + norm)
            scores[index] = score
        return scores


def build_index(doc: Document) -> PageIndexStats:
    term_freqs = {}
    page_lengths = {}
    doc_freqs: Counter[str] = Counter()
    for page in doc.pages:
        tokens = tokenize(page.text_body)
        tf = Counter(tokens)
        term_freqs[page.index] = dict(tf)
        page_lengths[page.index] = len(tokens)
        doc_freqs.update(tf.keys())
    avg_length = sum(page_lengths.values()) / len(page_lengths) if page_lengths else 0.0
    return PageIndexStats(
        term_freqs=term_freqs,
        page_lengths=page_lengths,
        doc_freqs=dict(doc_freqs),
        avg_length=avg_length,
    )


def retrieve(
    index: PageIndexStats,
    query: str,
    excluded: AbstractSet[int],
    k: int,
    k1: float = BM25_K1,
    b: float = BM25_B,
) -> List[RankedPage]:
    return rank(index.scores(query, k1, b), excluded, k)


def oracle_retrieve(
    qa: QAItem, n_pages: int, excluded: AbstractSet[int], k: int, pad: bool = True
) -> List[RankedPage]:
    """Unvisited evidence pages first (score 1.0), then the lowest unvisited non-evidence
    pages (score 0.0) when padding."""
    scores = {i: 1.0 for i in qa.evidence_pages if 1 <= i <= n_pages}
    if pad:
        for i in range(1, n_pages + 1):
            scores.setdefault(i, 0.0)
    return rank(scores, excluded, k)


class Retriever(abc.ABC):
    """Retriever bound to one episode's document."""

    @abc.abstractmethod
    def retrieve(self, query: str, excluded: AbstractSet[int], k: int) -> List[RankedPage]:
        pass

    def close(self):
        pass


class Bm25Retriever(Retriever):
    def __init__(self, stats: PageIndexStats, k1: float = BM25_K1, b: float = BM25_B):
        self.stats = stats
        self.k1 = k1
        self.b = b

    def retrieve(self, query: str, excluded: AbstractSet[int], k: int) -> List[RankedPage]:
        return retrieve(self.stats, query, excluded, k, self.k1, self.b)


class OracleRetriever(Retriever):
    def __init__(self, qa: QAItem, n_pages: int, pad: bool = True):
        self.qa = qa
        self.n_pages = n_pages
        self.pad = pad

    def retrieve(self, query: str, excluded: AbstractSet[int], k: int) -> List[RankedPage]:
        return oracle_retrieve(self.qa, self.n_pages, excluded, k, self.pad)


class NoisyRetriever(Retriever):
    """Replaces each result of `base`, with probability flip_prob, by a random unexcluded
    page outside the evidence set."""

    def __init__(
        self,
        base: Retriever,
        flip_prob: float,
        rng_seed: int,
        evidence: FrozenSet[int],
        n_pages: int,
        episode_key: str = "",
    ):
        if not 0.0 <= flip_prob <= 1.0:
            raise ValueError(f"flip_prob must lie in [0, 1], got {flip_prob}")
        self.base = base
        self.flip_prob = flip_prob
        self.evidence = evidence
        self.n_pages = n_pages
        self.rng = random.Random(f"{rng_seed}:{episode_key}")

    def retrieve(self, query: str, excluded: AbstractSet[int], k: int) -> List[RankedPage]:
        results = self.base.retrieve(query, excluded, k)
        taken = {r.index for r in results}
        noisy = []
        for r in results:
            if self.rng.random() < self.flip_prob:
                pool = [
                    i
                    for i in range(1, self.n_pages + 1)
                    if i not in excluded and i not in self.evidence and i not in taken
                ]
                if pool:
                    replacement = self.rng.choice(pool)
                    taken.add(replacement)
                    noisy.append(RankedPage(replacement, r.score))
                    continue
            noisy.append(r)
        return noisy

    def close(self):
        self.base.close()


def noisy_retrieve(
    base: Retriever, flip_prob: float, rng_seed: int, qa: QAItem, n_pages: int
) -> NoisyRetriever:
    return NoisyRetriever(
        base, flip_prob, rng_seed, qa.evidence_pages, n_pages, episode_key=qa.qa_id
    )


class BridgeRetriever(Retriever):
    """Ranking done by an external process over the wire framing:

        -> {"type": "retrieve", "doc_id", "qa_id", "query", "excluded": [...], "k"}
        <- {"type": "ranked", "pages": [{"index": i, "score": s}, ...]}

    Excluded and out-of-range pages in the reply are dropped.
    """

    def __init__(self, pool: ChannelPool, doc: Document, qa: QAItem, timeout: float):
        self.pool = pool
        self.doc = doc
        self.qa = qa
        self.timeout = timeout
        self._channel = pool.acquire()
        self._broken = False

    def retrieve(self, query: str, excluded: AbstractSet[int], k: int) -> List[RankedPage]:
        try:
            reply = self._channel.request(
                {
                    "type": "retrieve",
                    "doc_id": self.doc.doc_id,
                    "qa_id": self.qa.qa_id,
                    "query": query,
                    "excluded": sorted(excluded),
                    "k": k,
                },
                expect="ranked",
                timeout=self.timeout,
            )
            ranked = [
                RankedPage(int(p["index"]), float(p["score"])) for p in reply.get("pages", [])
            ]
        except (TransportError, KeyError, TypeError, ValueError) as e:
            self._broken = True
            raise TransportError(f"retriever bridge failed: {e}") from e

        scores: Dict[int, float] = {}
        for r in ranked:
            if 1 <= r.index <= self.doc.n_pages:
                scores.setdefault(r.index, r.score)
        return rank(scores, excluded, k)

    def close(self):
        self.pool.release(self._channel, broken=self._broken)


class RetrieverProvider(abc.ABC):
    """Hands out a fresh retriever per episode. Shared across worker threads."""

    @abc.abstractmethod
    def for_episode(self, doc: Document, qa: QAItem) -> Retriever:
        pass

    def close(self):
        pass


class Bm25Provider(RetrieverProvider):
    def __init__(self, k1: float = BM25_K1, b: float = BM25_B):
        self.k1 = k1
        self.b = b
        self._lock = threading.Lock()
        self._indexes: Dict[str, PageIndexStats] = {}

    def index(self, doc: Document) -> PageIndexStats:
        with self._lock:
            stats = self._indexes.get(doc.doc_id)
            if stats is None:
                stats = build_index(doc)
                if not stats.doc_freqs:
                    log.warning(
                        f"document {doc.doc_id} has no text layer, BM25 scores are all zero"
                    )
                self._indexes[doc.doc_id] = stats
            return stats

    def for_episode(self, doc: Document, qa: QAItem) -> Retriever:
        return Bm25Retriever(self.index(doc), self.k1, self.b)


class OracleProvider(RetrieverProvider):
    def __init__(self, pad: bool = True):
        self.pad = pad

    def for_episode(self, doc: Document, qa: QAItem) -> Retriever:
        return OracleRetriever(qa, doc.n_pages, self.pad)


class NoisyProvider(RetrieverProvider):
    def __init__(self, base: RetrieverProvider, flip_prob: float, rng_seed: int):
        if not 0.0 <= flip_prob <= 1.0:
            raise ValueError(f"flip_prob must lie in [0, 1], got {flip_prob}")
        self.base = base
        self.flip_prob = flip_prob
        self.rng_seed = rng_seed

    def for_episode(self, doc: Document, qa: QAItem) -> Retriever:
        return noisy_retrieve(
            self.base.for_episode(doc, qa), self.flip_prob, self.rng_seed, qa, doc.n_pages
        )

    def close(self):
        self.base.close()


class BridgeProvider(RetrieverProvider):
    def __init__(self, endpoint: Endpoint, connect_timeout: float, timeout: float):
        self.pool = ChannelPool(endpoint, connect_timeout)
        self.timeout = timeout

    def for_episode(self, doc: Document, qa: QAItem) -> Retriever:
        return BridgeRetriever(self.pool, doc, qa, self.timeout)

    def close(self):
        self.pool.close()


def make_provider(
    kind: str,
    flip_prob: float = 0.0,
    rng_seed: int = 0,
    endpoint: Optional[Endpoint] = None,
    connect_timeout: float = 10.0,
    timeout: float = 120.0,
    k1: float = BM25_K1,
    b: float = BM25_B,
) -> RetrieverProvider:
    """Provider for a parsed retriever spec: bm25, oracle, noisy (over bm25) or bridge."""
    if kind == "bm25":
        return Bm25Provider(k1, b)
    if kind == "oracle":
        return OracleProvider()
    if kind == "noisy":
        return NoisyProvider(Bm25Provider(k1, b), flip_prob, rng_seed)
    if kind == "bridge":
        if endpoint is None:
            raise ValueError("bridge retriever needs an endpoint")
        return BridgeProvider(endpoint, connect_timeout, timeout)
    raise ValueError(f"unknown retriever kind '{kind}'")


def evidence_recall(ranked: Iterable[RankedPage], evidence: AbstractSet[int]) -> float:
    if not evidence:
        return 0.0
    return len({r.index for r in ranked} & evidence) / len(evidence)
