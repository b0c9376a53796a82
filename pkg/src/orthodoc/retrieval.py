"""BM25 retrieval over passages, optionally expanded through the knowledge graph."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import Passage, content_terms, tokenize
from .kgraph import KnowledgeGraph, Relation, spot_mentions

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
HOP_DISCOUNT = 0.5
EXPANSION_CAP = 32
INDEX_SCHEMA_VERSION = 1


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True)
class InvertedIndex:
    postings: Mapping[str, tuple[tuple[str, int], ...]]
    doc_lengths: Mapping[str, int]
    avg_doc_len: float
    passage_count: int
    fingerprint: str | None = None

    def __post_init__(self):
        tf: dict[str, dict[str, int]] = {pid: {} for pid in self.doc_lengths}
        for term, plist in self.postings.items():
            for pid, count in plist:
                tf[pid][term] = count
        object.__setattr__(self, "_tf", tf)

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def tf(self, term: str, passage_id: str) -> int:
        return self._tf[passage_id].get(term, 0)

    def terms_in(self, passage_id: str) -> Mapping[str, int]:
        return self._tf[passage_id]

    def to_dict(self) -> dict:
        return {
            "schema": "orthodoc.index",
            "version": INDEX_SCHEMA_VERSION,
            "fingerprint": self.fingerprint,
            "doc_lengths": dict(self.doc_lengths),
            "postings": {t: [list(p) for p in plist] for t, plist in self.postings.items()},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "InvertedIndex":
        if obj.get("schema") != "orthodoc.index" or obj.get("version") != INDEX_SCHEMA_VERSION:
            raise RetrievalError("unsupported index file")
        lengths = obj["doc_lengths"]
        n = len(lengths)
        return cls(
            {t: tuple((pid, int(c)) for pid, c in plist) for t, plist in obj["postings"].items()},
            lengths,
            sum(lengths.values()) / n if n else 0.0,
            n,
            obj.get("fingerprint"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "InvertedIndex":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_index(passages: Iterable[Passage], fingerprint: str | None = None) -> InvertedIndex:
    """Index content tokens of each passage; lengths count every token."""
    postings: dict[str, list[tuple[str, int]]] = {}
    lengths: dict[str, int] = {}
    for p in passages:
        toks = tokenize(p.text)
        lengths[p.passage_id] = len(toks)
        counts = Counter(t.surface for t in toks if t.is_content)
        for term in sorted(counts):
            postings.setdefault(term, []).append((p.passage_id, counts[term]))
    n = len(lengths)
    return InvertedIndex(
        {t: tuple(v) for t, v in sorted(postings.items())},
        lengths,
        sum(lengths.values()) / n if n else 0.0,
        n,
        fingerprint,
    )


def _idf(df: int, n: int) -> float:
    return math.log((n - df + 0.5) / (df + 0.5) + 1.0)


def _term_score(term: str, passage_id: str, index: InvertedIndex, k1: float, b: float) -> float:
    tf = index.tf(term, passage_id)
    if tf == 0:
        return 0.0
    norm = 1.0 - b + b * index.doc_lengths[passage_id] / index.avg_doc_len
    return _idf(index.df(term), index.passage_count) * tf * (k1 + 1.0) / (tf + k1 * norm)


def _check_params(k1: float, b: float) -> None:
    if not k1 > 0 or not 0.0 <= b <= 1.0:
        raise RetrievalError(f"need k1 > 0 and 0 <= b <= 1, got k1={k1}, b={b}")


def bm25_score(query_terms: Sequence[str], passage_id: str, index: InvertedIndex,
               k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> float:
    """Okapi BM25 of one passage. Repeated query terms count once."""
    _check_params(k1, b)
    if passage_id not in index.doc_lengths:
        raise RetrievalError(f"unknown passage {passage_id!r}")
    return sum(_term_score(t, passage_id, index, k1, b) for t in dict.fromkeys(query_terms))


def weighted_scores(term_weights: Mapping[str, float], index: InvertedIndex,
                    k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> dict[str, float]:
    """BM25 with per-term weights, for every passage with a nonzero score."""
    _check_params(k1, b)
    scores: dict[str, float] = {}
    for term, weight in term_weights.items():
        for pid, _ in index.postings.get(term, ()):
            scores[pid] = scores.get(pid, 0.0) + weight * _term_score(term, pid, index, k1, b)
    return {pid: s for pid, s in scores.items() if s > 0.0}


def expansion_hops(seeds: Iterable[int], graph: KnowledgeGraph, depth: int,
                   cap: int = EXPANSION_CAP) -> dict[int, int]:
    """Breadth-first expansion returning ``entity_id -> hop distance``.

    Only entities in a seed's community are eligible. Each hop ranks new
    candidates by their heaviest edge into the current frontier (then by id)
    and admits them until ``cap`` non-seed entities have been collected.
    """
    seeds = sorted(set(seeds))
    n = len(graph.entities)
    for s in seeds:
        if not 0 <= s < n:
            raise RetrievalError(f"unknown entity {s}")
    hops = {s: 0 for s in seeds}
    if depth <= 0 or not seeds:
        return hops
    allowed = {graph.communities[s] for s in seeds}
    adj = graph.adjacency()
    frontier = seeds
    admitted = 0
    for hop in range(1, depth + 1):
        best: dict[int, float] = {}
        for node in frontier:
            for nbr, w in adj[node].items():
                if nbr in hops or graph.communities[nbr] not in allowed:
                    continue
                if w > best.get(nbr, 0.0):
                    best[nbr] = w
        ranked = sorted(best, key=lambda e: (-best[e], e))
        frontier = []
        for ent in ranked:
            if admitted >= cap:
                break
            hops[ent] = hop
            frontier.append(ent)
            admitted += 1
        if not frontier:
            break
    return hops


def expand_with_graph(seeds: Iterable[int], graph: KnowledgeGraph, depth: int,
                      cap: int = EXPANSION_CAP) -> set[int]:
    return set(expansion_hops(seeds, graph, depth, cap))


@dataclass(frozen=True)
class Query:
    text: str
    k: int = 5
    expansion_depth: int = 1
    entity_hints: tuple[int, ...] = ()

    def __post_init__(self):
        if self.k < 1:
            raise RetrievalError("k must be >= 1")
        if self.expansion_depth < 0:
            raise RetrievalError("expansion_depth must be >= 0")


@dataclass(frozen=True)
class ScoredPassage:
    passage_id: str
    score: float
    matched_terms: tuple[str, ...]
    via_entities: tuple[int, ...] = ()


@dataclass(frozen=True)
class RetrievalResult:
    query: Query
    ranked: tuple[ScoredPassage, ...]
    entities: frozenset[int] = frozenset()
    relations: tuple[Relation, ...] = ()
    candidates: int = 0

    @property
    def passage_ids(self) -> list[str]:
        return [s.passage_id for s in self.ranked]


@dataclass
class Retriever:
    """Bundles an index with an optional graph and scoring parameters."""

    index: InvertedIndex
    graph: KnowledgeGraph | None = None
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    cap: int = EXPANSION_CAP
    hop_discount: float = HOP_DISCOUNT

    def __call__(self, query: Query) -> RetrievalResult:
        return retrieve(query, self.index, self.graph, k1=self.k1, b=self.b, cap=self.cap,
                        hop_discount=self.hop_discount)


def retrieve(query: Query, index: InvertedIndex, graph: KnowledgeGraph | None = None, *,
             k1: float = DEFAULT_K1, b: float = DEFAULT_B, cap: int = EXPANSION_CAP,
             hop_discount: float = HOP_DISCOUNT) -> RetrievalResult:
    """Rank passages for ``query``.

    Entities spotted in the query (by the graph's own names and aliases) are
    expanded ``query.expansion_depth`` hops. Each expanded entity's
    canonical-name tokens then join the query with weight ``hop_discount ** hop``.
    Passing ``graph=None`` (or an empty graph) gives plain BM25.
    """
    if graph is not None and graph.built_from and index.fingerprint and graph.built_from != index.fingerprint:
        raise RetrievalError(
            f"index fingerprint {index.fingerprint[:12]} does not match graph {graph.built_from[:12]}"
        )
    weights: dict[str, float] = {t: 1.0 for t in content_terms(query.text)}
    term_sources: dict[str, set[int]] = {}
    hops: dict[int, int] = {}
    if graph is not None and graph.entities:
        surfaces = [t.surface for t in tokenize(query.text)]
        seeds = {graph.entity_id(m.canonical_name) for m in spot_mentions(surfaces, graph.lexicon())}
        seeds.update(query.entity_hints)
        hops = expansion_hops(seeds, graph, query.expansion_depth, cap)
        for ent, hop in sorted(hops.items()):
            if hop == 0:
                continue
            w = hop_discount**hop
            for term in content_terms(graph.entities[ent].canonical_name):
                if w > weights.get(term, 0.0):
                    weights[term] = w
                term_sources.setdefault(term, set()).add(ent)
    scores = weighted_scores(weights, index, k1, b)
    order = sorted(scores, key=lambda pid: (-scores[pid], pid))
    ranked = []
    for pid in order[: query.k]:
        present = index.terms_in(pid)
        matched = tuple(t for t in weights if t in present)
        via = sorted({e for t in matched for e in term_sources.get(t, ())})
        ranked.append(ScoredPassage(pid, scores[pid], matched, tuple(via)))
    ents = frozenset(hops)
    rels = tuple(r for r in graph.relations if r.src in ents and r.dst in ents) if graph is not None else ()
    return RetrievalResult(query, tuple(ranked), ents, rels, len(scores))
