"""Dictionary-driven knowledge graph: mentions, relations, communities."""

from __future__ import annotations

import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import Passage, tokenize

GRAPH_SCHEMA_VERSION = 1
DEFAULT_WINDOW_TOKENS = 12
MAX_PROPAGATION_ROUNDS = 100

ENTITY_TYPES = ("condition", "anatomy", "procedure", "symptom", "treatment", "other")
TYPED_RELATIONS = ("treats", "indicates", "located_in")

# Connective phrase (token surfaces) -> relation type it signals.
CONNECTIVES: dict[tuple[str, ...], str] = {
    ("treated", "with"): "treats",
    ("treated", "by"): "treats",
    ("managed", "with"): "treats",
    ("indicates",): "indicates",
    ("indicate",): "indicates",
    ("suggests",): "indicates",
    ("of", "the"): "located_in",
}


class GraphError(ValueError):
    pass


class FingerprintWarning(UserWarning):
    """The graph was built from a different corpus store than the caller's."""


def _valid_rel_type(rel_type: str) -> bool:
    return rel_type == "co_occurs" or rel_type in TYPED_RELATIONS or (
        rel_type.startswith("custom:") and len(rel_type) > len("custom:")
    )


@dataclass(frozen=True)
class LexiconEntry:
    pattern: str
    canonical_name: str
    entity_type: str = "other"
    rel_hints: tuple[str, ...] = ()

    @property
    def surfaces(self) -> tuple[str, ...]:
        return tuple(t.surface for t in tokenize(self.pattern))


class Lexicon:
    """Phrase dictionary mapping surface patterns to canonical entities."""

    def __init__(self, entries: Iterable[LexiconEntry]):
        self.entries: tuple[LexiconEntry, ...] = tuple(entries)
        self._phrases: dict[tuple[str, ...], LexiconEntry] = {}
        types: dict[str, str] = {}
        for e in self.entries:
            surfaces = e.surfaces
            if not surfaces:
                raise GraphError(f"lexicon pattern {e.pattern!r} has no tokens")
            if e.entity_type not in ENTITY_TYPES:
                raise GraphError(f"unknown entity type {e.entity_type!r} for {e.canonical_name!r}")
            for hint in e.rel_hints:
                if not _valid_rel_type(hint):
                    raise GraphError(f"unknown relation hint {hint!r} for {e.canonical_name!r}")
            prev = types.setdefault(e.canonical_name, e.entity_type)
            if prev != e.entity_type:
                raise GraphError(
                    f"canonical name {e.canonical_name!r} declared as both {prev} and {e.entity_type}"
                )
            existing = self._phrases.get(surfaces)
            if existing is not None and existing.canonical_name != e.canonical_name:
                raise GraphError(
                    f"pattern {e.pattern!r} maps to both {existing.canonical_name!r} and {e.canonical_name!r}"
                )
            self._phrases.setdefault(surfaces, e)
        self.max_len = max((len(k) for k in self._phrases), default=0)
        self._types = types
        hints: dict[str, set[str]] = defaultdict(set)
        for e in self.entries:
            hints[e.canonical_name].update(e.rel_hints)
        self._hints = {name: frozenset(h) for name, h in hints.items()}

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, surfaces: tuple[str, ...]) -> LexiconEntry | None:
        return self._phrases.get(surfaces)

    def aliases(self, canonical_name: str) -> list[str]:
        return [e.pattern for e in self.entries if e.canonical_name == canonical_name]

    def entity_type(self, canonical_name: str) -> str:
        return self._types[canonical_name]

    def rel_hints(self, canonical_name: str) -> frozenset[str]:
        return self._hints.get(canonical_name, frozenset())

    @classmethod
    def load(cls, path: str | Path) -> "Lexicon":
        path = Path(path)
        entries = []
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    entries.append(
                        LexiconEntry(
                            pattern=obj["pattern"],
                            canonical_name=obj.get("canonical", obj["pattern"]),
                            entity_type=obj.get("type", "other"),
                            rel_hints=tuple(obj.get("relations", ())),
                        )
                    )
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise GraphError(f"{path}:{lineno}: malformed lexicon entry ({exc})") from exc
        return cls(entries)


@dataclass(frozen=True)
class EntityMention:
    canonical_name: str
    entity_type: str
    start: int  # token index, inclusive
    end: int  # token index, exclusive
    passage_id: str = ""
    rel_hints: frozenset[str] = frozenset()


@dataclass(frozen=True)
class RelationMention:
    """A relation observed in one passage, endpoints still by canonical name."""

    src: str
    dst: str
    rel_type: str
    passage_id: str


@dataclass(frozen=True)
class Entity:
    entity_id: int
    canonical_name: str
    entity_type: str
    aliases: tuple[str, ...] = ()


@dataclass(frozen=True)
class Relation:
    src: int
    dst: int
    rel_type: str
    weight: float
    evidence: tuple[str, ...]


def spot_mentions(surfaces: Sequence[str], lexicon: Lexicon, passage_id: str = "") -> list[EntityMention]:
    mentions = []
    i, n = 0, len(surfaces)
    while i < n:
        hit = None
        for length in range(min(lexicon.max_len, n - i), 0, -1):
            entry = lexicon.lookup(tuple(surfaces[i : i + length]))
            if entry is not None:
                hit = (entry, length)
                break
        if hit is None:
            i += 1
            continue
        entry, length = hit
        mentions.append(
            EntityMention(
                entry.canonical_name,
                entry.entity_type,
                i,
                i + length,
                passage_id,
                lexicon.rel_hints(entry.canonical_name),
            )
        )
        i += length
    return mentions


def extract_entities(passage: Passage, lexicon: Lexicon) -> list[EntityMention]:
    """Longest-match, left-to-right dictionary spotting over the passage tokens."""
    if len(lexicon) == 0:
        raise GraphError("lexicon is empty")
    surfaces = [t.surface for t in tokenize(passage.text)]
    return spot_mentions(surfaces, lexicon, passage.passage_id)


def _contains(seq: Sequence[str], sub: tuple[str, ...]) -> bool:
    k = len(sub)
    return any(tuple(seq[i : i + k]) == sub for i in range(len(seq) - k + 1))


def extract_relations(
    passage: Passage, mentions: Sequence[EntityMention], window_tokens: int = DEFAULT_WINDOW_TOKENS
) -> list[RelationMention]:
    """Co-occurrence and connective-typed relations between nearby mentions.

    Two mentions are related when their start tokens are at most
    ``window_tokens`` apart. Every such pair gets ``co_occurs``; a typed
    relation is added, oriented in reading order, when a connective phrase
    sits in the gap between them and either endpoint's lexicon hints allow
    that relation type.
    """
    surfaces = [t.surface for t in tokenize(passage.text)]
    ordered = sorted(mentions, key=lambda m: m.start)
    out: list[RelationMention] = []
    seen = set()

    def emit(rel):
        if rel not in seen:
            seen.add(rel)
            out.append(rel)

    for i, a in enumerate(ordered):
        for b in ordered[i + 1 :]:
            if b.start - a.start > window_tokens:
                break
            if a.canonical_name == b.canonical_name:
                continue
            emit(RelationMention(a.canonical_name, b.canonical_name, "co_occurs", passage.passage_id))
            gap = surfaces[a.end : b.start]
            hints = a.rel_hints | b.rel_hints
            for phrase, rel_type in CONNECTIVES.items():
                if rel_type in hints and _contains(gap, phrase):
                    emit(RelationMention(a.canonical_name, b.canonical_name, rel_type, passage.passage_id))
    return out


@dataclass(frozen=True)
class KnowledgeGraph:
    entities: tuple[Entity, ...]
    relations: tuple[Relation, ...]
    communities: Mapping[int, int] = field(default_factory=dict)
    built_from: str | None = None
    window_tokens: int = DEFAULT_WINDOW_TOKENS

    def __post_init__(self):
        object.__setattr__(self, "_name_index", {e.canonical_name: e.entity_id for e in self.entities})

    @classmethod
    def empty(cls, built_from: str | None = None) -> "KnowledgeGraph":
        return cls((), (), {}, built_from)

    def entity_id(self, canonical_name: str) -> int:
        return self._name_index[canonical_name]

    def adjacency(self) -> dict[int, dict[int, float]]:
        """Undirected weighted adjacency; parallel relations of different types add up."""
        cached = self.__dict__.get("_adj_cache")
        if cached is not None:
            return cached
        adj: dict[int, dict[int, float]] = {e.entity_id: {} for e in self.entities}
        for r in self.relations:
            adj[r.src][r.dst] = adj[r.src].get(r.dst, 0.0) + r.weight
            adj[r.dst][r.src] = adj[r.dst].get(r.src, 0.0) + r.weight
        object.__setattr__(self, "_adj_cache", adj)
        return adj

    def lexicon(self) -> Lexicon:
        """Spotting dictionary over canonical names and aliases."""
        cached = self.__dict__.get("_lex_cache")
        if cached is not None:
            return cached
        entries = []
        for e in self.entities:
            for alias in (e.canonical_name, *e.aliases):
                entries.append(LexiconEntry(alias, e.canonical_name, e.entity_type))
        lex = Lexicon(_dedupe_entries(entries))
        object.__setattr__(self, "_lex_cache", lex)
        return lex

    def validate(self) -> None:
        ids = [e.entity_id for e in self.entities]
        if ids != list(range(len(ids))):
            raise GraphError("entity ids must be dense from 0 in order")
        names = [e.canonical_name for e in self.entities]
        if len(set(names)) != len(names):
            raise GraphError("duplicate canonical names")
        n = len(ids)
        for r in self.relations:
            if not (0 <= r.src < n and 0 <= r.dst < n):
                raise GraphError(f"relation endpoint missing from entities: {r.src}->{r.dst}")
            if r.src == r.dst:
                raise GraphError(f"self relation on entity {r.src}")
            if not _valid_rel_type(r.rel_type):
                raise GraphError(f"unknown relation type {r.rel_type!r}")
            if not r.evidence or r.weight != len(set(r.evidence)):
                raise GraphError(f"relation {r.src}->{r.dst} weight does not match its evidence")
        if set(self.communities) != set(ids):
            raise GraphError("communities must cover every entity exactly once")


def _dedupe_entries(entries):
    seen = set()
    out = []
    for e in entries:
        key = tuple(t.surface for t in tokenize(e.pattern))
        if key and key not in seen:
            seen.add(key)
            out.append(e)
    return out


def build_graph(passages: Iterable[Passage], lexicon: Lexicon, window_tokens: int = DEFAULT_WINDOW_TOKENS,
                built_from: str | None = None) -> KnowledgeGraph:
    """Extract mentions and relations from every passage and aggregate them.

    Entity ids follow first appearance in passage order. Relation weight is
    the number of distinct passages that evidence it; ``co_occurs`` edges are
    stored once with ``src < dst``.
    """
    if len(lexicon) == 0:
        raise GraphError("lexicon is empty")
    passages = list(passages)
    ids: dict[str, int] = {}
    evidence: dict[tuple[int, int, str], list[str]] = defaultdict(list)
    for p in passages:
        mentions = extract_entities(p, lexicon)
        for m in mentions:
            ids.setdefault(m.canonical_name, len(ids))
        for rel in extract_relations(p, mentions, window_tokens):
            src, dst = ids[rel.src], ids[rel.dst]
            if rel.rel_type == "co_occurs" and src > dst:
                src, dst = dst, src
            ev = evidence[(src, dst, rel.rel_type)]
            if p.passage_id not in ev:
                ev.append(p.passage_id)
    entities = tuple(
        Entity(i, name, lexicon.entity_type(name), tuple(a for a in lexicon.aliases(name) if a != name))
        for name, i in ids.items()
    )
    relations = tuple(
        Relation(src, dst, rel_type, float(len(ev)), tuple(ev))
        for (src, dst, rel_type), ev in sorted(evidence.items())
    )
    graph = KnowledgeGraph(entities, relations, {}, built_from, window_tokens)
    return KnowledgeGraph(entities, relations, detect_communities(graph), built_from, window_tokens)


def detect_communities(graph: KnowledgeGraph) -> dict[int, int]:
    """Label propagation with a fixed schedule.

    Labels start as entity ids. Nodes are visited in ascending id order and
    updated in place, each taking the neighbour label with the largest summed
    edge weight (ties: smallest label). Stops at a fixpoint or after
    ``MAX_PROPAGATION_ROUNDS`` sweeps. Community ids are then renumbered
    densely in order of each community's smallest member.
    """
    adj = graph.adjacency()
    labels = {e.entity_id: e.entity_id for e in graph.entities}
    for _ in range(MAX_PROPAGATION_ROUNDS):
        changed = False
        for node in sorted(labels):
            nbrs = adj.get(node)
            if not nbrs:
                continue
            totals: dict[int, float] = defaultdict(float)
            for nbr, w in nbrs.items():
                totals[labels[nbr]] += w
            best = min(totals, key=lambda lab: (-totals[lab], lab))
            if best != labels[node]:
                labels[node] = best
                changed = True
        if not changed:
            break
    dense: dict[int, int] = {}
    out = {}
    for node in sorted(labels):
        out[node] = dense.setdefault(labels[node], len(dense))
    return out


def graph_to_dict(graph: KnowledgeGraph) -> dict:
    return {
        "schema": "orthodoc.kgraph",
        "version": GRAPH_SCHEMA_VERSION,
        "built_from": graph.built_from,
        "window_tokens": graph.window_tokens,
        "entities": [
            {"entity_id": e.entity_id, "canonical_name": e.canonical_name,
             "entity_type": e.entity_type, "aliases": list(e.aliases)}
            for e in graph.entities
        ],
        "relations": [
            {"src": r.src, "dst": r.dst, "rel_type": r.rel_type, "weight": r.weight,
             "evidence": list(r.evidence)}
            for r in graph.relations
        ],
        "communities": [graph.communities[e.entity_id] for e in graph.entities],
    }


def graph_from_dict(obj: dict) -> KnowledgeGraph:
    if obj.get("schema") != "orthodoc.kgraph" or obj.get("version") != GRAPH_SCHEMA_VERSION:
        raise GraphError(
            f"unsupported graph schema {obj.get('schema')!r} version {obj.get('version')!r}"
        )
    try:
        entities = tuple(
            Entity(int(e["entity_id"]), e["canonical_name"], e["entity_type"], tuple(e.get("aliases", ())))
            for e in obj["entities"]
        )
        relations = tuple(
            Relation(int(r["src"]), int(r["dst"]), r["rel_type"], float(r["weight"]), tuple(r["evidence"]))
            for r in obj["relations"]
        )
        comm = obj["communities"]
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphError(f"malformed graph file: {exc}") from exc
    if len(comm) != len(entities):
        raise GraphError("communities must cover every entity exactly once")
    graph = KnowledgeGraph(
        entities, relations, {i: int(c) for i, c in enumerate(comm)}, obj.get("built_from"),
        int(obj.get("window_tokens", DEFAULT_WINDOW_TOKENS)),
    )
    graph.validate()
    return graph


def save_graph(graph: KnowledgeGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(graph), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_graph(path: str | Path, expected_fingerprint: str | None = None) -> KnowledgeGraph:
    """Load and validate a graph file.

    Emits :class:`FingerprintWarning` when ``expected_fingerprint`` is given
    and differs from the corpus fingerprint recorded in the file.
    """
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GraphError(f"{path}: not valid JSON ({exc})") from exc
    graph = graph_from_dict(obj)
    if expected_fingerprint is not None and graph.built_from != expected_fingerprint:
        warnings.warn(
            f"graph {path} was built from corpus {graph.built_from!r}, current store is {expected_fingerprint!r}",
            FingerprintWarning,
            stacklevel=2,
        )
    return graph
