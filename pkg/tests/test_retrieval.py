from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orthodoc.corpus import Passage, content_terms, tokenize
from orthodoc.kgraph import Entity, KnowledgeGraph, Lexicon, LexiconEntry, Relation, build_graph
from orthodoc.retrieval import (
    InvertedIndex,
    Query,
    RetrievalError,
    Retriever,
    bm25_score,
    build_index,
    expand_with_graph,
    retrieve,
)

from oracles import bm25_reference


def passages(*texts):
    return [Passage(f"p{i}#0", f"p{i}", 0, t, len(tokenize(t))) for i, t in enumerate(texts)]


class TestIndex:
    def test_avg_doc_len(self):
        idx = build_index(passages("fracture cast knee pain", "a b c d e f"))
        assert idx.avg_doc_len == 5.0
        assert idx.passage_count == 2

    def test_absent_token(self):
        idx = build_index(passages("fracture cast"))
        assert idx.postings.get("tumor", ()) == ()
        assert idx.df("tumor") == 0

    def test_rebuild_identical(self, tmp_path):
        ps = passages("fracture fracture cast", "arthritis knee pain")
        assert build_index(ps) == build_index(ps)
        build_index(ps, "fp").save(tmp_path / "i.json")
        assert InvertedIndex.load(tmp_path / "i.json") == build_index(ps, "fp")


class TestBM25:
    def test_no_overlap(self):
        idx = build_index(passages("fracture cast", "knee pain"))
        assert bm25_score(["tumor"], "p0#0", idx) == 0.0

    def test_hand_derived_single_term(self):
        idx = build_index(passages("fracture fracture cast", "arthritis knee pain"))
        idf = math.log((2 - 1 + 0.5) / (1 + 0.5) + 1)
        assert idf == pytest.approx(0.693147, abs=1e-6)
        expected = idf * (2 * 2.2) / (2 + 1.2)
        assert bm25_score(["fracture"], "p0#0", idx) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.9531, abs=1e-4)

    def test_doubling_tf_increases_score_with_b0(self):
        one = build_index(passages("fracture cast", "knee pain", "hip"))
        two = build_index(passages("fracture fracture cast cast", "knee pain", "hip"))
        q = ["fracture", "cast"]
        assert bm25_score(q, "p0#0", two, b=0.0) > bm25_score(q, "p0#0", one, b=0.0)

    def test_bad_params(self):
        idx = build_index(passages("fracture"))
        with pytest.raises(RetrievalError):
            bm25_score(["fracture"], "p0#0", idx, k1=0)
        with pytest.raises(RetrievalError):
            bm25_score(["fracture"], "p0#0", idx, b=1.5)
        with pytest.raises(RetrievalError):
            bm25_score(["fracture"], "nope", idx)

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.lists(st.sampled_from("fracture cast knee pain the of bone hip wrist".split()),
                          min_size=1, max_size=15), min_size=1, max_size=20),
        st.lists(st.sampled_from("fracture cast knee pain bone hip wrist tumor".split()), min_size=1, max_size=8),
        st.floats(0.1, 3.0), st.floats(0.0, 1.0),
    )
    def test_matches_reference(self, docs, query, k1, b):
        ps = passages(*(" ".join(d) for d in docs))
        idx = build_index(ps)
        toks = {p.passage_id: [(t.surface, t.is_content) for t in tokenize(p.text)] for p in ps}
        for p in ps:
            ref = bm25_reference(query, toks, p.passage_id, k1, b)
            got = bm25_score(query, p.passage_id, idx, k1, b)
            assert got == pytest.approx(ref, rel=1e-9, abs=1e-12)


def star_graph():
    # fracture(0) -- cast(1) w3, fracture -- radius(2) w1, singleton tumor(3)
    ents = (Entity(0, "fracture", "condition"), Entity(1, "cast", "treatment"),
            Entity(2, "radius", "anatomy"), Entity(3, "tumor", "condition"))
    rels = (Relation(0, 1, "co_occurs", 3.0, ("a#0", "b#0", "c#0")), Relation(0, 2, "co_occurs", 1.0, ("a#0",)))
    return KnowledgeGraph(ents, rels, {0: 0, 1: 0, 2: 0, 3: 1})


class TestExpansion:
    def test_depth_zero(self):
        assert expand_with_graph({0}, star_graph(), 0) == {0}

    def test_cap_excludes_seeds(self):
        assert expand_with_graph({0}, star_graph(), 1, cap=2) == {0, 1, 2}

    def test_cap_keeps_heaviest(self):
        assert expand_with_graph({0}, star_graph(), 1, cap=1) == {0, 1}

    def test_singleton_community(self):
        assert expand_with_graph({3}, star_graph(), 3) == {3}

    def test_unknown_seed(self):
        with pytest.raises(RetrievalError):
            expand_with_graph({9}, star_graph(), 1)


LEX = Lexicon([
    LexiconEntry("fracture", "fracture", "condition"),
    LexiconEntry("cast", "cast", "treatment"),
    LexiconEntry("wrist", "wrist", "anatomy"),
])


class TestRetrieve:
    def test_one_hop_neighbour_ranks_above_unrelated(self):
        # p0 links fracture and cast in the graph; p1 mentions only cast; p2 is unrelated
        ps = passages("fracture healed with cast", "plaster cast applied", "knee pain at night")
        g = build_graph(ps, LEX)
        idx = build_index(ps)
        res = retrieve(Query("fracture", k=3, expansion_depth=1), idx, g)
        assert res.passage_ids == ["p0#0", "p1#0"]
        # hand score for p1: the only matching term is 'cast' at weight 0.5
        assert res.ranked[1].score == pytest.approx(0.5 * bm25_score(["cast"], "p1#0", idx))
        assert res.ranked[1].via_entities == (g.entity_id("cast"),)
        plain = retrieve(Query("fracture", k=3, expansion_depth=0), idx, g)
        assert plain.passage_ids == ["p0#0"]

    def test_depth_zero_is_plain_bm25(self):
        ps = passages("fracture healed with cast", "plaster cast applied", "wrist fracture", "knee")
        g, idx = build_graph(ps, LEX), build_index(ps)
        a = retrieve(Query("wrist fracture cast", 4, 0), idx, g)
        b = retrieve(Query("wrist fracture cast", 4, 0), idx, None)
        assert [(s.passage_id, s.score) for s in a.ranked] == [(s.passage_id, s.score) for s in b.ranked]
        terms = content_terms("wrist fracture cast")
        for s in b.ranked:
            assert s.score == pytest.approx(bm25_score(terms, s.passage_id, idx))

    def test_k_larger_than_corpus(self):
        ps = passages("fracture", "cast", "knee")
        res = retrieve(Query("fracture cast", k=50, expansion_depth=0), build_index(ps))
        assert res.passage_ids == ["p0#0", "p1#0"]
        assert all(s.score > 0 for s in res.ranked)

    def test_ties_broken_by_passage_id(self):
        ps = passages("fracture x", "fracture x", "fracture x")
        res = retrieve(Query("fracture", k=3, expansion_depth=0), build_index(ps))
        assert res.passage_ids == ["p0#0", "p1#0", "p2#0"]

    def test_fingerprint_mismatch(self):
        ps = passages("fracture cast")
        g = build_graph(ps, LEX, built_from="aaa")
        with pytest.raises(RetrievalError, match="fingerprint"):
            retrieve(Query("fracture"), build_index(ps, "bbb"), g)

    def test_query_validation(self):
        with pytest.raises(RetrievalError):
            Query("x", k=0)
        with pytest.raises(RetrievalError):
            Query("x", expansion_depth=-1)

    def test_retriever_matches_function(self, workspace):
        r = Retriever(workspace.index, workspace.graph)
        q = Query("distal radius fracture treatment", 5, 1)
        assert r(q) == retrieve(q, workspace.index, workspace.graph)

    @settings(max_examples=25, deadline=None)
    @given(st.sampled_from(["wrist fracture", "knee osteoarthritis pain", "shoulder dislocation reduction",
                            "bone tumor night pain", "lumbar disc degeneration", "ankle sprain"]),
           st.integers(0, 2))
    def test_expansion_never_drops_candidates(self, workspace, text, depth):
        idx, g = workspace.index, workspace.graph
        shallow = retrieve(Query(text, k=1000, expansion_depth=depth), idx, g)
        deep = retrieve(Query(text, k=1000, expansion_depth=depth + 1), idx, g)
        assert set(shallow.passage_ids) <= set(deep.passage_ids)
        assert retrieve(Query(text, k=1000, expansion_depth=depth), idx, g) == shallow
