"""Glue for running the whole engine over a dataset directory.

A dataset directory holds ``corpus.jsonl``, ``lexicon.jsonl``, ``train/`` and
``test/`` case folders, and optionally ``ratings.json``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .cases import CaseRecord, load_cases
from .config import EngineConfig
from .corpus import Store, load_corpus
from .fusion import FusionWeights, TrainConfig, load_weights, train_head
from .kgraph import KnowledgeGraph, Lexicon, build_graph, load_graph
from .retrieval import InvertedIndex, Retriever, build_index


class DatasetError(ValueError):
    pass


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DatasetError(f"{what} not found: {path}")
    return path


@dataclass(frozen=True)
class Workspace:
    """Every artifact the pipeline needs, built or loaded once."""

    store: Store
    lexicon: Lexicon
    graph: KnowledgeGraph
    index: InvertedIndex
    weights: FusionWeights
    train: tuple[CaseRecord, ...]
    test: tuple[CaseRecord, ...]
    loss_trace: tuple[float, ...] = ()

    def retriever(self, cfg: EngineConfig, graph: KnowledgeGraph | None = None, rag: bool = True) -> Retriever:
        return Retriever(self.index, (graph or self.graph) if rag else None, k1=cfg.k1, b=cfg.b)


def build_workspace(dataset: str | Path, cfg: EngineConfig | None = None) -> Workspace:
    """Build every artifact in memory, trained classifier included."""
    cfg = cfg or EngineConfig()
    dataset = Path(dataset)
    docs = load_corpus(_require(dataset / "corpus.jsonl", "corpus"))
    lexicon = Lexicon.load(_require(dataset / "lexicon.jsonl", "lexicon"))
    store = Store.build(docs, cfg.max_chunk_tokens, cfg.overlap_tokens)
    graph = build_graph(store.passages, lexicon, cfg.window_tokens, store.fingerprint)
    index = build_index(store.passages, store.fingerprint)
    train = load_cases(_require(dataset / "train", "training cases"))
    test = load_cases(_require(dataset / "test", "test cases"))
    if not train:
        raise DatasetError(f"no training cases in {dataset / 'train'}")
    weights, trace = train_head(train, TrainConfig(lr=cfg.lr, epochs=cfg.epochs, seed=cfg.seed, d=cfg.d))
    return Workspace(store, lexicon, graph, index, weights, tuple(train), tuple(test), tuple(trace))


def load_workspace(dataset: str | Path, cfg: EngineConfig, need_train: bool = False) -> Workspace:
    """Load previously built artifacts named by ``cfg`` plus the dataset's cases."""
    dataset = Path(dataset)
    store = Store.load(_require(Path(cfg.store), "corpus store"))
    graph = load_graph(_require(Path(cfg.graph), "knowledge graph"), store.fingerprint)
    index = InvertedIndex.load(_require(cfg.index_path, "retrieval index"))
    if index.fingerprint and index.fingerprint != store.fingerprint:
        raise DatasetError(f"retrieval index {cfg.index_path} was built from a different corpus store")
    weights = load_weights(_require(Path(cfg.weights), "classifier weights"))
    lexicon_path = Path(cfg.lexicon) if cfg.lexicon else dataset / "lexicon.jsonl"
    lexicon = Lexicon.load(lexicon_path) if lexicon_path.exists() else graph.lexicon()
    test = load_cases(_require(dataset / "test", "test cases"))
    train = load_cases(_require(dataset / "train", "training cases")) if need_train else []
    return Workspace(store, lexicon, graph, index, weights, tuple(train), tuple(test))
