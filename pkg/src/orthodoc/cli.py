"""``orthodoc`` command line.

Exit codes: 0 success, 1 validation error (bad input, missing file, usage),
2 runtime error (backend failure, diverged training, I/O). Diagnostics go to
standard error; results go to standard output or ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import fields
from pathlib import Path

from . import CONFIG_SCHEMA_VERSION, __version__
from .config import EngineConfig, load_config

log = logging.getLogger("orthodoc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# (flag, config field, type, help)
_CONFIG_FLAGS = [
    ("--store", "store", str, "corpus store directory"),
    ("--graph", "graph", str, "knowledge graph JSON"),
    ("--index", "index", str, "retrieval index JSON (default <store>/index.json)"),
    ("--weights", "weights", str, "classifier weights JSON"),
    ("--lexicon", "lexicon", str, "entity lexicon JSONL"),
    ("--max-chunk-tokens", "max_chunk_tokens", int, None),
    ("--overlap-tokens", "overlap_tokens", int, None),
    ("--window-tokens", "window_tokens", int, "co-occurrence window"),
    ("--k", "k", int, "passages per query"),
    ("--depth", "depth", int, "graph expansion depth"),
    ("--k1", "k1", float, None),
    ("--b", "b", float, None),
    ("--d", "d", int, "embedding width"),
    ("--seed", "seed", int, None),
    ("--lr", "lr", float, "learning rate"),
    ("--epochs", "epochs", int, None),
    ("--tau", "tau", float, "grounding threshold"),
    ("--policy", "policy", str, "strict or lenient"),
    ("--template-id", "template_id", str, None),
    ("--backend", "backend", str, "template or http"),
    ("--backend-url", "backend_url", str, "HTTP backend base URL"),
    ("--max-in-flight", "max_in_flight", int, None),
    ("--bootstrap-resamples", "bootstrap_resamples", int, None),
]
assert {f for _, f, _, _ in _CONFIG_FLAGS} == {f.name for f in fields(EngineConfig)}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration (flags override --config, which overrides defaults)")
    g.add_argument("--config", help="JSON config file")
    g.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    for flag, dest, typ, help_ in _CONFIG_FLAGS:
        g.add_argument(flag, dest=dest, type=typ, default=None, help=help_)
    p.add_argument("--out", help="write the main result here instead of standard output")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="orthodoc", description="Grounded orthopedic CT report engine.")
    parser.add_argument("--version", action="store_true", help="print engine and config schema versions")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    common = [_common()]

    p = sub.add_parser("ingest", parents=common, help="chunk a JSONL corpus into a store")
    p.add_argument("corpus", help="corpus JSONL file")

    sub.add_parser("build-graph", parents=common, help="extract the knowledge graph from the store")
    sub.add_parser("index", parents=common, help="build the BM25 index for the store")

    p = sub.add_parser("train-head", parents=common, help="train the fusion classifier")
    p.add_argument("cases", help="directory of labelled case JSON files")

    p = sub.add_parser("diagnose", parents=common, help="predict the condition for one case")
    p.add_argument("case", help="case JSON file")

    p = sub.add_parser("retrieve", parents=common, help="rank passages for a query")
    p.add_argument("query", help="query text")

    p = sub.add_parser("report", parents=common, help="generate a verified LaTeX report for one case")
    p.add_argument("case", help="case JSON file")
    p.add_argument("--no-cot", action="store_true", help="single-pass generation without section planning")

    p = sub.add_parser("evaluate", parents=common, help="score predictions and reports on a dataset")
    p.add_argument("dataset", help="dataset directory with a test/ folder")
    p.add_argument("--ratings", help="reviewer ratings JSON {case_id: 1-5}")
    p.add_argument("--tables-dir", help="also write LaTeX tables into this directory")

    p = sub.add_parser("ablate", parents=common, help="compare RAG and CoT on/off")
    p.add_argument("dataset", help="dataset directory with a test/ folder")
    p.add_argument("--variants", default="rag,cot", help="comma-separated ablations (rag, cot)")
    p.add_argument("--ratings", help="reviewer ratings JSON {case_id: 1-5}")
    p.add_argument("--tables-dir", help="also write LaTeX tables into this directory")
    return parser


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_tables(tables: dict[str, str], directory: str | None) -> None:
    if not directory:
        return
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, tex in tables.items():
        (d / f"{name}.tex").write_text(tex, encoding="utf-8")


def _backend(cfg: EngineConfig):
    from .backend import HttpBackend, TemplateBackend

    if cfg.backend == "template":
        return TemplateBackend()
    url = cfg.backend_url or os.environ.get("ORTHODOC_BACKEND_URL")
    if not url:
        raise ValueError("http backend needs --backend-url or ORTHODOC_BACKEND_URL")
    return HttpBackend(url, os.environ.get("ORTHODOC_BACKEND_KEY"))


def cmd_ingest(args, cfg: EngineConfig) -> None:
    from .corpus import Store, load_corpus

    store = Store.build(load_corpus(args.corpus), cfg.max_chunk_tokens, cfg.overlap_tokens)
    store.save(cfg.store)
    _emit(_dump({"store": cfg.store, "documents": len(store.documents), "passages": len(store.passages),
                 "fingerprint": store.fingerprint}), args.out)


def cmd_build_graph(args, cfg: EngineConfig) -> None:
    from .corpus import Store
    from .kgraph import Lexicon, build_graph, save_graph

    if not cfg.lexicon:
        raise ValueError("build-graph needs --lexicon (or 'lexicon' in the config file)")
    store = Store.load(cfg.store)
    graph = build_graph(store.passages, Lexicon.load(cfg.lexicon), cfg.window_tokens, store.fingerprint)
    save_graph(graph, cfg.graph)
    _emit(_dump({"graph": cfg.graph, "entities": len(graph.entities), "relations": len(graph.relations),
                 "communities": len(set(graph.communities.values()))}), args.out)


def cmd_index(args, cfg: EngineConfig) -> None:
    from .corpus import Store
    from .retrieval import build_index

    store = Store.load(cfg.store)
    index = build_index(store.passages, store.fingerprint)
    index.save(cfg.index_path)
    _emit(_dump({"index": str(cfg.index_path), "terms": len(index.postings),
                 "passages": index.passage_count}), args.out)


def cmd_train_head(args, cfg: EngineConfig) -> None:
    from .cases import load_cases
    from .fusion import TrainConfig, accuracy, make_examples, save_weights, train_head

    cases = load_cases(args.cases)
    weights, trace = train_head(cases, TrainConfig(lr=cfg.lr, epochs=cfg.epochs, seed=cfg.seed, d=cfg.d))
    save_weights(weights, cfg.weights)
    acc = accuracy(weights, make_examples(cases, weights))
    _emit(_dump({"weights": cfg.weights, "cases": len(cases), "epochs": cfg.epochs,
                 "initial_loss": trace[0], "final_loss": trace[-1], "train_accuracy": acc}), args.out)


def cmd_diagnose(args, cfg: EngineConfig) -> None:
    from .cases import load_case
    from .fusion import load_weights, predict

    case = load_case(args.case)
    pred = predict(case, load_weights(cfg.weights))
    _emit(_dump({
        "case_id": case.case_id,
        "predicted": pred.predicted,
        "probability": pred.probability,
        "probabilities": dict(zip(pred.class_labels, map(float, pred.probabilities))),
    }), args.out)


def _retriever(cfg: EngineConfig):
    from .corpus import Store
    from .kgraph import load_graph
    from .retrieval import InvertedIndex, Retriever

    store = Store.load(cfg.store)
    for path, what in ((Path(cfg.graph), "knowledge graph"), (cfg.index_path, "retrieval index")):
        if not path.exists():
            raise FileNotFoundError(f"{what} not found: {path}")
    graph = load_graph(cfg.graph, store.fingerprint)
    index = InvertedIndex.load(cfg.index_path)
    if index.fingerprint and index.fingerprint != store.fingerprint:
        raise ValueError(f"retrieval index {cfg.index_path} has corpus fingerprint {index.fingerprint[:12]}, "
                         f"store {cfg.store} has {store.fingerprint[:12]}; rerun 'orthodoc index'")
    return store, Retriever(index, graph, k1=cfg.k1, b=cfg.b)


def cmd_retrieve(args, cfg: EngineConfig) -> None:
    from .retrieval import Query

    store, retriever = _retriever(cfg)
    result = retriever(Query(args.query, cfg.k, cfg.depth))
    _emit(_dump({
        "query": args.query,
        "entities": sorted(retriever.graph.entities[e].canonical_name for e in result.entities),
        "ranked": [{"passage_id": s.passage_id, "score": s.score, "matched_terms": list(s.matched_terms),
                    "text": store.passage(s.passage_id).text} for s in result.ranked],
    }), args.out)


def cmd_report(args, cfg: EngineConfig) -> None:
    from .cases import load_case
    from .fusion import load_weights, predict
    from .report import Reporter, emit_latex

    case = load_case(args.case)
    weights = load_weights(cfg.weights)
    store, retriever = _retriever(cfg)
    reporter = Reporter(retriever, store, _backend(cfg), cfg.tau, cfg.policy, cfg.k, cfg.depth,
                        cfg.max_in_flight, cot=not args.no_cot)
    _, report = reporter.run(case, predict(case, weights))
    tex = emit_latex(report, store, cfg.template_id)
    _emit(tex, args.out)
    if args.out:
        json_path = Path(args.out).with_suffix(".json")
        json_path.write_text(_dump(report.to_dict()), encoding="utf-8")
        log.info("wrote %s", json_path)


def cmd_evaluate(args, cfg: EngineConfig) -> None:
    from .evaluation import Variant, condition_table, evaluate, load_ratings, quality_table
    from .pipeline import load_workspace

    ws = load_workspace(args.dataset, cfg)
    summary = evaluate(ws, cfg, Variant(), _backend(cfg), load_ratings(args.ratings))
    tables = {
        "condition": condition_table([("OrthoDoc", summary.condition)]),
        "quality": quality_table([("OrthoDoc", summary.quality)]),
    }
    _write_tables(tables, args.tables_dir)
    _emit(_dump({**summary.to_dict(), "tables": tables}), args.out)


def cmd_ablate(args, cfg: EngineConfig) -> None:
    from .evaluation import ablation_comparisons, ablation_run, ablation_tables, load_ratings
    from .pipeline import load_workspace

    names = [v.strip() for v in args.variants.split(",") if v.strip()]
    ws = load_workspace(args.dataset, cfg)
    results = ablation_run(ws, cfg, names, _backend(cfg), load_ratings(args.ratings))
    tables = ablation_tables(results)
    _write_tables(tables, args.tables_dir)
    _emit(_dump({
        "variants": {v.name: s.to_dict() for v, s in results.items()},
        "comparisons": ablation_comparisons(results, cfg.bootstrap_resamples, cfg.seed),
        "tables": tables,
    }), args.out)


COMMANDS = {
    "ingest": cmd_ingest,
    "build-graph": cmd_build_graph,
    "index": cmd_index,
    "train-head": cmd_train_head,
    "diagnose": cmd_diagnose,
    "retrieve": cmd_retrieve,
    "report": cmd_report,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def _exit_code(exc: BaseException) -> int:
    chain = [exc]
    while chain[-1].__cause__ is not None:
        chain.append(chain[-1].__cause__)
    if any(isinstance(e, RuntimeError) for e in chain):
        return 2
    if isinstance(exc, (ValueError, FileNotFoundError, NotADirectoryError, KeyError)):
        return 1
    return 2


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    if args.version:
        print(f"orthodoc {__version__} (config schema {CONFIG_SCHEMA_VERSION})")
        return 0
    if not args.command:
        parser.print_usage(sys.stderr)
        print("orthodoc: error: a subcommand is required", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {f.name: getattr(args, f.name, None) for f in fields(EngineConfig)}
        cfg = load_config(args.config, **overrides)
        if args.print_config:
            sys.stdout.write(_dump(cfg.to_dict()))
            return 0
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            COMMANDS[args.command](args, cfg)
    except Exception as exc:
        code = _exit_code(exc)
        kind = "error" if code == 1 else "runtime error"
        print(f"orthodoc {args.command}: {kind}: {exc}", file=sys.stderr)
        return code
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
