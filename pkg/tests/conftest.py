from __future__ import annotations

import json

import pytest

from orthodoc.config import EngineConfig
from orthodoc.corpus import Document, Store
from orthodoc.pipeline import build_workspace
from orthodoc.synthetic import bundled_dataset


@pytest.fixture(scope="session")
def dataset_dir():
    return bundled_dataset()


@pytest.fixture(scope="session")
def workspace(dataset_dir):
    """Bundled suite built once with default settings (trains the head)."""
    return build_workspace(dataset_dir, EngineConfig())


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


def make_store(texts: dict[str, str]) -> Store:
    docs = [Document(doc_id, doc_id.title(), f"Source {doc_id}", text) for doc_id, text in texts.items()]
    return Store.build(docs)


@pytest.fixture(scope="session")
def ablation_results(workspace):
    """The base run plus one run per ablation, over the bundled test cases."""
    from orthodoc.evaluation import ablation_run

    return ablation_run(workspace, EngineConfig())


def run_cli(*argv) -> int:
    from orthodoc.cli import run

    return run([str(a) for a in argv])


def run_pipeline(work, dataset, report_case="test-fracture-00"):
    """Drive every CLI stage into ``work``; returns the artifact paths."""
    work.mkdir(parents=True, exist_ok=True)
    paths = {
        "store": work / "store",
        "graph": work / "graph.json",
        "weights": work / "weights.json",
        "report": work / "report.tex",
        "eval": work / "eval.json",
        "ablate": work / "ablate.json",
        "tables": work / "tables",
    }
    common = ["--store", paths["store"], "--graph", paths["graph"], "--weights", paths["weights"]]
    steps = [
        ["ingest", dataset / "corpus.jsonl", *common],
        ["build-graph", *common, "--lexicon", dataset / "lexicon.jsonl"],
        ["index", *common],
        ["train-head", dataset / "train", *common],
        ["report", dataset / "test" / f"{report_case}.json", *common, "--out", paths["report"]],
        ["evaluate", dataset, *common, "--out", paths["eval"]],
        ["ablate", dataset, *common, "--out", paths["ablate"], "--tables-dir", paths["tables"]],
    ]
    for step in steps:
        code = run_cli(*step, "--out", work / f"{step[0]}.out") if "--out" not in step else run_cli(*step)
        assert code == 0, f"{step[0]} exited {code}"
    return paths


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
