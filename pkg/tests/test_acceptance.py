"""The ten acceptance criteria, each timed against its stated budget.

Every test appends one ``PASS``/``FAIL`` line, printed in the terminal
summary of the pytest run.
"""

from __future__ import annotations

import shutil
import subprocess
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from orthodoc.backend import BackendError, GenerationRequest, HttpBackend, PromptSpec, build_prompt
from orthodoc.cases import ImageFeatures
from orthodoc.config import EngineConfig
from orthodoc.corpus import Passage, tokenize
from orthodoc.evaluation import ConfusionMatrix, Variant, ablation_run, ablation_tables, condition_metrics
from orthodoc.fusion import (
    CLASS_LABELS,
    Example,
    FusionWeights,
    TrainConfig,
    accuracy,
    attend,
    cross_modal_attention,
    embed_text,
    loss_and_grads,
    make_examples,
    numerical_gradient_check,
    predict,
    softmax,
    train_head,
)
from orthodoc.latex import escape_latex
from orthodoc.report import ClaimKind, ClaimStatus, Reporter, emit_latex
from orthodoc.retrieval import bm25_score, build_index

from conftest import ACCEPTANCE_LINES, run_pipeline
from injection import FabricatingBackend, rescan
from oracles import bm25_reference, class_rates_reference
from stub_server import StubServer
from test_latex import GOLDEN, TEN_SPECIALS, wrap_fragment


@contextmanager
def criterion(number: int, title: str, budget_s: float):
    """Time the body against its budget and log one PASS/FAIL line."""
    t0 = time.perf_counter()
    note = ""
    ok = False
    try:
        yield
        elapsed = time.perf_counter() - t0
        ok = elapsed < budget_s
        if not ok:
            note = f" over budget {budget_s:g}s"
    except AssertionError as exc:
        note = f" ({str(exc).splitlines()[0][:120]})" if str(exc) else ""
        raise
    finally:
        elapsed = time.perf_counter() - t0
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} [{number:2d}] {title}: {elapsed:.2f}s{note}")
        print(ACCEPTANCE_LINES[-1])
    assert elapsed < budget_s, f"criterion {number} took {elapsed:.2f}s, budget {budget_s}s"


def test_01_metric_oracle():
    with criterion(1, "metric oracle equivalence", 1.0):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            n = int(rng.integers(2, 7))
            counts = rng.integers(0, 51, size=(n, n))
            counts[0, 0] += counts.sum() == 0
            cm = condition_metrics(ConfusionMatrix(tuple(map(str, range(n))), counts))
            ref = [class_rates_reference(counts.tolist(), i) for i in range(n)]
            assert abs(cm.accuracy - ref[0][0]) <= 1e-12
            for i in range(n):
                m = cm.per_class[str(i)]
                got = (m.sensitivity, m.specificity, m.precision, m.f1)
                assert max(abs(g - r) for g, r in zip(got, ref[i][1:])) <= 1e-12
        cm = condition_metrics(ConfusionMatrix(("A", "B"), [[8, 2], [3, 7]]))
        a = cm.per_class["A"]
        assert cm.accuracy == 0.75
        assert abs(a.sensitivity - 0.8) < 1e-12 and abs(a.specificity - 0.7) < 1e-12
        assert abs(a.f1 - 0.7619) < 1e-4


def test_02_bm25_oracle():
    with criterion(2, "BM25 oracle equivalence", 1.0):
        rng = np.random.default_rng(7)
        vocab = "fracture cast knee pain the of bone hip wrist radius spine".split()
        for trial in range(40):
            n = int(rng.integers(1, 21))
            texts = [" ".join(rng.choice(vocab, size=int(rng.integers(1, 16)))) for _ in range(n)]
            ps = [Passage(f"p{i}#0", f"p{i}", 0, t, len(tokenize(t))) for i, t in enumerate(texts)]
            idx = build_index(ps)
            toks = {p.passage_id: [(t.surface, t.is_content) for t in tokenize(p.text)] for p in ps}
            query = list(rng.choice(vocab + ["tumor"], size=int(rng.integers(1, 6))))
            k1, b = float(rng.uniform(0.2, 3)), float(rng.uniform(0, 1))
            for p in ps:
                ref = bm25_reference(query, toks, p.passage_id, k1, b)
                got = bm25_score(query, p.passage_id, idx, k1, b)
                assert abs(got - ref) <= 1e-9 * max(abs(ref), 1e-300) or got == ref == 0.0
        ps = [Passage("p0#0", "p0", 0, "fracture fracture cast", 3), Passage("p1#0", "p1", 0, "arthritis knee pain", 3)]
        assert abs(bm25_score(["fracture"], "p0#0", build_index(ps)) - 0.9531) < 1e-4


def test_03_attention_suite():
    with criterion(3, "attention and normalization suite (1000 trials)", 5.0):
        rng = np.random.default_rng(3)
        weights = [FusionWeights.init(8, seed=s) for s in range(10)]
        for trial in range(1000):
            w = weights[trial % 10]
            text = embed_text(" ".join(f"w{i}" for i in rng.integers(0, 60, int(rng.integers(1, 8)))), 8)
            n_patches = int(rng.integers(1, 9))
            patches = rng.standard_normal((n_patches, 8))
            fused, attn = attend(text, ImageFeatures(patches, "i"), w)
            assert np.abs(attn.sum(axis=1) - 1).max() < 1e-9
            assert abs(softmax(rng.standard_normal(5) * 10).sum() - 1) < 1e-9
            perm = rng.permutation(n_patches)
            assert np.allclose(cross_modal_attention(text, ImageFeatures(patches[perm], "i"), w), fused,
                               atol=1e-12, rtol=0)
            same = np.tile(patches[0], (n_patches, 1))
            _, uniform = attend(text, ImageFeatures(same, "i"), w)
            assert np.abs(uniform - 1 / n_patches).max() < 1e-12


def _grad_batch(seed, d=6, n=4):
    rng = np.random.default_rng(seed)
    w = FusionWeights.init(d, seed=seed)
    batch = [Example(embed_text(" ".join(f"t{j}" for j in rng.integers(0, 30, 4)), d),
                     ImageFeatures(rng.standard_normal((5, d)), "i"), int(rng.integers(0, len(CLASS_LABELS))))
             for _ in range(n)]
    return w, batch


def test_04_gradient_check():
    with criterion(4, "gradient check over 20 seeds plus fault injection", 30.0):
        worst = max(numerical_gradient_check(*_grad_batch(seed), eps=1e-5) for seed in range(20))
        assert worst < 1e-4, f"max relative error {worst:.2e}"

        def doubled(w_, b_):
            g = loss_and_grads(w_, b_)[1]
            g["w_query"] = g["w_query"] * 2
            return g

        w, batch = _grad_batch(99)
        assert numerical_gradient_check(w, batch, 1e-5, gradient=doubled) > 0.3


def test_05_training_sanity(workspace):
    with criterion(5, "training sanity on the bundled suite", 60.0):
        train = list(workspace.train)
        assert len(train) >= 60 and len({c.ground_truth for c in train}) == 6
        w, trace = train_head(train, TrainConfig(epochs=200))
        assert trace[-1] < 0.5 * trace[0], f"loss {trace[0]:.3f} -> {trace[-1]:.3f}"
        assert accuracy(w, make_examples(train, w)) >= 0.9


def test_06_hallucination_gate(workspace):
    with criterion(6, "hallucination gate on the injection suite", 10.0):
        cfg = EngineConfig()
        reporter = Reporter(workspace.retriever(cfg), workspace.store,
                            FabricatingBackend(workspace.store.passages[0].passage_id))
        cases = list(workspace.test)
        assert len(cases) >= 20
        injected = removed = 0
        for case in cases:
            _, report = reporter.run(case, predict(case, workspace.weights))
            fabricated = [c for _, c in report.claims() if c.sentence.startswith("Quantum zebra")]
            injected += len(fabricated)
            removed += sum(c.status is ClaimStatus.REMOVED for c in fabricated)
            tex = emit_latex(report, workspace.store)
            assert rescan(tex, workspace.store, cfg.tau) == []
            assert all(c.status is ClaimStatus.SUPPORTED for _, c in report.claims()
                       if c.kind is ClaimKind.FACTUAL and c.visible)
        assert injected == len(cases) and removed == injected


def test_07_ablation_direction(workspace):
    with criterion(7, "ablation directions and table layouts", 120.0):
        results = ablation_run(workspace, EngineConfig())
        base, no_rag, no_cot = results[Variant()], results[Variant(rag=False)], results[Variant(cot=False)]
        assert base.quality.factual_correctness >= no_rag.quality.factual_correctness
        assert base.quality.completeness > no_cot.quality.completeness
        for name, tex in ablation_tables(results).items():
            assert tex.encode() == (GOLDEN / f"{name}.tex").read_bytes(), f"{name} differs from golden"


def test_08_end_to_end_determinism(tmp_path, dataset_dir):
    with criterion(8, "end-to-end determinism with the template backend", 120.0):
        a = run_pipeline(tmp_path / "a", Path(dataset_dir))
        b = run_pipeline(tmp_path / "b", Path(dataset_dir))
        for key in ("graph", "weights", "report", "eval"):
            assert a[key].read_bytes() == b[key].read_bytes(), f"{key} differs between runs"
        assert a["report"].with_suffix(".json").read_bytes() == b["report"].with_suffix(".json").read_bytes()


def test_09_latex_validity(tmp_path):
    pdflatex = shutil.which("pdflatex")
    with criterion(9, "LaTeX validity (escape table; fixtures compile)", 300.0):
        for raw, esc in TEN_SPECIALS:
            assert escape_latex(raw) == esc
        assert pdflatex is not None, "pdflatex not installed here; fixture compilation runs in CI"
        for path in sorted(GOLDEN.glob("*.tex")):
            src = tmp_path / path.name
            src.write_text(wrap_fragment(path.read_text()))
            proc = subprocess.run([pdflatex, "-interaction=nonstopmode", "-halt-on-error", src.name],
                                  cwd=tmp_path, capture_output=True, text=True, timeout=120)
            assert proc.returncode == 0, f"{path.name} failed to compile"


# pdflatex cannot be installed in every sandbox; the escape half still runs
if shutil.which("pdflatex") is None:
    test_09_latex_validity = pytest.mark.xfail(
        reason="no LaTeX toolchain on this machine; CI installs texlive and runs this", strict=True
    )(test_09_latex_validity)


def test_10_http_backend_contract():
    spec = PromptSpec("background", "need", {"complaints": "pain"}, ("fracture", 0.9))
    request = GenerationRequest(build_prompt(spec), "case:background")
    with criterion(10, "HTTP backend contract against a stub server", 10.0):
        with StubServer(default=lambda p: (200, {"text": f"echo {p['request_id']}"})) as srv:
            t0 = time.monotonic()
            assert HttpBackend(srv.url).generate(request).text == "echo case:background"
            assert time.monotonic() - t0 < 1.0
        with StubServer(script=[(500, {}), (500, {})]) as srv:
            t0 = time.monotonic()
            resp = HttpBackend(srv.url).generate(request)
            elapsed = time.monotonic() - t0
            assert resp.text == "ok" and len(srv.requests) == 3
            assert 1.5 <= elapsed < 2.5, f"retry recovery took {elapsed:.2f}s"
        with StubServer(default=lambda p: (200, {"output": "x"})) as srv:
            t0 = time.monotonic()
            with pytest.raises(BackendError, match="'text'"):
                HttpBackend(srv.url).generate(request)
            assert time.monotonic() - t0 < 1.0 and len(srv.requests) == 1
