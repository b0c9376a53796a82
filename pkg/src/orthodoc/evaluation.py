"""Condition and report-quality metrics, ablation runs and result tables."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .backend import Backend, TemplateBackend
from .cases import CaseRecord
from .config import EngineConfig
from .corpus import content_set, tokenize
from .fusion import predict
from .kgraph import Lexicon, spot_mentions
from .latex import booktabs_table
from .report import (
    EVIDENCE_SECTIONS,
    SECTION_ORDER,
    ClaimKind,
    ClaimStatus,
    Report,
    Reporter,
    ReportPlan,
    SectionKind,
    jaccard,
    label_text,
)


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------- condition metrics


@dataclass(frozen=True)
class ConfusionMatrix:
    classes: tuple[str, ...]
    counts: np.ndarray  # rows = truth, cols = predicted

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        n = len(self.classes)
        if counts.shape != (n, n):
            raise EvalError(f"counts must be {n}x{n}, got {counts.shape}")
        if (counts < 0).any():
            raise EvalError("counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(predictions: Sequence[str], labels: Sequence[str], classes: Sequence[str]) -> ConfusionMatrix:
    if len(predictions) != len(labels):
        raise EvalError(f"{len(predictions)} predictions for {len(labels)} labels")
    pos = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for pred, truth in zip(predictions, labels):
        for value in (pred, truth):
            if value not in pos:
                raise EvalError(f"unknown label {value!r}")
        counts[pos[truth], pos[pred]] += 1
    return ConfusionMatrix(tuple(classes), counts)


@dataclass(frozen=True)
class ClassMetrics:
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    degenerate: tuple[str, ...] = ()  # names of ratios that were 0/0


@dataclass(frozen=True)
class ConditionMetrics:
    accuracy: float
    macro_sensitivity: float
    macro_specificity: float
    macro_f1: float
    macro_precision: float
    per_class: Mapping[str, ClassMetrics]

    @property
    def degenerate(self) -> bool:
        return any(m.degenerate for m in self.per_class.values())

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "per_class"}
        out["per_class"] = {c: {**asdict(m), "degenerate": list(m.degenerate)} for c, m in self.per_class.items()}
        return out


def _ratio(num: float, den: float, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def condition_metrics(matrix: ConfusionMatrix) -> ConditionMetrics:
    """One-vs-rest rates per class, macro-averaged. 0/0 ratios become 0 and are flagged."""
    total = matrix.total
    if total == 0:
        raise EvalError("confusion matrix is empty")
    counts = matrix.counts
    per_class = {}
    for i, cls in enumerate(matrix.classes):
        tp = int(counts[i, i])
        fn = int(counts[i].sum()) - tp
        fp = int(counts[:, i].sum()) - tp
        tn = total - tp - fn - fp
        flags: list[str] = []
        sens = _ratio(tp, tp + fn, "sensitivity", flags)
        spec = _ratio(tn, tn + fp, "specificity", flags)
        prec = _ratio(tp, tp + fp, "precision", flags)
        f1 = _ratio(2 * prec * sens, prec + sens, "f1", flags)
        per_class[cls] = ClassMetrics(sens, spec, prec, f1, tuple(flags))
    vals = list(per_class.values())
    return ConditionMetrics(
        accuracy=int(np.trace(counts)) / total,
        macro_sensitivity=sum(m.sensitivity for m in vals) / len(vals),
        macro_specificity=sum(m.specificity for m in vals) / len(vals),
        macro_f1=sum(m.f1 for m in vals) / len(vals),
        macro_precision=sum(m.precision for m in vals) / len(vals),
        per_class=per_class,
    )


def load_predictions(path: str | Path) -> dict[str, str]:
    """External predictions as a JSON object ``{case_id: label}``."""
    path = Path(path)
    if not path.is_file():
        raise EvalError(f"predictions file not found: {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
        raise EvalError(f"{path}: expected an object mapping case ids to labels")
    return data


def score_predictions(predictions: Mapping[str, str], cases: Sequence[CaseRecord],
                      classes: Sequence[str]) -> ConditionMetrics:
    """Score a third-party system's predictions on the same cases."""
    missing = [c.case_id for c in cases if c.case_id not in predictions]
    if missing:
        raise EvalError(f"no prediction for case(s): {', '.join(missing[:5])}")
    preds = [predictions[c.case_id] for c in cases]
    return condition_metrics(confusion_matrix(preds, [c.ground_truth for c in cases], classes))


# ---------------------------------------------------------------- report quality


def _visible(claims):
    return [c for c in claims if c.status is not ClaimStatus.REMOVED]


def completeness(report: Report) -> float:
    """Share of the seven sections that are present and non-empty.

    The evidence-bearing sections additionally need one supported claim.
    """
    have = dict(report.sections)
    score = 0
    for kind in SECTION_ORDER:
        claims = _visible(have.get(kind, ()))
        if not claims:
            continue
        if kind in EVIDENCE_SECTIONS and not any(c.status is ClaimStatus.SUPPORTED for c in claims):
            continue
        score += 1
    return score / len(SECTION_ORDER)


def _section_entities(claims, lexicon: Lexicon | None) -> set[str]:
    text = " ".join(c.sentence for c in claims)
    if lexicon is None:
        return set(content_set(text))
    return {m.canonical_name for m in spot_mentions([t.surface for t in tokenize(text)], lexicon)}


@dataclass(frozen=True)
class CoherenceParts:
    ordered: float
    shared: float
    diagnosis_in_plan: float
    degenerate: bool = False

    @property
    def value(self) -> float:
        return (self.ordered + self.shared + self.diagnosis_in_plan) / 3


def coherence_parts(report: Report, lexicon: Lexicon | None = None) -> CoherenceParts:
    """The three coherence components.

    Entities are lexicon mentions when a lexicon is given, content tokens
    otherwise. A report with at most one distinct entity counts as fully
    shared (flagged degenerate).
    """
    kinds = [k for k, _ in report.sections]
    ordered = 1.0 if kinds == list(SECTION_ORDER) else 0.0
    sections = [(k, _section_entities(_visible(c), lexicon)) for k, c in report.sections]
    all_entities = set().union(*(e for _, e in sections)) if sections else set()
    later = [(i, e) for i, (k, e) in enumerate(sections) if k is not SectionKind.BACKGROUND and e]
    degenerate = len(all_entities) <= 1 or not later
    if degenerate:
        shared = 1.0
    else:
        hits = sum(1 for i, ents in later if ents & set().union(*(e for _, e in sections[:i])))
        shared = hits / len(later)
    term = label_text(report.diagnosis)
    target = [t.surface for t in tokenize(term)]
    in_plan = 0.0
    for c in _visible(dict(report.sections).get(SectionKind.TREATMENT_PLAN, ())):
        words = [t.surface for t in tokenize(c.sentence)]
        if any(words[i : i + len(target)] == target for i in range(len(words) - len(target) + 1)):
            in_plan = 1.0
            break
    return CoherenceParts(ordered, shared, in_plan, degenerate)


def coherence(report: Report, lexicon: Lexicon | None = None) -> float:
    return coherence_parts(report, lexicon).value


def factual_counts(report: Report) -> tuple[int, int]:
    """(supported, all) factual claims, removed ones included."""
    factual = [c for _, c in report.claims() if c.kind is ClaimKind.FACTUAL]
    return sum(c.status is ClaimStatus.SUPPORTED for c in factual), len(factual)


def factual_correctness(report: Report) -> float:
    supported, total = factual_counts(report)
    return supported / total if total else 1.0


def content_relevance(report: Report, plan: ReportPlan) -> float:
    """Mean Jaccard between each evidence section's text and its retrieved passages."""
    have = dict(report.sections)
    scores = []
    for kind in EVIDENCE_SECTIONS:
        section = content_set(" ".join(c.sentence for c in _visible(have.get(kind, ()))))
        entry = plan.sections.get(kind)
        retrieved: frozenset[str] = frozenset()
        if entry is not None:
            retrieved = frozenset().union(*(content_set(e.text) for e in entry.evidence))
        scores.append(jaccard(section, retrieved) if retrieved else 0.0)
    return sum(scores) / len(scores)


def overall_quality(completeness: float, coherence: float, content_relevance: float,
                    factual_correctness: float) -> float:
    """Aggregate score on a 1 to 10 scale."""
    parts = (completeness, coherence, content_relevance, factual_correctness)
    for p in parts:
        if not 0.0 <= p <= 1.0:
            raise EvalError(f"component {p} outside [0, 1]")
    return 1.0 + 9.0 * sum(parts) / 4


def load_ratings(path: str | Path | None) -> dict[str, float]:
    """Optional reviewer ratings ``{case_id: 1..5}``, rescaled to [0, 1]."""
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise EvalError(f"ratings file not found: {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    out = {}
    for case_id, r in sorted(data.items()):
        if isinstance(r, bool) or not isinstance(r, (int, float)) or not 1 <= r <= 5:
            raise EvalError(f"{path}: rating for {case_id!r} must be a number in [1, 5]")
        out[case_id] = (r - 1) / 4
    return out


@dataclass(frozen=True)
class ReportQualityMetrics:
    completeness: float
    coherence: float
    content_relevance: float
    factual_correctness: float
    user_satisfaction: float | None
    oqs: float
    degenerate: tuple[str, ...] = ()


def report_quality(report: Report, plan: ReportPlan, lexicon: Lexicon | None = None,
                   rating: float | None = None) -> ReportQualityMetrics:
    comp = completeness(report)
    coh = coherence_parts(report, lexicon)
    rel = content_relevance(report, plan)
    fc = factual_correctness(report)
    flags = []
    if coh.degenerate:
        flags.append("coherence")
    if factual_counts(report)[1] == 0:
        flags.append("factual_correctness")
    return ReportQualityMetrics(comp, coh.value, rel, fc, rating, overall_quality(comp, coh.value, rel, fc),
                                tuple(flags))


# ---------------------------------------------------------------- runs and ablations


@dataclass(frozen=True)
class Variant:
    rag: bool = True
    cot: bool = True

    @property
    def name(self) -> str:
        return f"rag={'on' if self.rag else 'off'},cot={'on' if self.cot else 'off'}"


@dataclass(frozen=True)
class EvalSummary:
    variant: Variant
    n_cases: int
    condition: ConditionMetrics
    quality: ReportQualityMetrics  # means over cases
    per_case: Mapping[str, ReportQualityMetrics] = field(default_factory=dict)

    def scores(self, metric: str) -> list[float]:
        return [getattr(self.per_case[c], metric) for c in sorted(self.per_case)]

    def to_dict(self) -> dict:
        return {
            "variant": {"name": self.variant.name, "rag": self.variant.rag, "cot": self.variant.cot},
            "n_cases": self.n_cases,
            "condition": self.condition.to_dict(),
            "quality": asdict(self.quality),
            "per_case": {c: asdict(m) for c, m in sorted(self.per_case.items())},
        }


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def evaluate(workspace, cfg: EngineConfig, variant: Variant = Variant(), backend: Backend | None = None,
             ratings: Mapping[str, float] | None = None, cases: Sequence[CaseRecord] | None = None,
             graph=None) -> EvalSummary:
    """Predict and report every test case, then aggregate by case id.

    ``graph`` overrides the workspace graph (used to instrument graph reads).
    With RAG off no graph is handed to retrieval and expansion depth is 0.
    """
    cases = sorted(cases if cases is not None else workspace.test, key=lambda c: c.case_id)
    if not cases:
        raise EvalError("no cases to evaluate")
    unlabeled = [c.case_id for c in cases if c.ground_truth is None]
    if unlabeled:
        raise EvalError(f"case(s) without ground truth: {', '.join(unlabeled[:5])}")
    ratings = ratings or {}
    retriever = workspace.retriever(cfg, graph=graph, rag=variant.rag)
    reporter = Reporter(retriever, workspace.store, backend or TemplateBackend(), cfg.tau, cfg.policy, cfg.k,
                        cfg.depth if variant.rag else 0, cfg.max_in_flight, cot=variant.cot)
    lexicon = workspace.lexicon
    preds, per_case = [], {}
    for case in cases:
        prediction = predict(case, workspace.weights)
        preds.append(prediction.predicted)
        plan, report = reporter.run(case, prediction)
        per_case[case.case_id] = report_quality(report, plan, lexicon, ratings.get(case.case_id))
    classes = workspace.weights.class_labels
    cond = condition_metrics(confusion_matrix(preds, [c.ground_truth for c in cases], classes))
    vals = list(per_case.values())
    rated = [m.user_satisfaction for m in vals if m.user_satisfaction is not None]
    mean = ReportQualityMetrics(
        completeness=_mean([m.completeness for m in vals]),
        coherence=_mean([m.coherence for m in vals]),
        content_relevance=_mean([m.content_relevance for m in vals]),
        factual_correctness=_mean([m.factual_correctness for m in vals]),
        user_satisfaction=_mean(rated) if rated else None,
        oqs=_mean([m.oqs for m in vals]),
    )
    return EvalSummary(variant, len(cases), cond, mean, per_case)


ABLATIONS = {
    "rag": (Variant(rag=True, cot=True), Variant(rag=False, cot=True)),
    "cot": (Variant(rag=True, cot=True), Variant(rag=True, cot=False)),
}


def ablation_run(workspace, cfg: EngineConfig, ablations: Sequence[str] = ("rag", "cot"),
                 backend: Backend | None = None, ratings: Mapping[str, float] | None = None,
                 graph=None) -> dict[Variant, EvalSummary]:
    """Evaluate the base variant and each requested ablation, sharing runs."""
    unknown = [a for a in ablations if a not in ABLATIONS]
    if unknown:
        raise EvalError(f"unknown ablation(s): {', '.join(unknown)}; choose from {', '.join(ABLATIONS)}")
    out: dict[Variant, EvalSummary] = {}
    for name in ablations:
        for variant in ABLATIONS[name]:
            if variant not in out:
                out[variant] = evaluate(workspace, cfg, variant, backend, ratings, graph=graph)
    return out


class CountingGraph:
    """Read-through proxy that counts attribute reads on a knowledge graph."""

    def __init__(self, graph):
        object.__setattr__(self, "_graph", graph)
        object.__setattr__(self, "reads", 0)

    def __getattr__(self, name):
        object.__setattr__(self, "reads", self.reads + 1)
        return getattr(self._graph, name)

    def __bool__(self):
        return True


@dataclass(frozen=True)
class BootstrapResult:
    mean_diff: float
    ci_low: float
    ci_high: float
    n_resamples: int
    seed: int


def bootstrap_compare(a: Sequence[float], b: Sequence[float], n_resamples: int = 1000,
                      seed: int = 0) -> BootstrapResult:
    """Paired bootstrap of mean(a - b) with a 95% percentile interval.

    The interval is widened if needed so it always contains the observed
    mean difference.
    """
    if len(a) != len(b):
        raise EvalError(f"paired samples differ in length ({len(a)} vs {len(b)})")
    if len(a) < 5:
        raise EvalError("need at least 5 paired observations")
    if n_resamples < 100:
        raise EvalError("need at least 100 resamples")
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    observed = float(diff.mean())
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(diff), size=(n_resamples, len(diff)))
    means = diff[idx].mean(axis=1)
    low, high = np.percentile(means, [2.5, 97.5])
    return BootstrapResult(observed, min(float(low), observed), max(float(high), observed), n_resamples, seed)


# ---------------------------------------------------------------- tables

ROW_NAMES = {
    "rag": ("OrthoDoc (RAG)", "OrthoDoc (No RAG)"),
    "cot": ("OrthoDoc (CoT)", "OrthoDoc (No CoT)"),
}
TABLE_HEADERS = {
    "condition": (r"\textbf{Model}", r"\textbf{Acc (\%)}", r"\textbf{Sen (\%)}", r"\textbf{Spec (\%)}",
                  r"\textbf{F1}"),
    "quality": (r"\textbf{Model}", r"\textbf{Comp (\%)}", r"\textbf{Cohe (\%)}", r"\textbf{OQS (1-10)}"),
    "rag_condition": (r"\textbf{Model}", r"\textbf{Acc} (\%)", r"\textbf{Sen} (\%)", r"\textbf{Spe} (\%)",
                      r"\textbf{F1} (\%)"),
    "rag_report": (r"\textbf{Model}", r"\textbf{C} (\%)", r"\textbf{F} (\%)", r"\textbf{R} (\%)",
                   r"\textbf{U} (\%)"),
    "cot_report": (r"\textbf{Model}", r"\textbf{CR (\%)}", r"\textbf{FC (\%)}", r"\textbf{C (\%)}",
                   r"\textbf{US (\%)}"),
}
MISSING = "--"


def pct(x: float | None) -> str:
    return MISSING if x is None else f"{100 * x:.2f}"


def condition_row(name: str, m: ConditionMetrics, f1_percent: bool = False) -> list[str]:
    f1 = pct(m.macro_f1) if f1_percent else f"{m.macro_f1:.2f}"
    return [name, pct(m.accuracy), pct(m.macro_sensitivity), pct(m.macro_specificity), f1]


def condition_table(rows: Sequence[tuple[str, ConditionMetrics]]) -> str:
    """Accuracy, sensitivity, specificity in percent; F1 unitless."""
    return booktabs_table(TABLE_HEADERS["condition"], [condition_row(n, m) for n, m in rows], "lcccc")


def quality_table(rows: Sequence[tuple[str, ReportQualityMetrics]]) -> str:
    body = [[n, pct(q.completeness), pct(q.coherence), f"{q.oqs:.1f}"] for n, q in rows]
    # four columns under a five-column spec, as in the reference layout
    return booktabs_table(TABLE_HEADERS["quality"], body, "lcccc")


def rag_condition_table(on: EvalSummary, off: EvalSummary) -> str:
    """Condition metrics for RAG on/off, every column (F1 included) in percent."""
    rows = [condition_row(n, s.condition, f1_percent=True) for n, s in zip(ROW_NAMES["rag"], (on, off))]
    return booktabs_table(TABLE_HEADERS["rag_condition"], rows, "lcccc")


def rag_report_table(on: EvalSummary, off: EvalSummary) -> str:
    rows = []
    for name, s in zip(ROW_NAMES["rag"], (on, off)):
        q = s.quality
        rows.append([name, pct(q.content_relevance), pct(q.factual_correctness), pct(q.completeness),
                     pct(q.user_satisfaction)])
    return booktabs_table(TABLE_HEADERS["rag_report"], rows, "lcccc")


def cot_report_table(on: EvalSummary, off: EvalSummary) -> str:
    rows = []
    for name, s in zip(ROW_NAMES["cot"], (on, off)):
        q = s.quality
        rows.append([name, pct(q.content_relevance), pct(q.factual_correctness), pct(q.completeness),
                     pct(q.user_satisfaction)])
    return booktabs_table(TABLE_HEADERS["cot_report"], rows, "lcccc")


def ablation_tables(results: Mapping[Variant, EvalSummary]) -> dict[str, str]:
    base = results.get(Variant())
    out = {}
    no_rag = results.get(Variant(rag=False))
    if base and no_rag:
        out["rag_condition"] = rag_condition_table(base, no_rag)
        out["rag_report"] = rag_report_table(base, no_rag)
    no_cot = results.get(Variant(cot=False))
    if base and no_cot:
        out["cot_report"] = cot_report_table(base, no_cot)
    return out


def ablation_comparisons(results: Mapping[Variant, EvalSummary], n_resamples: int = 1000,
                         seed: int = 0) -> dict[str, dict]:
    """Paired bootstrap of the base variant against each ablated one."""
    base = results.get(Variant())
    out = {}
    for variant, summary in results.items():
        if base is None or variant == Variant():
            continue
        out[variant.name] = {
            metric: asdict(bootstrap_compare(base.scores(metric), summary.scores(metric), n_resamples, seed))
            for metric in ("completeness", "coherence", "content_relevance", "factual_correctness", "oqs")
        }
    return out
