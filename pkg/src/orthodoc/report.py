"""Builds grounded reports one section at a time and renders them as LaTeX."""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from . import __version__
from .backend import (
    DEFAULT_MAX_IN_FLIGHT,
    Backend,
    Evidence,
    GenerationRequest,
    PromptSpec,
    build_prompt,
    generate_many,
)
from .cases import CaseRecord
from .corpus import Store, content_set, tokenize
from .fusion import ConditionPrediction
from .latex import escape_latex
from .retrieval import Query, RetrievalResult, Retriever

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.3
DEFAULT_K = 5
DEFAULT_DEPTH = 1
DIFFERENTIAL_THRESHOLD = 0.15
POLICIES = ("strict", "lenient")


class ReportError(ValueError):
    pass


class SectionKind(str, enum.Enum):
    BACKGROUND = "background"
    CLINICAL_PRESENTATION = "clinical_presentation"
    DIAGNOSTIC_PROCESS = "diagnostic_process"
    DIAGNOSIS_ASSESSMENT = "diagnosis_assessment"
    TREATMENT_PLAN = "treatment_plan"
    PATIENT_EDUCATION = "patient_education"
    CONCLUSION = "conclusion"


SECTION_ORDER = tuple(SectionKind)
HEADINGS = {
    SectionKind.BACKGROUND: "Patient Background",
    SectionKind.CLINICAL_PRESENTATION: "Clinical Presentation",
    SectionKind.DIAGNOSTIC_PROCESS: "Diagnostic Process",
    SectionKind.DIAGNOSIS_ASSESSMENT: "Diagnosis and Assessment",
    SectionKind.TREATMENT_PLAN: "Treatment Plan",
    SectionKind.PATIENT_EDUCATION: "Patient Education and Recommendations",
    SectionKind.CONCLUSION: "Conclusion",
}
# Sections whose factual content must be backed by retrieved evidence.
EVIDENCE_SECTIONS = (
    SectionKind.DIAGNOSTIC_PROCESS,
    SectionKind.DIAGNOSIS_ASSESSMENT,
    SectionKind.TREATMENT_PLAN,
)
NARRATIVE_SECTIONS = (SectionKind.BACKGROUND, SectionKind.CONCLUSION)
ADVISORY_SECTIONS = (SectionKind.TREATMENT_PLAN, SectionKind.PATIENT_EDUCATION)

IMPERATIVE_VERBS = frozenset(
    """
    apply attend avoid begin check consider continue contact do elevate ensure
    follow keep limit maintain monitor perform reduce report rest resume return
    review schedule seek start stop take use wear
    """.split()
)


class ClaimKind(str, enum.Enum):
    FACTUAL = "factual"
    ADVISORY = "advisory"
    NARRATIVE = "narrative"


class ClaimStatus(str, enum.Enum):
    UNVERIFIED = "unverified"
    SUPPORTED = "supported"
    FLAGGED = "flagged"
    REMOVED = "removed"


# A parse-time flag (unknown passage id) may still be removed by strict verification.
_TRANSITIONS = {
    ClaimStatus.UNVERIFIED: {ClaimStatus.SUPPORTED, ClaimStatus.FLAGGED, ClaimStatus.REMOVED},
    ClaimStatus.FLAGGED: {ClaimStatus.REMOVED},
    ClaimStatus.SUPPORTED: set(),
    ClaimStatus.REMOVED: set(),
}


@dataclass(frozen=True)
class EvidenceBinding:
    passage_id: str
    span: tuple[int, int]
    relevance: float


@dataclass(frozen=True)
class Claim:
    sentence: str
    kind: ClaimKind
    bindings: tuple[EvidenceBinding, ...] = ()
    status: ClaimStatus = ClaimStatus.UNVERIFIED
    case_fields: tuple[str, ...] = ()
    cited: tuple[str, ...] = ()  # every passage id the backend cited, valid or not
    primary: bool = False
    support: float | None = None

    def with_status(self, status: ClaimStatus, support: float | None = None) -> "Claim":
        if status not in _TRANSITIONS[self.status]:
            raise ReportError(f"illegal claim status transition {self.status.value} -> {status.value}")
        return replace(self, status=status, support=support)

    @property
    def visible(self) -> bool:
        return self.status is not ClaimStatus.REMOVED


@dataclass(frozen=True)
class SectionPlan:
    kind: SectionKind
    need: str
    retrieval: RetrievalResult | None
    evidence: tuple[Evidence, ...]


@dataclass(frozen=True)
class ReportPlan:
    case: CaseRecord
    prediction: ConditionPrediction
    differential: tuple[str, float] | None
    sections: Mapping[SectionKind, SectionPlan]
    fingerprint: str
    warnings: tuple[str, ...] = ()
    single_pass: bool = False


@dataclass(frozen=True)
class AuditEntry:
    section: SectionKind
    sentence: str
    score: float
    status: ClaimStatus
    reason: str


@dataclass(frozen=True)
class Report:
    case_id: str
    sections: tuple[tuple[SectionKind, tuple[Claim, ...]], ...]
    diagnosis: str
    metadata: Mapping[str, str] = field(default_factory=dict)
    audit: tuple[AuditEntry, ...] = ()
    verified: bool = False

    def section(self, kind: SectionKind) -> tuple[Claim, ...]:
        for k, claims in self.sections:
            if k == kind:
                return claims
        raise KeyError(kind)

    def claims(self) -> Iterable[tuple[SectionKind, Claim]]:
        for kind, claims in self.sections:
            for c in claims:
                yield kind, c

    @property
    def primary_claim(self) -> Claim:
        return next(c for c in self.section(SectionKind.DIAGNOSIS_ASSESSMENT) if c.primary)

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "diagnosis": self.diagnosis,
            "verified": self.verified,
            "metadata": dict(self.metadata),
            "sections": [
                {
                    "kind": kind.value,
                    "heading": HEADINGS[kind],
                    "claims": [
                        {
                            "sentence": c.sentence,
                            "kind": c.kind.value,
                            "status": c.status.value,
                            "primary": c.primary,
                            "support": c.support,
                            "case_fields": list(c.case_fields),
                            "cited": list(c.cited),
                            "bindings": [
                                {"passage_id": b.passage_id, "span": list(b.span), "relevance": b.relevance}
                                for b in c.bindings
                            ],
                        }
                        for c in claims
                    ],
                }
                for kind, claims in self.sections
            ],
            "audit": [
                {"section": a.section.value, "sentence": a.sentence, "score": a.score,
                 "status": a.status.value, "reason": a.reason}
                for a in self.audit
            ],
        }


def label_text(label: str) -> str:
    return label.replace("_", " ")


def _demographics_phrase(case: CaseRecord) -> str:
    d = case.demographics
    return " ".join(p for p in (f"{d.age:g}-year-old", d.sex, d.occupation) if p)


def section_needs(case: CaseRecord, predicted: str, differential: str | None) -> dict[SectionKind, str | None]:
    """Retrieval query text per section; ``None`` means no retrieval."""
    cond = label_text(predicted)
    return {
        SectionKind.BACKGROUND: f"{_demographics_phrase(case)} {case.history}".strip(),
        SectionKind.CLINICAL_PRESENTATION: case.complaints,
        SectionKind.DIAGNOSTIC_PROCESS: f"{case.complaints} {cond}",
        SectionKind.DIAGNOSIS_ASSESSMENT: f"{cond} {label_text(differential)}" if differential else cond,
        SectionKind.TREATMENT_PLAN: f"{cond} treatment",
        SectionKind.PATIENT_EDUCATION: f"{cond} management",
        SectionKind.CONCLUSION: None,
    }


def _differential(prediction: ConditionPrediction, threshold: float) -> tuple[str, float] | None:
    label, p = prediction.runner_up()
    return (label, p) if p >= threshold else None


def _evidence_for(result: RetrievalResult | None, store: Store) -> tuple[Evidence, ...]:
    if result is None:
        return ()
    return tuple(Evidence(s.passage_id, store.passage(s.passage_id).text) for s in result.ranked)


def plan_report(case: CaseRecord, prediction: ConditionPrediction, retriever: Retriever, store: Store,
                k: int = DEFAULT_K, depth: int = DEFAULT_DEPTH,
                differential_threshold: float = DIFFERENTIAL_THRESHOLD) -> ReportPlan:
    """Retrieve evidence for every section that needs it (one query each)."""
    if retriever.index.fingerprint and retriever.index.fingerprint != store.fingerprint:
        raise ReportError("retrieval index was not built from this corpus store")
    if not case.complaints.strip():
        raise ReportError(f"case {case.case_id} has no presenting complaints")
    diff = _differential(prediction, differential_threshold)
    needs = section_needs(case, prediction.predicted, diff[0] if diff else None)
    sections = {}
    for kind in SECTION_ORDER:
        need = needs[kind]
        result = retriever(Query(need, k, depth)) if need else None
        sections[kind] = SectionPlan(kind, need or "", result, _evidence_for(result, store))
    warnings = []
    if not any(sections[k].evidence for k in EVIDENCE_SECTIONS):
        warnings.append("no evidence retrieved; factual claims will fail verification")
    return ReportPlan(case, prediction, diff, sections, store.fingerprint, tuple(warnings))


def plan_single_pass(case: CaseRecord, prediction: ConditionPrediction, retriever: Retriever, store: Store,
                     k: int = DEFAULT_K, depth: int = DEFAULT_DEPTH,
                     differential_threshold: float = DIFFERENTIAL_THRESHOLD) -> ReportPlan:
    """One case-level retrieval shared by the whole report (no per-section planning)."""
    diff = _differential(prediction, differential_threshold)
    need = f"{case.complaints} {label_text(prediction.predicted)}"
    result = retriever(Query(need, k, depth))
    entry = SectionPlan(SectionKind.DIAGNOSTIC_PROCESS, need, result, _evidence_for(result, store))
    sections = {kind: replace(entry, kind=kind) for kind in SECTION_ORDER}
    warnings = () if entry.evidence else ("no evidence retrieved; factual claims will fail verification",)
    return ReportPlan(case, prediction, diff, sections, store.fingerprint, warnings, single_pass=True)


def _case_fields(case: CaseRecord) -> dict[str, str]:
    fields = {"demographics": _demographics_phrase(case)}
    if case.history:
        fields["history"] = case.history
    fields["complaints"] = case.complaints
    return fields


def section_request(plan: ReportPlan, kind: SectionKind | str) -> GenerationRequest:
    name = kind.value if isinstance(kind, SectionKind) else kind
    try:
        entry = plan.sections[SectionKind(name)]
    except ValueError:
        # "full_report": a single-pass plan shares one retrieval across sections
        entry = plan.sections[SectionKind.DIAGNOSTIC_PROCESS] if plan.single_pass else None
    spec = PromptSpec(
        section=name,
        need=entry.need if entry and entry.need else "synthesis of the preceding sections",
        case=_case_fields(plan.case),
        prediction=(plan.prediction.predicted, plan.prediction.probability),
        differential=plan.differential,
        evidence=entry.evidence if entry else (),
    )
    return GenerationRequest(build_prompt(spec), f"{plan.case.case_id}:{name}")


_MARKER = re.compile(r"\[([EC]):([^\]\s]+)\]")
_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


@dataclass(frozen=True)
class ParsedSentence:
    text: str
    evidence_ids: tuple[str, ...]
    case_fields: tuple[str, ...]


def split_sentences(text: str) -> list[ParsedSentence]:
    """Split a backend response into sentences and pull out their markers."""
    if not text or not text.strip():
        raise ReportError("backend response is empty")
    if text.count("[E:") + text.count("[C:") != len(_MARKER.findall(text)):
        raise ReportError("backend response has a malformed evidence marker")
    chunks: list[str] = []
    for piece in _SENTENCE_SPLIT.split(" ".join(text.split())):
        if chunks and not _MARKER.sub("", piece).strip(" ."):
            chunks[-1] = f"{chunks[-1]} {piece}"  # marker trailing after the full stop
        elif piece.strip():
            chunks.append(piece)
    out = []
    for chunk in chunks:
        markers = _MARKER.findall(chunk)
        clean = " ".join(_MARKER.sub("", chunk).split())
        clean = re.sub(r"\s+([.!?,;:])", r"\1", clean).strip()
        if not clean.strip(" ."):
            continue
        out.append(ParsedSentence(
            clean,
            tuple(dict.fromkeys(v for t, v in markers if t == "E")),
            tuple(dict.fromkeys(v for t, v in markers if t == "C")),
        ))
    if not out:
        raise ReportError("backend response contains no sentences")
    return out


_SUBSPAN = re.compile(r"[^.;:!?]+")


def best_span(claim: str, passage_text: str) -> tuple[tuple[int, int], float]:
    """Clause of the passage with the highest content-token Jaccard to ``claim``."""
    target = content_set(claim)
    best = ((0, len(passage_text)), jaccard(target, content_set(passage_text)))
    for m in _SUBSPAN.finditer(passage_text):
        score = jaccard(target, content_set(m.group()))
        if score > best[1]:
            start = m.start() + len(m.group()) - len(m.group().lstrip())
            best = ((start, m.end()), score)
    return best


def jaccard(a: frozenset[str] | set[str], b: frozenset[str] | set[str]) -> float:
    union = a | b
    return len(a & b) / len(union) if union else 0.0


def classify_claim(kind: SectionKind, sentence: ParsedSentence) -> ClaimKind:
    if kind in NARRATIVE_SECTIONS or sentence.case_fields:
        return ClaimKind.NARRATIVE
    if kind in ADVISORY_SECTIONS:
        words = [t.surface for t in tokenize(sentence.text)]
        if words and words[0] in IMPERATIVE_VERBS:
            return ClaimKind.ADVISORY
    return ClaimKind.FACTUAL


def make_claim(kind: SectionKind, sentence: ParsedSentence, store: Store) -> Claim:
    bindings = []
    unknown = False
    for pid in sentence.evidence_ids:
        if pid not in store:
            unknown = True
            continue
        span, score = best_span(sentence.text, store.passage(pid).text)
        bindings.append(EvidenceBinding(pid, span, score))
    claim = Claim(sentence.text, classify_claim(kind, sentence), tuple(bindings),
                  case_fields=sentence.case_fields, cited=sentence.evidence_ids)
    if unknown:
        claim = claim.with_status(ClaimStatus.FLAGGED)
    return claim


def parse_section(kind: SectionKind, text: str, store: Store) -> list[Claim]:
    return [make_claim(kind, s, store) for s in split_sentences(text)]


def draft_section(plan: ReportPlan, kind: SectionKind, backend: Backend, store: Store) -> list[Claim]:
    """Ask the backend for one section and parse its answer into claims."""
    request = section_request(plan, kind)
    try:
        response = backend.generate(request)
    except Exception as exc:
        raise ReportError(f"backend failed while drafting {kind.value}: {exc}") from exc
    try:
        return parse_section(kind, response.text, store)
    except ReportError as exc:
        raise ReportError(f"{kind.value}: {exc}") from exc


def draft_all(plan: ReportPlan, backend: Backend, store: Store,
              max_in_flight: int = DEFAULT_MAX_IN_FLIGHT) -> dict[SectionKind, list[Claim]]:
    requests = {kind: section_request(plan, kind) for kind in SECTION_ORDER}
    try:
        responses = generate_many(backend, requests.values(), max_in_flight)
    except Exception as exc:
        raise ReportError(f"backend failed while drafting sections: {exc}") from exc
    drafts = {}
    for kind, req in requests.items():
        try:
            drafts[kind] = parse_section(kind, responses[req.request_id].text, store)
        except ReportError as exc:
            raise ReportError(f"{kind.value}: {exc}") from exc
    return drafts


_TREATMENT_WORDS = ("treat", "surgery", "surgical", "therapy", "cast", "fixation", "splint",
                    "manage", "arthroplasty", "reduction", "physiotherapy", "injection")
_EDUCATION_WORDS = ("exercise", "avoid", "advice", "education", "lifestyle", "weight", "activity")


def assign_section(sentence: ParsedSentence) -> SectionKind:
    """Keyword heuristic placing a single-pass sentence into a report section."""
    low = sentence.text.lower()
    if {"demographics", "history"} & set(sentence.case_fields) or low.startswith("the patient is"):
        return SectionKind.BACKGROUND
    if "complaints" in sentence.case_fields or "presents" in low:
        return SectionKind.CLINICAL_PRESENTATION
    if low.startswith("in summary"):
        return SectionKind.CONCLUSION
    if "diagnosis" in low:
        return SectionKind.DIAGNOSIS_ASSESSMENT
    if any(w in low for w in _TREATMENT_WORDS):
        return SectionKind.TREATMENT_PLAN
    if any(w in low for w in _EDUCATION_WORDS):
        return SectionKind.PATIENT_EDUCATION
    return SectionKind.DIAGNOSTIC_PROCESS


def draft_single_pass(plan: ReportPlan, backend: Backend, store: Store) -> dict[SectionKind, list[Claim]]:
    """Generate the whole body in one request, then split it heuristically."""
    request = section_request(plan, "full_report")
    try:
        response = backend.generate(request)
    except Exception as exc:
        raise ReportError(f"backend failed during single-pass generation: {exc}") from exc
    drafts: dict[SectionKind, list[Claim]] = {kind: [] for kind in SECTION_ORDER}
    for sentence in split_sentences(response.text):
        kind = assign_section(sentence)
        drafts[kind].append(make_claim(kind, sentence, store))
    return drafts


_WORKING_DX = re.compile(r"^working diagnosis\s*:\s*(.+)$", re.IGNORECASE)


def _named_label(text: str, labels: Sequence[str]) -> str | None:
    words = [t.surface for t in tokenize(text)]
    for label in labels:
        target = [t.surface for t in tokenize(label_text(label))]
        for i in range(len(words) - len(target) + 1):
            if words[i : i + len(target)] == target:
                return label
    return None


def _contains_phrase(text: str, phrase: str) -> bool:
    words = [t.surface for t in tokenize(text)]
    target = [t.surface for t in tokenize(phrase)]
    return any(words[i : i + len(target)] == target for i in range(len(words) - len(target) + 1))


def synthesize(drafts: Mapping[SectionKind, Sequence[Claim]], class_labels: Sequence[str],
               case_id: str = "", metadata: Mapping[str, str] | None = None) -> Report:
    """Assemble drafts into one ordered report.

    Verbatim repeats are dropped, first occurrence wins. The first
    ``Working diagnosis:`` sentence of the assessment becomes the primary
    diagnosis claim. When the treatment plan already names the diagnosed
    condition, a cross-reference sentence is put in front of it.
    """
    missing = [k.value for k in SECTION_ORDER if k not in drafts]
    if missing:
        raise ReportError(f"missing draft section(s): {', '.join(missing)}")
    seen: set[str] = set()
    ordered: dict[SectionKind, list[Claim]] = {}
    for kind in SECTION_ORDER:
        kept = []
        for claim in drafts[kind]:
            key = " ".join(claim.sentence.lower().split())
            if key in seen:
                continue
            seen.add(key)
            kept.append(claim)
        ordered[kind] = kept
    diagnosis = None
    assessment = ordered[SectionKind.DIAGNOSIS_ASSESSMENT]
    for i, claim in enumerate(assessment):
        m = _WORKING_DX.match(claim.sentence)
        label = _named_label(m.group(1), class_labels) if m else None
        if label is not None:
            assessment[i] = replace(claim, primary=True)
            diagnosis = label
            break
    if diagnosis is None:
        raise ReportError("diagnosis_assessment has no primary diagnosis claim naming a class label")
    plan_claims = ordered[SectionKind.TREATMENT_PLAN]
    term = label_text(diagnosis)
    if any(_contains_phrase(c.sentence, term) for c in plan_claims):
        xref = Claim(f"As noted in the diagnostic process, the working diagnosis is {term}.",
                     ClaimKind.NARRATIVE, case_fields=("prediction",))
        plan_claims.insert(0, xref)
    meta = {"engine_version": __version__}
    meta.update(metadata or {})
    return Report(case_id, tuple((k, tuple(ordered[k])) for k in SECTION_ORDER), diagnosis, meta)


def verify_grounding(report: Report, store: Store, tau: float = DEFAULT_TAU,
                     policy: str = "strict") -> tuple[Report, list[AuditEntry]]:
    """Score every factual claim against its bindings and settle its status.

    Support is the best content-token Jaccard between the claim and the
    bound passage span. Claims at or above ``tau`` are supported; the rest
    are removed (``strict``) or flagged (``lenient``). Returns the verified
    report and the audit of every claim that did not pass.
    """
    if not 0.0 < tau <= 1.0:
        raise ReportError(f"tau must be in (0, 1], got {tau}")
    if policy not in POLICIES:
        raise ReportError(f"unknown policy {policy!r}")
    failed = ClaimStatus.REMOVED if policy == "strict" else ClaimStatus.FLAGGED
    audit: list[AuditEntry] = []
    sections = []
    for kind, claims in report.sections:
        out = []
        for claim in claims:
            if claim.kind is not ClaimKind.FACTUAL or claim.status in (ClaimStatus.SUPPORTED, ClaimStatus.REMOVED):
                out.append(claim)
                continue
            score = grounding_score(claim, store)
            if claim.status is ClaimStatus.FLAGGED:
                reason = "cites a passage id that is not in the corpus"
                if policy == "strict":
                    claim = claim.with_status(ClaimStatus.REMOVED, score)
                audit.append(AuditEntry(kind, claim.sentence, score, claim.status, reason))
            elif claim.bindings and score >= tau:
                claim = claim.with_status(ClaimStatus.SUPPORTED, score)
            else:
                reason = "no evidence binding" if not claim.bindings else f"support {score:.3f} below tau {tau}"
                claim = claim.with_status(failed, score)
                audit.append(AuditEntry(kind, claim.sentence, score, claim.status, reason))
            out.append(claim)
        sections.append((kind, tuple(out)))
    meta = dict(report.metadata)
    meta.update({"policy": policy, "tau": f"{tau:g}"})
    verified = replace(report, sections=tuple(sections), audit=report.audit + tuple(audit),
                       metadata=meta, verified=True)
    return verified, audit


def grounding_score(claim: Claim, store: Store) -> float:
    claim_terms = content_set(claim.sentence)
    best = 0.0
    for b in claim.bindings:
        if b.passage_id not in store:
            continue
        text = store.passage(b.passage_id).text
        start, end = b.span
        if not 0 <= start < end <= len(text):
            continue
        best = max(best, jaccard(claim_terms, content_set(text[start:end])))
    return best


@dataclass(frozen=True)
class Reporter:
    """The full case-to-report pipeline with fixed settings."""

    retriever: Retriever
    store: Store
    backend: Backend
    tau: float = DEFAULT_TAU
    policy: str = "strict"
    k: int = DEFAULT_K
    depth: int = DEFAULT_DEPTH
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT
    cot: bool = True

    def plan(self, case: CaseRecord, prediction: ConditionPrediction) -> ReportPlan:
        if self.cot:
            return plan_report(case, prediction, self.retriever, self.store, self.k, self.depth)
        return plan_single_pass(case, prediction, self.retriever, self.store, self.k, self.depth)

    def run(self, case: CaseRecord, prediction: ConditionPrediction) -> tuple[ReportPlan, Report]:
        plan = self.plan(case, prediction)
        for w in plan.warnings:
            log.warning("case %s: %s", case.case_id, w)
        if self.cot:
            drafts = draft_all(plan, self.backend, self.store, self.max_in_flight)
        else:
            drafts = draft_single_pass(plan, self.backend, self.store)
        meta = {"date": case.exam_date or "undated", "backend": self.backend.backend_id,
                "mode": "cot" if self.cot else "single-pass"}
        report = synthesize(drafts, prediction.class_labels, case.case_id, meta)
        verified, _ = verify_grounding(report, self.store, self.tau, self.policy)
        return plan, verified


_PREAMBLE = r"""\documentclass[11pt]{article}
\usepackage[T1]{fontenc}
\usepackage[utf8]{inputenc}
\usepackage[margin=2.5cm]{geometry}
\newcommand{\unverified}[1]{\par\medskip\noindent\fbox{\parbox{0.95\linewidth}{\textbf{Unverified:} #1}}\par\medskip}
"""
TEMPLATES = ("article",)


def _sentence(text: str) -> str:
    text = text.strip()
    return text if text.endswith((".", "!", "?")) else text + "."


def emit_latex(report: Report, store: Store, template_id: str = "article") -> str:
    """Render a verified report as a complete LaTeX document.

    Claims that are neither flagged nor removed become running text with a
    footnote per evidence binding; flagged claims are boxed as unverified;
    removed claims are dropped. Refuses reports with unverified factual
    claims.
    """
    if template_id not in TEMPLATES:
        raise ReportError(f"unknown template {template_id!r}")
    pending = [c.sentence for _, c in report.claims()
               if c.kind is ClaimKind.FACTUAL and c.status is ClaimStatus.UNVERIFIED]
    if not report.verified or pending:
        raise ReportError(f"report has {len(pending)} unverified factual claim(s); run verification first")
    meta = report.metadata
    out = [_PREAMBLE]
    out.append("\\title{Orthopedic CT Diagnostic Report}\n")
    out.append(f"\\author{{Case \\texttt{{{escape_latex(report.case_id)}}}}}\n")
    out.append(f"\\date{{{escape_latex(meta.get('date', 'undated'))}}}\n")
    out.append("\\begin{document}\n\\maketitle\n")
    out.append(
        f"\\noindent Generated by orthodoc {escape_latex(meta.get('engine_version', __version__))}; "
        f"grounding policy {escape_latex(meta.get('policy', 'strict'))}, "
        f"threshold {escape_latex(meta.get('tau', str(DEFAULT_TAU)))}.\n\n"
    )
    for kind, claims in report.sections:
        out.append(f"\\section{{{HEADINGS[kind]}}}\n")
        body = []
        boxes = []
        for c in claims:
            if c.status is ClaimStatus.REMOVED:
                continue
            text = escape_latex(_sentence(c.sentence))
            notes = "".join(
                f"\\footnote{{Source: {escape_latex(_source(store, b.passage_id))}, "
                f"passage \\texttt{{{escape_latex(b.passage_id)}}}.}}"
                for b in c.bindings
            )
            if c.status is ClaimStatus.FLAGGED:
                boxes.append(f"\\unverified{{{text}{notes}}}\n")
            else:
                body.append(text + notes)
        if not body and not boxes:
            out.append("No findings recorded.\n\n")
            continue
        if body:
            out.append("\n".join(body) + "\n\n")
        out.extend(boxes)
    out.append("\\end{document}\n")
    return "".join(out)


def _source(store: Store, passage_id: str) -> str:
    if passage_id not in store:
        return "unknown source"
    doc = store.document(store.passage(passage_id).doc_id)
    return doc.source or doc.title or doc.doc_id
