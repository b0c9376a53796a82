"""Generation backends and the planner/backend prompt contract.

Prompts are line-oriented::

    SECTION: diagnostic_process
    NEED: knee pain swelling arthritis
    CASE.complaints: knee pain and morning stiffness
    PREDICTION: arthritis 0.8123
    DIFFERENTIAL: degenerative_disease 0.1544
    EVIDENCE:
    [1] E:rheum#0 :: Rheumatoid arthritis is ...
    INSTRUCTIONS: ...

Backends answer with plain sentences. A sentence that restates evidence
ends with ``[E:<passage_id>]``; a sentence that restates case data or the
classifier output ends with ``[C:<field>]``.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import httpx

log = logging.getLogger(__name__)

MARKER_VERSION = 1
DEFAULT_MAX_IN_FLIGHT = 4
BACKOFF_SECONDS = (0.5, 1.0, 2.0)
DEADLINE_SECONDS = 60.0

SYSTEM_INSTRUCTION = (
    "You draft one section of an orthopedic CT diagnostic report. Use only the numbered evidence. "
    "End every sentence that uses evidence with [E:<passage_id>] and every sentence that restates "
    "case data with [C:<field>]."
)
MARKER_INSTRUCTIONS = (
    "Write short declarative sentences. Cite evidence as [E:<passage_id>] at the end of the sentence. "
    "Mark statements taken from the case record as [C:<field>]. State the working diagnosis as "
    "'Working diagnosis: <label>'."
)


class BackendError(RuntimeError):
    pass


class BackendTimeout(BackendError):
    pass


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class Evidence:
    passage_id: str
    text: str


@dataclass(frozen=True)
class PromptSpec:
    section: str
    need: str
    case: dict[str, str] = field(default_factory=dict)
    prediction: tuple[str, float] | None = None
    differential: tuple[str, float] | None = None
    evidence: tuple[Evidence, ...] = ()


def _one_line(text: str) -> str:
    return " ".join(text.split())


def build_prompt(spec: PromptSpec) -> str:
    lines = [f"SECTION: {spec.section}", f"NEED: {_one_line(spec.need)}"]
    for key, value in spec.case.items():
        lines.append(f"CASE.{key}: {_one_line(value)}")
    if spec.prediction is not None:
        lines.append(f"PREDICTION: {spec.prediction[0]} {spec.prediction[1]:.4f}")
    if spec.differential is not None:
        lines.append(f"DIFFERENTIAL: {spec.differential[0]} {spec.differential[1]:.4f}")
    lines.append("EVIDENCE:")
    for i, ev in enumerate(spec.evidence, start=1):
        lines.append(f"[{i}] E:{ev.passage_id} :: {_one_line(ev.text)}")
    lines.append(f"INSTRUCTIONS: {MARKER_INSTRUCTIONS}")
    return "\n".join(lines)


_EVIDENCE_LINE = re.compile(r"^\[(\d+)\] E:(\S+) :: (.*)$")
_LABELLED = re.compile(r"^(\S+) (\d+(?:\.\d+)?)$")


def parse_prompt(prompt: str) -> PromptSpec:
    section = need = None
    case: dict[str, str] = {}
    prediction = differential = None
    evidence: list[Evidence] = []
    in_evidence = False
    for raw in prompt.splitlines():
        line = raw.strip()
        if not line:
            continue
        if in_evidence:
            m = _EVIDENCE_LINE.match(line)
            if m:
                if int(m.group(1)) != len(evidence) + 1:
                    raise PromptError(f"evidence numbering broken at {line[:40]!r}")
                evidence.append(Evidence(m.group(2), m.group(3)))
                continue
            in_evidence = False
        key, sep, value = line.partition(": ")
        if not sep and line == "EVIDENCE:":
            key, value = "EVIDENCE", ""
        if key == "SECTION":
            section = value
        elif key == "NEED":
            need = value
        elif key.startswith("CASE."):
            case[key[5:]] = value
        elif key in ("PREDICTION", "DIFFERENTIAL"):
            m = _LABELLED.match(value)
            if not m:
                raise PromptError(f"malformed {key} line: {value!r}")
            pair = (m.group(1), float(m.group(2)))
            if key == "PREDICTION":
                prediction = pair
            else:
                differential = pair
        elif key == "EVIDENCE":
            in_evidence = True
        elif key == "INSTRUCTIONS":
            pass
        else:
            raise PromptError(f"unrecognised prompt line: {line[:60]!r}")
    if section is None or need is None:
        raise PromptError("prompt lacks SECTION or NEED")
    return PromptSpec(section, need, case, prediction, differential, tuple(evidence))


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    request_id: str
    system_instruction: str = SYSTEM_INSTRUCTION
    max_tokens: int = 512
    temperature: float = 0.0

    def __post_init__(self):
        if not self.prompt.strip():
            raise PromptError("prompt is empty")
        if self.temperature < 0:
            raise PromptError("temperature must be >= 0")


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    backend_id: str
    latency_ms: int = 0


class Backend(Protocol):
    backend_id: str

    def generate(self, request: GenerationRequest) -> GenerationResponse: ...


_CLAUSE_END = re.compile(r"[.;:!?](?=\s|$)")


def first_clause(text: str) -> str:
    text = _one_line(text)
    m = _CLAUSE_END.search(text)
    clause = text[: m.start()] if m else text
    return clause.strip()


def _label_text(label: str) -> str:
    return label.replace("_", " ")


def _strip_end(text: str) -> str:
    return _one_line(text).rstrip(" .;:!?")


def _scaffold(spec: PromptSpec) -> tuple[list[str], list[str]]:
    """Fixed lead and tail sentences for a section, built from case fields."""
    case = spec.case
    label = _label_text(spec.prediction[0]) if spec.prediction else "an undetermined condition"
    lead: list[str] = []
    tail: list[str] = []
    s = spec.section
    if s in ("background", "full_report"):
        if "demographics" in case:
            lead.append(f"The patient is a {case['demographics']} [C:demographics].")
        if case.get("history"):
            lead.append(f"Relevant history: {_strip_end(case['history'])} [C:history].")
    if s in ("clinical_presentation", "full_report") and case.get("complaints"):
        lead.append(f"The patient presents with {_strip_end(case['complaints'])} [C:complaints].")
    if s == "diagnostic_process":
        lead.append("CT image features were reviewed with the fusion classifier [C:imaging].")
    if s in ("diagnosis_assessment", "full_report") and spec.prediction:
        lead.append(f"Working diagnosis: {label} (probability {spec.prediction[1]:.2f}) [C:prediction].")
        if spec.differential:
            lead.append(
                f"Differential diagnosis: {_label_text(spec.differential[0])} "
                f"(probability {spec.differential[1]:.2f}) [C:prediction]."
            )
    if s == "treatment_plan":
        tail.append("Review the response to treatment at scheduled follow-up.")
    if s == "patient_education":
        tail.append("Report any worsening pain or numbness promptly.")
    if s in ("conclusion", "full_report"):
        tail.append(f"In summary, the findings are most consistent with {label} [C:prediction].")
    return lead, tail


def generate_template(request: GenerationRequest) -> GenerationResponse:
    """Deterministic stand-in for a model: restate each evidence passage.

    Each evidence passage contributes one sentence, its first clause, tagged
    with the passage marker. Case-derived scaffold sentences frame them.
    """
    try:
        spec = parse_prompt(request.prompt)
    except PromptError as exc:
        raise BackendError(f"template backend: malformed prompt ({exc})") from exc
    lead, tail = _scaffold(spec)
    body = []
    for ev in spec.evidence:
        clause = first_clause(ev.text)
        if clause:
            body.append(f"{clause[0].upper()}{clause[1:]} [E:{ev.passage_id}].")
    return GenerationResponse(" ".join(lead + body + tail), "template", 0)


class TemplateBackend:
    backend_id = "template"

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        return generate_template(request)


class HttpBackend:
    """Client for the minimal JSON generation endpoint ``POST <base>/v1/generate``.

    Transport errors and 5xx responses are retried up to ``len(backoff)``
    times, sleeping ``backoff[i]`` seconds before retry ``i``; the whole call
    is bounded by ``deadline`` seconds.
    """

    backend_id = "http"

    def __init__(self, base_url: str, api_key: str | None = None, model: str = "orthodoc",
                 deadline: float = DEADLINE_SECONDS, backoff: Sequence[float] = BACKOFF_SECONDS,
                 transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep,
                 clock: Callable[[], float] = time.monotonic):
        if not base_url:
            raise BackendError("backend URL is not configured (set ORTHODOC_BACKEND_URL)")
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.model = model
        self.deadline = deadline
        self.backoff = tuple(backoff)
        self._transport = transport
        self._sleep = sleep
        self._clock = clock

    @classmethod
    def from_env(cls, **kwargs) -> "HttpBackend":
        return cls(os.environ.get("ORTHODOC_BACKEND_URL", ""), os.environ.get("ORTHODOC_BACKEND_KEY"), **kwargs)

    def _payload(self, request: GenerationRequest) -> dict:
        return {
            "model": self.model,
            "system": request.system_instruction,
            "prompt": request.prompt,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "request_id": request.request_id,
        }

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        start = self._clock()
        url = f"{self.base_url}/v1/generate"
        last_error = "no attempt made"
        with httpx.Client(transport=self._transport) as client:
            for attempt in range(len(self.backoff) + 1):
                remaining = self.deadline - (self._clock() - start)
                if remaining <= 0:
                    raise BackendTimeout(f"deadline of {self.deadline}s exceeded ({last_error})")
                try:
                    resp = client.post(url, json=self._payload(request), headers=headers, timeout=remaining)
                except httpx.TimeoutException as exc:
                    last_error = f"timeout: {exc}"
                except httpx.TransportError as exc:
                    last_error = f"transport error: {exc}"
                else:
                    if 200 <= resp.status_code < 300:
                        return self._parse(resp, start)
                    if resp.status_code < 500:
                        raise BackendError(f"backend returned HTTP {resp.status_code}: {resp.text}")
                    last_error = f"HTTP {resp.status_code}: {resp.text}"
                if attempt == len(self.backoff):
                    break
                delay = self.backoff[attempt]
                if self._clock() - start + delay >= self.deadline:
                    raise BackendTimeout(f"deadline of {self.deadline}s exceeded ({last_error})")
                log.warning("generation request %s failed (%s); retrying in %.1fs",
                            request.request_id, last_error, delay)
                self._sleep(delay)
        if last_error.startswith("timeout"):
            raise BackendTimeout(f"request {request.request_id} timed out after retries: {last_error}")
        raise BackendError(f"request {request.request_id} failed after retries: {last_error}")

    def _parse(self, resp: httpx.Response, start: float) -> GenerationResponse:
        try:
            body = resp.json()
        except json.JSONDecodeError as exc:
            raise BackendError(f"backend response is not JSON: {resp.text[:200]}") from exc
        if not isinstance(body, dict) or "text" not in body:
            raise BackendError("backend response is missing required field 'text'")
        if not isinstance(body["text"], str):
            raise BackendError("backend response field 'text' is not a string")
        latency = int(round((self._clock() - start) * 1000))
        return GenerationResponse(body["text"], self.backend_id, latency)


def generate_many(backend: Backend, requests: Iterable[GenerationRequest],
                  max_in_flight: int = DEFAULT_MAX_IN_FLIGHT) -> dict[str, GenerationResponse]:
    """Run requests concurrently; duplicate request ids are sent once."""
    unique: dict[str, GenerationRequest] = {}
    for req in requests:
        unique.setdefault(req.request_id, req)
    if max_in_flight <= 1 or len(unique) <= 1:
        return {rid: backend.generate(req) for rid, req in unique.items()}
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        futures = {rid: pool.submit(backend.generate, req) for rid, req in unique.items()}
        return {rid: fut.result() for rid, fut in futures.items()}
