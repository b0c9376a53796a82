"""Generate one verified report, then show what grounding does to a made-up sentence.

Run: python demos/02_grounded_report.py [output-dir]
"""

import sys
from dataclasses import replace
from pathlib import Path

from orthodoc.backend import TemplateBackend, generate_template, parse_prompt
from orthodoc.config import EngineConfig
from orthodoc.fusion import predict
from orthodoc.pipeline import build_workspace
from orthodoc.report import Reporter, emit_latex
from orthodoc.synthetic import bundled_dataset


class OneLieBackend:
    """Template text plus one invented sentence in the diagnostic process."""

    backend_id = "one-lie"

    def generate(self, request):
        response = generate_template(request)
        spec = parse_prompt(request.prompt)
        if spec.section != "diagnostic_process" or not spec.evidence:
            return response
        pid = spec.evidence[0].passage_id
        return replace(response, text=f"{response.text} Titanium rods grow back within hours [E:{pid}].")


def show(report):
    for kind, claims in report.sections:
        print(f"  [{kind.value}]")
        for c in claims:
            support = "" if c.support is None else f" support={c.support:.2f}"
            print(f"    {c.status.value:<10} {c.kind.value:<9}{support}  {c.sentence[:70]}")


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-output")
    out.mkdir(parents=True, exist_ok=True)
    cfg = EngineConfig()
    ws = build_workspace(bundled_dataset(), cfg)
    case = next(c for c in ws.test if c.ground_truth == "fracture")
    prediction = predict(case, ws.weights)
    print(f"case {case.case_id}: {case.complaints}")
    print(f"predicted {prediction.predicted} with p={prediction.probability:.2f}\n")

    reporter = Reporter(ws.retriever(cfg), ws.store, TemplateBackend())
    _, report = reporter.run(case, prediction)
    print("template backend, strict policy:")
    show(report)
    tex_path = out / f"{case.case_id}.tex"
    tex_path.write_text(emit_latex(report, ws.store), encoding="utf-8")
    print(f"\nwrote {tex_path}")

    for policy in ("strict", "lenient"):
        liar = Reporter(ws.retriever(cfg), ws.store, OneLieBackend(), policy=policy)
        _, checked = liar.run(case, prediction)
        print(f"\ninvented sentence under the {policy} policy:")
        for entry in checked.audit:
            print(f"  {entry.status.value}: {entry.sentence!r} (support {entry.score:.2f}; {entry.reason})")
        tex = emit_latex(checked, ws.store)
        print(f"  boxed as unverified in the .tex: {'Titanium' in tex}")


if __name__ == "__main__":
    main()
