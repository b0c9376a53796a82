from __future__ import annotations

import shutil
import subprocess
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from orthodoc.latex import booktabs_table, check_structure, escape_latex

GOLDEN = Path(__file__).parent / "golden"
PDFLATEX = shutil.which("pdflatex")

TEN_SPECIALS = [
    ("\\", r"\textbackslash{}"),
    ("{", r"\{"),
    ("}", r"\}"),
    ("$", r"\$"),
    ("&", r"\&"),
    ("#", r"\#"),
    ("^", r"\textasciicircum{}"),
    ("_", r"\_"),
    ("%", r"\%"),
    ("~", r"\textasciitilde{}"),
]


def wrap_fragment(tex: str) -> str:
    """Tables are fragments; give them a minimal document to compile in."""
    if tex.startswith("\\documentclass"):
        return tex
    return "\\documentclass{article}\n\\usepackage{booktabs}\n\\begin{document}\n" + tex + "\\end{document}\n"


def fixtures():
    return sorted(GOLDEN.glob("*.tex"))


class TestEscape:
    @pytest.mark.parametrize("raw,escaped", TEN_SPECIALS)
    def test_each_special(self, raw, escaped):
        assert escape_latex(raw) == escaped

    @pytest.mark.parametrize("raw,escaped", [
        ("50% union at 6_weeks", r"50\% union at 6\_weeks"),
        ("", ""),
        ("A&E", r"A\&E"),
        ("plain text", "plain text"),
        ("\\{}", r"\textbackslash{}\{\}"),
    ])
    def test_examples(self, raw, escaped):
        assert escape_latex(raw) == escaped

    def test_not_idempotent(self):
        once = escape_latex("a_b")
        assert escape_latex(once) != once

    @given(st.text(alphabet=st.sampled_from(list("ab \\{}$&#^_%~.")), max_size=40))
    def test_escaped_text_is_brace_balanced(self, text):
        wrapped = "\\begin{document}" + escape_latex(text) + "\\end{document}"
        assert check_structure(wrapped) == []

    @given(st.text(max_size=40))
    def test_no_bare_specials(self, text):
        out = escape_latex(text)
        # every special that survives is part of an escape sequence
        stripped = out
        for _, esc in TEN_SPECIALS:
            stripped = stripped.replace(esc, "")
        assert not any(ch in stripped for ch, _ in TEN_SPECIALS)


class TestStructure:
    def test_clean(self):
        assert check_structure("\\documentclass{article}\\begin{document}x\\end{document}") == []

    def test_unbalanced(self):
        assert any("unclosed" in p for p in check_structure("\\textbf{x"))
        assert any("unmatched" in p for p in check_structure("x}"))

    def test_mismatched_env(self):
        problems = check_structure("\\begin{table}\\end{tabular}")
        assert problems

    def test_escaped_braces_ignored(self):
        assert check_structure(r"\{ and \}") == []

    def test_missing_document(self):
        assert "missing \\begin{document}" in check_structure("\\documentclass{article}")

    def test_booktabs_table(self):
        tex = booktabs_table(["a", "b"], [["1", "2"]], "lc", caption="Cap", label="tab:x")
        assert tex.splitlines()[:3] == ["\\begin{table}[ht]", "\\centering", "\\caption{Cap}"]
        assert "\\label{tab:x}" in tex and check_structure(tex) == []


class TestFixtures:
    def test_fixtures_exist(self):
        names = {p.name for p in fixtures()}
        assert {"rag_condition.tex", "rag_report.tex", "cot_report.tex"} <= names
        assert any(n.startswith("report_") for n in names)

    @pytest.mark.parametrize("path", fixtures(), ids=lambda p: p.name)
    def test_static_structure(self, path):
        assert check_structure(wrap_fragment(path.read_text())) == []

    @pytest.mark.skipif(PDFLATEX is None, reason="pdflatex not installed; compiled in CI")
    @pytest.mark.parametrize("path", fixtures(), ids=lambda p: p.name)
    def test_compiles(self, path, tmp_path):
        src = tmp_path / path.name
        src.write_text(wrap_fragment(path.read_text()))
        proc = subprocess.run([PDFLATEX, "-interaction=nonstopmode", "-halt-on-error", src.name],
                              cwd=tmp_path, capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0, proc.stdout[-2000:]
