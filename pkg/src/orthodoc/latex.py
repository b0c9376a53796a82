"""LaTeX escaping and small source-building helpers."""

from __future__ import annotations

import re
from typing import Sequence

_SPECIALS = {
    "\\": r"\textbackslash{}",
    "{": r"\{",
    "}": r"\}",
    "$": r"\$",
    "&": r"\&",
    "#": r"\#",
    "^": r"\textasciicircum{}",
    "_": r"\_",
    "%": r"\%",
    "~": r"\textasciitilde{}",
}
_SPECIAL_RE = re.compile("|".join(re.escape(c) for c in _SPECIALS))


def escape_latex(text: str) -> str:
    """Escape the ten LaTeX special characters in one pass.

    Not idempotent: escaping twice escapes the inserted backslashes.
    """
    return _SPECIAL_RE.sub(lambda m: _SPECIALS[m.group()], text)


def booktabs_table(header: Sequence[str], rows: Sequence[Sequence[str]], align: str,
                   caption: str | None = None, label: str | None = None) -> str:
    """A ``tabular`` with booktabs rules; cells are inserted verbatim."""
    lines = []
    if caption is not None:
        lines += ["\\begin{table}[ht]", "\\centering", f"\\caption{{{caption}}}"]
    lines.append(f"\\begin{{tabular}}{{{align}}}")
    lines.append("\\toprule")
    lines.append(" & ".join(header) + " \\\\")
    lines.append("\\midrule")
    for row in rows:
        lines.append(" & ".join(row) + " \\\\")
    lines.append("\\bottomrule")
    lines.append("\\end{tabular}")
    if caption is not None:
        if label:
            lines.append(f"\\label{{{label}}}")
        lines.append("\\end{table}")
    return "\n".join(lines) + "\n"


_BEGIN_END = re.compile(r"\\(begin|end)\{([^}]*)\}")


def check_structure(source: str) -> list[str]:
    """Cheap static checks on generated LaTeX source.

    Reports unbalanced braces (ignoring escaped ones), mismatched
    ``\\begin``/``\\end`` pairs and a missing document body. An empty list
    means no problems were found; it is not a substitute for compiling.
    """
    problems = []
    depth = 0
    i = 0
    while i < len(source):
        ch = source[i]
        if ch == "\\":
            i += 2
            continue
        if ch == "%":
            nl = source.find("\n", i)
            i = len(source) if nl < 0 else nl
            continue
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth < 0:
                problems.append(f"unmatched closing brace at offset {i}")
                depth = 0
        i += 1
    if depth:
        problems.append(f"{depth} unclosed brace(s)")
    stack: list[str] = []
    for m in _BEGIN_END.finditer(source):
        kind, env = m.groups()
        if kind == "begin":
            stack.append(env)
        elif not stack or stack.pop() != env:
            problems.append(f"\\end{{{env}}} does not match an open environment")
    problems.extend(f"environment {env} never closed" for env in stack)
    if "\\documentclass" in source and "\\begin{document}" not in source:
        problems.append("missing \\begin{document}")
    return problems
