"""Turn raw model generations into validated semantics, defaulting anything unusable.

Only the tagged answer table (agent prompts) or the last ``Final answer:`` line
(scene prompt) is read; reasoning text around it is ignored.  Parsing never
raises on content: every field ends up either PARSED from the text or DEFAULTED
to its schema default, and the :class:`ParseReport` records which.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .schema import (
    AgentSemantics,
    Category,
    QuestionSpec,
    SceneSemantics,
    schema_for,
)

_TAG = re.compile(r"<\s*([/\\]?)\s*ANSWER\s*>", re.IGNORECASE)
_SEPARATOR_CELL = re.compile(r"^:?-+:?$")
_FINAL = re.compile(r"^\s*final answer\s*:", re.IGNORECASE)
_BRACKETED = re.compile(r"<([^<>]*)>")

SCENE_KEY = "SCENE"


class ParseStatus(str, Enum):
    FULL = "FULL"
    PARTIAL = "PARTIAL"
    EMPTY = "EMPTY"


class FieldSource(str, Enum):
    PARSED = "PARSED"
    DEFAULTED = "DEFAULTED"


@dataclass
class ParseReport:
    per_field_source: dict[tuple[str, str], FieldSource] = field(default_factory=dict)
    diagnostics: list[str] = field(default_factory=list)

    @property
    def defaulted_count(self) -> int:
        return sum(1 for v in self.per_field_source.values() if v is FieldSource.DEFAULTED)

    @property
    def status(self) -> ParseStatus:
        n = len(self.per_field_source)
        d = self.defaulted_count
        if d == 0:
            return ParseStatus.FULL
        if d == n:
            return ParseStatus.EMPTY
        return ParseStatus.PARTIAL


def _as_text(raw) -> str:
    if isinstance(raw, (bytes, bytearray)):
        return bytes(raw).decode("utf-8", errors="replace")
    return "" if raw is None else str(raw)


def normalize_cell(cell: str) -> str:
    return cell.strip().upper()


def extract_answer_block(text: str) -> str | None:
    """Body of the last ``<ANSWER> ... closer`` block.

    The closer may be ``</ANSWER>``, ``<\\ANSWER>`` or a second plain ``<ANSWER>``.
    An opener without any closer does not count as a block.
    """
    blocks = []
    open_at = None
    for m in _TAG.finditer(text):
        if open_at is None:
            if not m.group(1):
                open_at = m.end()
        else:
            blocks.append(text[open_at : m.start()])
            open_at = None
    return blocks[-1] if blocks else None


def _split_row(line: str) -> list[str]:
    s = line.strip()
    if s.startswith("|"):
        s = s[1:]
    if s.endswith("|"):
        s = s[:-1]
    return [c.strip() for c in s.split("|")]


def _is_separator(cells: Sequence[str]) -> bool:
    return bool(cells) and all(_SEPARATOR_CELL.match(c.replace(" ", "")) for c in cells)


def table_rows(block: str, questions: Sequence[QuestionSpec]) -> list[list[str]]:
    """Data rows of a pipe table; header and dashed separator rows are dropped."""
    headers = {q.header.upper() for q in questions} | {q.question_id.upper() for q in questions}
    raw = [_split_row(line) for line in block.splitlines() if "|" in line]
    rows = []
    for i, cells in enumerate(raw):
        if _is_separator(cells):
            continue
        if i + 1 < len(raw) and _is_separator(raw[i + 1]):
            continue
        if cells and sum(normalize_cell(c) in headers for c in cells) * 2 >= len(cells):
            continue
        rows.append(cells)
    return rows


def parse_vsa(raw_text, category, agent_order: Sequence[str]) -> tuple[list[AgentSemantics], ParseReport]:
    """Answer table -> one :class:`AgentSemantics` per agent in ``agent_order``.

    Row ``j`` of the table belongs to ``agent_order[j]``.  Missing rows, missing
    cells and out-of-vocabulary cells fall back to the question default; surplus
    rows and cells are ignored.

    Raises:
        ValueError: ``agent_order`` is empty or ``category`` is not an agent class.
    """
    if not agent_order:
        raise ValueError("agent_order must be non-empty")
    category = Category(getattr(category, "value", category))
    if category is Category.SCENE:
        raise ValueError("parse_vsa needs VEHICLE or PEDESTRIAN")
    questions = schema_for(category)
    report = ParseReport()
    text = _as_text(raw_text)

    block = extract_answer_block(text)
    if block is None:
        report.diagnostics.append("no closed <ANSWER> block found")
        rows: list[list[str]] = []
    else:
        rows = table_rows(block, questions)
        if not rows:
            report.diagnostics.append("answer block holds no table rows")
    if len(rows) > len(agent_order):
        report.diagnostics.append(f"ignored {len(rows) - len(agent_order)} surplus rows")
    elif block is not None and len(rows) < len(agent_order):
        report.diagnostics.append(f"{len(agent_order) - len(rows)} rows missing")

    out = []
    for j, aid in enumerate(agent_order):
        cells = rows[j] if j < len(rows) else []
        answers = {}
        for k, q in enumerate(questions):
            tok = normalize_cell(cells[k]) if k < len(cells) else None
            if tok is not None and tok in q.answers:
                answers[q.question_id] = tok
                report.per_field_source[(aid, q.question_id)] = FieldSource.PARSED
            else:
                if tok is not None and j < len(rows):
                    report.diagnostics.append(f"{aid}.{q.question_id}: {tok!r} not in vocabulary")
                answers[q.question_id] = q.default
                report.per_field_source[(aid, q.question_id)] = FieldSource.DEFAULTED
        out.append(AgentSemantics(aid, category, answers))
    return out, report


def parse_sc(raw_text) -> tuple[SceneSemantics, ParseReport]:
    """Scene answers from the last ``Final answer:`` line, read positionally."""
    questions = schema_for(Category.SCENE)
    report = ParseReport()
    text = _as_text(raw_text)
    line = None
    for candidate in text.splitlines():
        if _FINAL.match(candidate):
            line = candidate
    tokens: list[str] = []
    if line is None:
        report.diagnostics.append("no 'Final answer:' line found")
    else:
        tokens = [normalize_cell(t) for t in _BRACKETED.findall(_FINAL.sub("", line, count=1))]
    answers = {}
    for k, q in enumerate(questions):
        tok = tokens[k] if k < len(tokens) else None
        if tok is not None and tok in q.answers:
            answers[q.question_id] = tok
            report.per_field_source[(SCENE_KEY, q.question_id)] = FieldSource.PARSED
        else:
            if tok is not None:
                report.diagnostics.append(f"{q.question_id}: {tok!r} not in vocabulary")
            answers[q.question_id] = q.default
            report.per_field_source[(SCENE_KEY, q.question_id)] = FieldSource.DEFAULTED
    return SceneSemantics(answers), report


# ---------------------------------------------------------------------------
# rendering (inverse direction, used by the mock oracle and round-trip checks)


def render_table(rows: Sequence[Sequence[str]], category) -> str:
    questions = schema_for(Category(getattr(category, "value", category)))
    lines = ["| " + " | ".join(q.header for q in questions) + " |", "|" + "---|" * len(questions)]
    for cells in rows:
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def render_vsa_answers(semantics: Sequence[AgentSemantics], closer: str = "<\\ANSWER>") -> str:
    if not semantics:
        return f"<ANSWER>\n{closer}"
    category = semantics[0].category
    questions = schema_for(category)
    rows = [[s.answers[q.question_id] for q in questions] for s in semantics]
    return f"<ANSWER>\n{render_table(rows, category)}\n{closer}"


def render_sc_answers(scene: SceneSemantics) -> str:
    questions = schema_for(Category.SCENE)
    return "Final answer: " + " ".join(f"<{scene.answers[q.question_id]}>" for q in questions)
