"""Path-format compliance audit of raw executor outputs.

Three checks per output, from loose to strict:

* section: every role header the path requires is present (order not checked)
* pred answer: the Answer section yields a legal answer (an option letter in
  multiple-choice mode, any nonempty text in open mode)
* strict: the Answer body is nothing but the answer surface form

Direct-answer outputs (p_A) carry no template, so they need no headers and the
whole output is the answer body unless an ``Answer:`` header is present.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from .paths import PATHS, Path, Role, find_headers

MULTIPLE_CHOICE = "mc"
OPEN = "open"

_LETTER_ONLY = re.compile(r"^[A-Z]$")
_LETTER_PATTERNS = (
    re.compile(r"^\(?([A-Z])\)?[.:]?$"),
    re.compile(r"(?i:answer)\s*(?:(?i:is)|:)?\s*\(?([A-Z])\)?(?![A-Za-z])"),
    re.compile(r"^\(?([A-Z])[).:]"),
    re.compile(r"\(([A-Z])\)"),
)


@dataclass(frozen=True)
class AuditResult:
    section_ok: bool
    pred_answer_ok: bool
    strict_ok: bool
    pred_answer: str | None = None


def answer_body(output: str, path: Path) -> str | None:
    """Text of the last Answer section, or None when there is none."""
    lines = output.split("\n")
    headers = find_headers(output)
    starts = [i for i, role in headers if role is Role.ANSWER]
    if not starts:
        return output.strip() if Path.parse(path) is Path.A else None
    start = starts[-1]
    stop = next((i for i, _ in headers if i > start), len(lines))
    return "\n".join(lines[start + 1:stop]).strip()


def extract_option(body: str) -> str | None:
    for pattern in _LETTER_PATTERNS:
        m = pattern.search(body)
        if m:
            return m.group(1)
    return None


def format_audit(output: str, path: Path, mode: str = MULTIPLE_CHOICE) -> AuditResult:
    path = Path.parse(path)
    if mode not in (MULTIPLE_CHOICE, OPEN):
        raise ValueError(f"mode must be {MULTIPLE_CHOICE!r} or {OPEN!r}")
    present = {role for _, role in find_headers(output)}
    required = set(path.role_sequence) if path is not Path.A else set()
    section_ok = required <= present

    body = answer_body(output, path)
    if body is None or not body:
        return AuditResult(section_ok, False, False, None)
    if mode == MULTIPLE_CHOICE:
        pred = extract_option(body)
        strict = bool(_LETTER_ONLY.match(body))
    else:
        pred = body
        strict = "\n" not in body
    return AuditResult(section_ok, pred is not None, strict and pred is not None, pred)


@dataclass(frozen=True)
class AuditItem:
    id: str
    path: Path
    output: str
    tokens: int | None = None
    correct: int | None = None

    def to_json(self) -> dict:
        obj = {"id": self.id, "path": self.path.value, "output": self.output}
        if self.tokens is not None:
            obj["tokens"] = self.tokens
        if self.correct is not None:
            obj["correct"] = self.correct
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "AuditItem":
        return cls(str(obj["id"]), Path.parse(obj["path"]), obj["output"],
                   obj.get("tokens"), obj.get("correct"))


@dataclass
class AuditRow:
    path: Path
    n: int
    section: int
    pred_answer: int
    strict: int
    accuracy: float | None
    avg_tokens: float | None

    @staticmethod
    def _cell(k: int, n: int) -> str:
        return f"{k} / {n} = {100.0 * k / n:.2f}%"

    def table_cells(self) -> list[str]:
        return [
            self.path.value,
            self._cell(self.section, self.n),
            self._cell(self.pred_answer, self.n),
            self._cell(self.strict, self.n),
            "" if self.accuracy is None else f"{100.0 * self.accuracy:.2f}",
            "" if self.avg_tokens is None else f"{self.avg_tokens:.1f}",
        ]


TABLE_COLUMNS = ("Path", "Section format", "Pred. answer format",
                 "Strict answer-text format", "Acc.", "Avg. tokens")


def audit_corpus(items: Iterable[AuditItem], mode: str = MULTIPLE_CHOICE) -> list[AuditRow]:
    """Per-path compliance counts; paths with no outputs get no row."""
    groups: dict[Path, list[tuple[AuditItem, AuditResult]]] = {}
    for item in items:
        groups.setdefault(item.path, []).append((item, format_audit(item.output, item.path, mode)))
    rows = []
    for path in PATHS:
        group = groups.get(path)
        if not group:
            continue
        toks = [it.tokens for it, _ in group if it.tokens is not None]
        corr = [it.correct for it, _ in group if it.correct is not None]
        rows.append(AuditRow(
            path=path,
            n=len(group),
            section=sum(r.section_ok for _, r in group),
            pred_answer=sum(r.pred_answer_ok for _, r in group),
            strict=sum(r.strict_ok for _, r in group),
            accuracy=sum(corr) / len(corr) if corr else None,
            avg_tokens=sum(toks) / len(toks) if toks else None,
        ))
    return rows


def format_table(rows: Sequence[AuditRow]) -> str:
    """Plain-text compliance table."""
    cells = [list(TABLE_COLUMNS)] + [r.table_cells() for r in rows]
    widths = [max(len(row[k]) for row in cells) for k in range(len(TABLE_COLUMNS))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
                     for row in cells) + "\n"


def read_audit_items(path) -> list[AuditItem]:
    with open(path, encoding="utf-8") as fh:
        return [AuditItem.from_json(json.loads(line)) for line in fh if line.strip()]


def write_audit_items(path, items: Iterable[AuditItem]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for it in items:
            fh.write(json.dumps(it.to_json(), ensure_ascii=False) + "\n")
