"""Roles, coordination paths and the tagged trajectory format."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator


class Role(str, Enum):
    UNDERSTANDING = "U"
    REASONING = "R"
    CONSTRUCTION = "C"
    HYPOTHESIS = "H"
    ANSWER = "A"

    @property
    def header(self) -> str:
        return ROLE_HEADERS[self]

    @property
    def is_visual(self) -> bool:
        return self in (Role.CONSTRUCTION, Role.HYPOTHESIS)


ROLE_HEADERS = {
    Role.UNDERSTANDING: "Understanding",
    Role.REASONING: "Reasoning",
    Role.CONSTRUCTION: "Visual",
    Role.HYPOTHESIS: "Hypothesis",
    Role.ANSWER: "Answer",
}
HEADER_ROLES = {name: role for role, name in ROLE_HEADERS.items()}


class Path(str, Enum):
    """The five coordination paths, declared in canonical (ascending cost) order."""

    A = "p_A"
    U = "p_U"
    R = "p_R"
    C = "p_C"
    H = "p_H"

    @property
    def index(self) -> int:
        return PATHS.index(self)

    @property
    def role_sequence(self) -> tuple[Role, ...]:
        return _ROLE_SEQUENCES[self]

    @classmethod
    def parse(cls, value: "str | Path") -> "Path":
        """Accept "p_C", "C" or a Path."""
        if isinstance(value, Path):
            return value
        for p in cls:
            if value in (p.value, p.name):
                return p
        raise ValueError(f"unknown path {value!r}; expected one of {[p.value for p in cls]}")


U, R, C, H, A = (Role.UNDERSTANDING, Role.REASONING, Role.CONSTRUCTION,
                 Role.HYPOTHESIS, Role.ANSWER)
_ROLE_SEQUENCES = {
    Path.A: (A,),
    Path.U: (U, A),
    Path.R: (U, R, A),
    Path.C: (U, R, C, R, A),
    Path.H: (U, R, H, R, A),
}
PATHS: tuple[Path, ...] = tuple(Path)
N_PATHS = len(PATHS)


def role_sequence(path: Path) -> tuple[Role, ...]:
    return Path.parse(path).role_sequence


@dataclass(frozen=True)
class Segment:
    role: Role
    text: str
    visual_refs: tuple[str, ...] = ()


@dataclass(frozen=True)
class Trajectory:
    id: str
    query: str
    path: Path
    segments: tuple[Segment, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "path", Path.parse(self.path))
        object.__setattr__(self, "segments", tuple(self.segments))

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "query": self.query,
            "path": self.path.value,
            "segments": [
                {"role": s.role.value, "text": s.text, "visual_refs": list(s.visual_refs)}
                for s in self.segments
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Trajectory":
        segments = tuple(
            Segment(Role(s["role"]), s["text"], tuple(s.get("visual_refs") or ()))
            for s in obj["segments"]
        )
        return cls(str(obj["id"]), obj.get("query", ""), Path.parse(obj["path"]), segments)


@dataclass(frozen=True)
class FormatIssue:
    kind: str  # MissingSection | OrderViolation | DuplicateHeader | LeadingText | EmptyAnswer | IllegalVisualRef
    message: str


class TrajectoryFormatError(ValueError):
    def __init__(self, issues: list[FormatIssue]):
        self.issues = issues
        super().__init__("; ".join(f"{i.kind}: {i.message}" for i in issues))

    @property
    def kinds(self) -> list[str]:
        return [i.kind for i in self.issues]


def header_role(line: str) -> Role | None:
    """Return the role a header line opens, or None for body lines.

    Headers are case-sensitive, start at column 0 and consist of the role name
    followed by a colon (trailing whitespace tolerated).
    """
    stripped = line.rstrip()
    if not stripped.endswith(":") or line[:1].isspace():
        return None
    return HEADER_ROLES.get(stripped[:-1])


def find_headers(text: str) -> list[tuple[int, Role]]:
    lines = text.split("\n")
    return [(i, role) for i, line in enumerate(lines) if (role := header_role(line)) is not None]


def _trim_blank_lines(lines: list[str]) -> str:
    start, end = 0, len(lines)
    while start < end and not lines[start].strip():
        start += 1
    while end > start and not lines[end - 1].strip():
        end -= 1
    return "\n".join(lines[start:end])


def _sequence_issues(found: list[Role], path: Path) -> list[FormatIssue]:
    expected = path.role_sequence
    have, need = Counter(found), Counter(expected)
    issues = []
    for role in need:
        if have[role] < need[role]:
            issues.append(FormatIssue(
                "MissingSection",
                f"{path.value} needs {need[role]} {role.header!r} section(s), found {have[role]}"))
    foreign = [role for role in have if need[role] == 0]
    for role in have:
        if need[role] and have[role] > need[role]:
            issues.append(FormatIssue(
                "DuplicateHeader",
                f"{path.value} allows {need[role]} {role.header!r} section(s), found {have[role]}"))
    if foreign:
        issues.append(FormatIssue(
            "OrderViolation",
            f"{'/'.join(r.header for r in foreign)} not part of {path.value}"))
    elif not issues and tuple(found) != expected:
        issues.append(FormatIssue(
            "OrderViolation",
            f"expected {'/'.join(r.value for r in expected)}, got {'/'.join(r.value for r in found)}"))
    return issues


def parse_trajectory(text: str, path: Path) -> tuple[Segment, ...]:
    """Split tagged executor text into role segments for ``path``.

    Raises TrajectoryFormatError listing every problem found.
    """
    path = Path.parse(path)
    lines = text.split("\n")
    headers = find_headers(text)
    issues = []
    lead_end = headers[0][0] if headers else len(lines)
    if any(line.strip() for line in lines[:lead_end]):
        issues.append(FormatIssue("LeadingText", "text before the first role header"))
    issues.extend(_sequence_issues([role for _, role in headers], path))
    if issues:
        raise TrajectoryFormatError(issues)

    segments = []
    bounds = [i for i, _ in headers] + [len(lines)]
    for (start, role), stop in zip(headers, bounds[1:]):
        segments.append(Segment(role, _trim_blank_lines(lines[start + 1:stop])))
    return tuple(segments)


def render_trajectory(segments: Iterable[Segment], path: Path | None = None) -> str:
    """Canonical text form: one ``Header:`` block per segment, one blank line between."""
    segments = tuple(segments)
    roles = tuple(s.role for s in segments)
    if path is not None:
        path = Path.parse(path)
        if roles != path.role_sequence:
            raise TrajectoryFormatError(_sequence_issues(list(roles), path)
                                        or [FormatIssue("OrderViolation", "role sequence mismatch")])
    elif roles not in _ROLE_SEQUENCES.values():
        raise TrajectoryFormatError([FormatIssue(
            "OrderViolation", f"{'/'.join(r.value for r in roles)} is not the role sequence of any path")])
    return "\n".join(f"{s.role.header}:\n{s.text}\n" for s in segments)


def validate_trajectory(t: Trajectory) -> list[FormatIssue]:
    """All invariant violations of ``t`` (empty list means valid)."""
    issues = _sequence_issues([s.role for s in t.segments], t.path)
    for i, s in enumerate(t.segments):
        if s.role is Role.ANSWER and not s.text.strip():
            issues.append(FormatIssue("EmptyAnswer", f"segment {i} has an empty answer"))
        elif s.role is not Role.ANSWER and not s.text.strip():
            issues.append(FormatIssue("EmptySection", f"segment {i} ({s.role.header}) is empty"))
        if s.visual_refs and not s.role.is_visual:
            issues.append(FormatIssue(
                "IllegalVisualRef", f"segment {i} ({s.role.header}) carries visual refs"))
    return issues


def read_trajectories(path) -> Iterator[Trajectory]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield Trajectory.from_json(json.loads(line))


def write_trajectories(path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajectories:
            fh.write(json.dumps(t.to_json(), ensure_ascii=False) + "\n")
