"""Routing policies and their evaluation over path outcome records."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .calibration import DEFAULT_BUCKET, BucketRule, CalibrationPolicy, calibrate, classify_bucket, select_many
from .paths import N_PATHS, PATHS, Path
from .planner import PlannerModel, forward
from .records import MissingField, PathOutcomeRecord, feature_matrix, outcome_matrix, token_matrix


class EmptyRecordSet(ValueError):
    pass


def record_bucket(rec: PathOutcomeRecord, rules: Sequence[BucketRule]) -> str:
    """Bucket under ``rules``: the query decides when present, else the stored id.

    A stored id the rules do not define falls into the default bucket.
    """
    if rec.query is not None:
        return classify_bucket(rec.query, rules)
    if rec.bucket is None:
        raise MissingField(f"record {rec.id!r} has neither a bucket nor a query")
    return rec.bucket if rec.bucket in {r.bucket_id for r in rules} else DEFAULT_BUCKET


class Policy:
    name = "policy"

    def route_many(self, records: Sequence[PathOutcomeRecord]) -> np.ndarray:
        """Selected path index for each record."""
        raise NotImplementedError

    def route(self, record: PathOutcomeRecord) -> Path:
        return PATHS[int(self.route_many([record])[0])]


@dataclass
class Fixed(Policy):
    path: Path

    def __post_init__(self):
        self.path = Path.parse(self.path)

    @property
    def name(self):
        return self.path.value

    def route_many(self, records):
        return np.full(len(records), self.path.index)


@dataclass
class Random(Policy):
    """Uniform over paths, derandomised by hashing (seed, record id)."""

    seed: int = 0
    name = "random"

    def route_many(self, records):
        out = np.empty(len(records), dtype=int)
        for k, rec in enumerate(records):
            h = hashlib.sha256(f"{self.seed}:{rec.id}".encode()).digest()
            out[k] = int.from_bytes(h[:8], "little") % N_PATHS
        return out


@dataclass
class ModelOnly(Policy):
    model: PlannerModel
    name = "model"

    def route_many(self, records):
        if not records:
            return np.empty(0, dtype=int)
        return np.argmax(forward(self.model, feature_matrix(records)), axis=1)


@dataclass
class BucketOnly(Policy):
    rules: list[BucketRule]
    paths: dict[str, Path]
    name = "bucket"

    def route_many(self, records):
        fallback = self.paths.get(DEFAULT_BUCKET, Path.A)
        return np.array([Path.parse(self.paths.get(record_bucket(r, self.rules), fallback)).index
                         for r in records], dtype=int)


@dataclass
class Calibrated(Policy):
    model: PlannerModel
    policy: CalibrationPolicy
    name: str = "calibrated"

    def route_many(self, records):
        if not records:
            return np.empty(0, dtype=int)
        logits = forward(self.model, feature_matrix(records))
        buckets = np.array([record_bucket(r, self.policy.rules) for r in records], dtype=object)
        out = np.empty(len(records), dtype=int)
        for b in dict.fromkeys(buckets):
            m = buckets == b
            pol = self.policy.policy_for(b)
            out[m] = select_many(calibrate(logits[m], pol), pol.default_path, pol.margin)
        return out


@dataclass
class Oracle(Policy):
    """Cheapest (canonical-order) successful path; p_A when nothing succeeds."""

    name = "oracle"

    def route_many(self, records):
        R = outcome_matrix(records)
        return np.where(R.any(axis=1), np.argmax(R, axis=1), Path.A.index)


@dataclass
class External(Policy):
    name: str = "external"

    def route_many(self, records):
        missing = [r.id for r in records if r.external_choice is None]
        if missing:
            raise MissingField(f"record {missing[0]!r} has no external_choice")
        return np.array([r.external_choice.index for r in records], dtype=int)


def route_record(policy: Policy, record: PathOutcomeRecord) -> Path:
    return policy.route(record)


# --- reports ------------------------------------------------------------------------

@dataclass
class EvaluationReport:
    policy: str
    n: int
    accuracy: float
    counts: list[int]
    cond_accuracy: list[float | None]  # None: path never selected
    avg_tokens: float
    by_dataset: dict[str, "EvaluationReport"] = field(default_factory=dict)

    def to_json(self) -> dict:
        obj = {
            "policy": self.policy,
            "n": self.n,
            "accuracy": self.accuracy,
            "counts": {p.value: c for p, c in zip(PATHS, self.counts)},
            "cond_accuracy": {p.value: a for p, a in zip(PATHS, self.cond_accuracy)},
            "avg_tokens": self.avg_tokens,
        }
        if self.by_dataset:
            obj["by_dataset"] = {d: r.to_json() for d, r in self.by_dataset.items()}
        return obj


def _report(name: str, choice: np.ndarray, R: np.ndarray, T: np.ndarray) -> EvaluationReport:
    rows = np.arange(len(choice))
    correct = R[rows, choice]
    counts = np.bincount(choice, minlength=N_PATHS)
    cond = []
    for p in range(N_PATHS):
        cond.append(float(correct[choice == p].mean()) if counts[p] else None)
    return EvaluationReport(
        policy=name,
        n=len(choice),
        accuracy=float(correct.mean()),
        counts=[int(c) for c in counts],
        cond_accuracy=cond,
        avg_tokens=float(T[rows, choice].mean()),
    )


def evaluate(policy: Policy, records: Sequence[PathOutcomeRecord],
             name: str | None = None) -> EvaluationReport:
    if not records:
        raise EmptyRecordSet("cannot evaluate on zero records")
    choice = np.asarray(policy.route_many(records), dtype=int)
    R, T = outcome_matrix(records), token_matrix(records)
    report = _report(name or policy.name, choice, R, T)
    datasets = np.array([r.dataset for r in records], dtype=object)
    for d in sorted(set(datasets)):
        m = datasets == d
        report.by_dataset[d] = _report(report.policy, choice[m], R[m], T[m])
    return report


def oracle_accuracy(records: Sequence[PathOutcomeRecord]) -> float:
    if not records:
        raise EmptyRecordSet("cannot evaluate on zero records")
    return float(outcome_matrix(records).any(axis=1).mean())


def token_cost(policy: Policy, records: Sequence[PathOutcomeRecord]) -> float:
    if not records:
        raise EmptyRecordSet("cannot evaluate on zero records")
    choice = np.asarray(policy.route_many(records), dtype=int)
    return float(token_matrix(records)[np.arange(len(records)), choice].mean())


# --- diagnostics ----------------------------------------------------------------------

@dataclass(frozen=True)
class CollapseDiagnostics:
    dominant_path: Path
    dominant_share: float
    entropy: float  # normalised to [0, 1]
    effective_paths: float
    unused_paths: tuple[Path, ...]
    collapsed: bool


def collapse_diagnostics(counts: Sequence[int], threshold: float = 0.75) -> CollapseDiagnostics:
    """Summarise how concentrated a selected-path distribution is.

    A planner counts as collapsed when one path takes at least ``threshold`` of
    all routed records.
    """
    c = np.asarray(counts, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        raise EmptyRecordSet("no routed records")
    share = c / total
    nz = share[share > 0]
    ent = float(-(nz * np.log(nz)).sum())
    top = int(np.argmax(c))
    return CollapseDiagnostics(
        dominant_path=PATHS[top],
        dominant_share=float(share[top]),
        entropy=ent / math.log(N_PATHS),
        effective_paths=math.exp(ent),
        unused_paths=tuple(p for p, k in zip(PATHS, c) if k == 0),
        collapsed=bool(share[top] >= threshold),
    )
