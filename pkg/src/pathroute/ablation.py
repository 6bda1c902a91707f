"""Routing-policy ablation under domain shift.

Protocol: source-domain records are split into a planner-training part and a
calibration pool; target-domain records into an adaptation part and an
evaluation part. The planner and the shared calibration policy only ever see
source data. "Adapted" refits the calibration on the target adaptation part.
Every policy is scored on the same target evaluation records.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .calibration import BucketRule, CalibrationPolicy, GridSpec, builtin_rules, fit_policy
from .paths import PATHS
from .planner import TrainConfig, TrainResult, forward, split_by_id, train
from .records import PathOutcomeRecord, feature_matrix, outcome_matrix, token_matrix
from .routing import (BucketOnly, Calibrated, EvaluationReport, Fixed, ModelOnly, Oracle,
                      Random, evaluate, record_bucket)


def fit_calibration(model, records: Sequence[PathOutcomeRecord], rules: Sequence[BucketRule],
                    grid: GridSpec | None = None) -> CalibrationPolicy:
    return fit_policy(forward(model, feature_matrix(records)), outcome_matrix(records),
                      token_matrix(records), [record_bucket(r, rules) for r in records], rules, grid)


def split(records, fraction: float, seed: int):
    """(selected, rest) with each record assigned by hashing its id."""
    mask = split_by_id([r.id for r in records], fraction, seed)
    return ([r for r, m in zip(records, mask) if m],
            [r for r, m in zip(records, mask) if not m])


@dataclass
class AblationResult:
    reports: dict[str, EvaluationReport]
    training: TrainResult
    shared_policy: CalibrationPolicy
    adapted_policy: CalibrationPolicy
    sizes: dict[str, int] = field(default_factory=dict)

    def accuracy(self, name: str) -> float:
        return self.reports[name].accuracy


def shift_ablation(source: Sequence[PathOutcomeRecord], target: Sequence[PathOutcomeRecord],
                   train_config: TrainConfig | None = None, rules: Sequence[BucketRule] | None = None,
                   calibration_fraction: float = 0.3, adaptation_fraction: float = 0.5,
                   grid: GridSpec | None = None, seed: int = 0) -> AblationResult:
    cfg = train_config or TrainConfig(seed=seed)
    rules = builtin_rules() if rules is None else list(rules)
    pool, train_part = split(source, calibration_fraction, seed)
    adapt, held_out = split(target, adaptation_fraction, seed + 1)

    fit = train(feature_matrix(train_part), outcome_matrix(train_part), cfg,
                ids=[r.id for r in train_part])
    shared = fit_calibration(fit.model, pool, rules, grid)
    adapted = fit_calibration(fit.model, adapt, rules, grid)

    policies = [Fixed(p) for p in PATHS] + [
        Random(seed),
        ModelOnly(fit.model),
        BucketOnly(rules, shared.bucket_paths),
        Calibrated(fit.model, shared, name="calibrated"),
        Calibrated(fit.model, adapted, name="adapted"),
        Oracle(),
    ]
    reports = {p.name: evaluate(p, held_out) for p in policies}
    sizes = {"train": len(train_part), "calibration": len(pool),
             "adaptation": len(adapt), "evaluation": len(held_out)}
    return AblationResult(reports, fit, shared, adapted, sizes)
