"""Query-form buckets and per-bucket temperature/bias/margin path selection."""

from __future__ import annotations

import fnmatch
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np

from .parallel import max_workers
from .paths import N_PATHS, PATHS, Path
from .planner import scores

log = logging.getLogger(__name__)

DEFAULT_BUCKET = "default"
POLICY_VERSION = 1


class EmptyBucket(ValueError):
    pass


@dataclass(frozen=True)
class BucketRule:
    bucket_id: str
    priority: int
    matchers: tuple[str, ...]

    def matches(self, query: str) -> bool:
        q = query.lower()
        for m in self.matchers:
            pat = m.lower()
            if any(ch in pat for ch in "*?["):
                if fnmatch.fnmatchcase(q, pat):
                    return True
            elif pat in q:
                return True
        return False


@dataclass(frozen=True)
class BucketPolicy:
    bucket_id: str
    temperature: float = 1.0
    bias: tuple[float, ...] = (0.0,) * N_PATHS
    margin: float = 0.0
    default_path: Path = Path.A

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"bucket {self.bucket_id!r}: temperature must be positive")
        if len(self.bias) != N_PATHS:
            raise ValueError(f"bucket {self.bucket_id!r}: bias needs {N_PATHS} entries")
        if self.margin < 0:
            raise ValueError(f"bucket {self.bucket_id!r}: margin must be nonnegative")
        object.__setattr__(self, "default_path", Path.parse(self.default_path))
        object.__setattr__(self, "bias", tuple(float(b) for b in self.bias))

    def to_json(self) -> dict:
        return {
            "temperature": self.temperature,
            "bias": list(self.bias),
            "margin": self.margin if math.isfinite(self.margin) else "inf",
            "default_path": self.default_path.value,
        }

    @classmethod
    def from_json(cls, bucket_id: str, obj: dict) -> "BucketPolicy":
        return cls(bucket_id, float(obj["temperature"]), tuple(obj["bias"]),
                   float(obj["margin"]), Path.parse(obj["default_path"]))


def validate_rules(rules: Sequence[BucketRule]) -> None:
    ids = [r.bucket_id for r in rules]
    prios = [r.priority for r in rules]
    if len(set(ids)) != len(ids):
        raise ValueError("bucket ids must be unique")
    if len(set(prios)) != len(prios):
        raise ValueError("rule priorities must be unique")
    if DEFAULT_BUCKET in ids:
        raise ValueError(f"{DEFAULT_BUCKET!r} is reserved and matches implicitly")


def classify_bucket(query: str, rules: Sequence[BucketRule]) -> str:
    """Highest-priority matching bucket, or the default bucket."""
    for rule in sorted(rules, key=lambda r: -r.priority):
        if rule.matches(query):
            return rule.bucket_id
    return DEFAULT_BUCKET


def calibrate(logits, policy: BucketPolicy) -> np.ndarray:
    """sigmoid(logit / temperature + bias); works on (5,) or (n, 5) inputs."""
    z = np.asarray(logits, dtype=np.float64) / policy.temperature + np.asarray(policy.bias)
    return scores(z)


def select_many(calibrated: np.ndarray, default_path: Path, margin: float) -> np.ndarray:
    """Vectorised margin rule over rows of calibrated scores; returns path indices."""
    s = np.atleast_2d(calibrated)
    d = Path.parse(default_path).index
    others = s.copy()
    others[:, d] = -np.inf
    best = np.argmax(others, axis=1)  # first maximum -> canonical tie-break
    advantage = s[np.arange(len(s)), best] - s[:, d]
    return np.where(advantage > margin, best, d)


def select_path(calibrated, policy: BucketPolicy) -> Path:
    """Best non-default path if it beats the default by more than the margin."""
    return PATHS[int(select_many(np.asarray(calibrated), policy.default_path, policy.margin)[0])]


@dataclass
class CalibrationPolicy:
    rules: list[BucketRule]
    policies: dict[str, BucketPolicy]
    bucket_paths: dict[str, Path] = field(default_factory=dict)

    def __post_init__(self):
        validate_rules(self.rules)
        missing = [r.bucket_id for r in self.rules if r.bucket_id not in self.policies]
        if DEFAULT_BUCKET not in self.policies:
            missing.append(DEFAULT_BUCKET)
        if missing:
            raise ValueError(f"no policy for bucket(s) {missing}")

    def bucket_of(self, query: str) -> str:
        return classify_bucket(query, self.rules)

    def policy_for(self, bucket_id: str) -> BucketPolicy:
        return self.policies.get(bucket_id, self.policies[DEFAULT_BUCKET])

    def route(self, logits, bucket_id: str) -> Path:
        pol = self.policy_for(bucket_id)
        return select_path(calibrate(logits, pol), pol)

    def to_json(self) -> dict:
        obj = {
            "version": POLICY_VERSION,
            "rules": rules_to_json(self.rules),
            "policies": {b: p.to_json() for b, p in sorted(self.policies.items())},
        }
        if self.bucket_paths:
            obj["bucket_paths"] = {b: p.value for b, p in sorted(self.bucket_paths.items())}
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "CalibrationPolicy":
        if obj.get("version") != POLICY_VERSION:
            raise ValueError(f"unsupported policy file version {obj.get('version')!r}")
        return cls(
            rules_from_json(obj),
            {b: BucketPolicy.from_json(b, p) for b, p in obj["policies"].items()},
            {b: Path.parse(p) for b, p in (obj.get("bucket_paths") or {}).items()},
        )


def rules_to_json(rules: Sequence[BucketRule]) -> list[dict]:
    return [{"bucket": r.bucket_id, "priority": r.priority, "matchers": list(r.matchers)}
            for r in rules]


def rules_from_json(obj: dict) -> list[BucketRule]:
    rules = [BucketRule(str(r["bucket"]), int(r["priority"]), tuple(r["matchers"]))
             for r in obj["rules"]]
    validate_rules(rules)
    return rules


def load_rules(path) -> list[BucketRule]:
    with open(path, encoding="utf-8") as fh:
        return rules_from_json(json.load(fh))


def builtin_rules() -> list[BucketRule]:
    """Shipped example rules: simple (counting / yes-no) vs. structured (geometry / charts)."""
    text = resources.files("pathroute.data").joinpath("rules.json").read_text(encoding="utf-8")
    return rules_from_json(json.loads(text))


def save_policy(policy: CalibrationPolicy, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(policy.to_json(), fh, indent=2, sort_keys=False)
        fh.write("\n")


def load_policy(path) -> CalibrationPolicy:
    with open(path, encoding="utf-8") as fh:
        return CalibrationPolicy.from_json(json.load(fh))


# --- fitting ----------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    temperatures: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    bias_values: tuple[float, ...] = (-0.5, 0.0, 0.5)
    margins: tuple[float, ...] = (0.0, 0.02, 0.05, 0.1, math.inf)
    default_paths: tuple[Path, ...] = PATHS
    coordinate_passes: int = 2

    @classmethod
    def single(cls, temperature=1.0, bias=0.0, margin=0.0, default_path=Path.A) -> "GridSpec":
        return cls((temperature,), (bias,), (margin,), (Path.parse(default_path),), 1)

    @classmethod
    def trivial(cls) -> "GridSpec":
        """Identity calibration, either pure argmax (margin 0) or always-default."""
        return cls((1.0,), (0.0,), (0.0, math.inf), PATHS, 1)


def _evaluate(logits, R, T, temperature, bias, default_idx, margin):
    s = calibrate(logits, BucketPolicy("_", temperature, tuple(bias), margin, PATHS[default_idx]))
    choice = select_many(s, PATHS[default_idx], margin)
    rows = np.arange(len(R))
    return float(R[rows, choice].mean()), float(T[rows, choice].mean())


def _better(a, b) -> bool:
    """Higher accuracy wins, then lower token cost; exact ties keep the incumbent."""
    return a[0] > b[0] or (a[0] == b[0] and a[1] < b[1])


def fit_bucket(bucket_id: str, logits, R, T, grid: GridSpec) -> tuple[BucketPolicy, float]:
    """Grid search for one bucket; biases are searched one path at a time.

    For each (temperature, margin, default path) the bias vector starts at the
    grid value closest to zero and each coordinate is set to its best grid value
    in turn, for ``grid.coordinate_passes`` sweeps. Candidates are compared by
    (accuracy desc, mean tokens asc), earlier grid points winning exact ties.
    """
    R = np.asarray(R, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    start_bias = min(grid.bias_values, key=abs)
    best_key, best_pol = None, None
    for temperature, margin, default in itertools.product(
            grid.temperatures, grid.margins, grid.default_paths):
        d = Path.parse(default).index
        bias = [start_bias] * N_PATHS
        key = _evaluate(logits, R, T, temperature, bias, d, margin)
        if math.isfinite(margin) and len(grid.bias_values) > 1:
            for _ in range(grid.coordinate_passes):
                changed = False
                for p in range(N_PATHS):
                    for value in grid.bias_values:
                        if value == bias[p]:
                            continue
                        trial = bias.copy()
                        trial[p] = value
                        k = _evaluate(logits, R, T, temperature, trial, d, margin)
                        if _better(k, key):
                            key, bias, changed = k, trial, True
                if not changed:
                    break
        if best_key is None or _better(key, best_key):
            best_key = key
            best_pol = BucketPolicy(bucket_id, temperature, tuple(bias), margin, PATHS[d])
    return best_pol, best_key[0]


def fit_policy(logits, R, T, buckets: Sequence[str], rules: Sequence[BucketRule],
               grid: GridSpec | None = None) -> CalibrationPolicy:
    """Fit one BucketPolicy per bucket on calibration records.

    ``logits`` are planner logits (n, 5), ``R`` outcomes (n, 5), ``T`` token
    counts (n, 5) and ``buckets`` the bucket id of each record. Buckets without
    records reuse the fitted default-bucket policy.
    """
    grid = grid or GridSpec()
    logits = np.asarray(logits, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    buckets = np.asarray(buckets, dtype=object)
    wanted = [DEFAULT_BUCKET] + [r.bucket_id for r in rules]
    present = [b for b in wanted if np.any(buckets == b)]
    if DEFAULT_BUCKET not in present:
        if not present:
            raise EmptyBucket("no calibration records in any bucket")
        raise EmptyBucket("the default bucket received no calibration records")

    def job(b):
        m = buckets == b
        return fit_bucket(b, logits[m], R[m], T[m], grid)

    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        fitted = dict(zip(present, pool.map(job, present)))

    policies = {}
    for b in wanted:
        if b in fitted:
            policies[b] = fitted[b][0]
        else:
            log.warning("bucket %r has no calibration records; using the default policy", b)
            d = fitted[DEFAULT_BUCKET][0]
            policies[b] = BucketPolicy(b, d.temperature, d.bias, d.margin, d.default_path)
    bucket_paths = fit_bucket_paths(R, T, buckets, wanted)
    return CalibrationPolicy(list(rules), policies, bucket_paths)


def fit_bucket_paths(R, T, buckets, wanted) -> dict[str, Path]:
    """Best fixed path per bucket (accuracy, then tokens, then canonical order)."""
    R = np.asarray(R, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    buckets = np.asarray(buckets, dtype=object)
    overall = _best_fixed(R, T)
    out = {}
    for b in wanted:
        m = buckets == b
        out[b] = _best_fixed(R[m], T[m]) if np.any(m) else overall
    return out


def _best_fixed(R, T) -> Path:
    acc = R.mean(axis=0)
    cost = T.mean(axis=0)
    best = 0
    for p in range(1, N_PATHS):
        if _better((acc[p], cost[p]), (acc[best], cost[best])):
            best = p
    return PATHS[best]
