"""Per-query path outcome records and their JSON-lines files.

One record holds, for every path in canonical order, whether the path solved
the query and how many output tokens it produced. Features are either inline
or a reference into a sidecar feature file:

    {"features": {"file": "feats.plnf", "index": 12}}   # binary, by row
    {"features": {"file": "feats.jsonl"}}                 # JSON-lines, by id
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import features as featio
from .paths import N_PATHS, Path


class MissingField(ValueError):
    pass


@dataclass
class PathOutcomeRecord:
    id: str
    dataset: str
    outcomes: tuple[int, ...]
    tokens: tuple[int, ...]
    query: str | None = None
    bucket: str | None = None
    features: np.ndarray | None = None
    outputs: tuple[str, ...] | None = None
    external_choice: Path | None = None
    features_ref: dict | None = None

    def __post_init__(self):
        self.outcomes = tuple(int(v) for v in self.outcomes)
        self.tokens = tuple(int(v) for v in self.tokens)
        if len(self.outcomes) != N_PATHS or any(v not in (0, 1) for v in self.outcomes):
            raise ValueError(f"record {self.id!r}: outcomes must be {N_PATHS} values in {{0,1}}")
        if len(self.tokens) != N_PATHS or any(v < 0 for v in self.tokens):
            raise ValueError(f"record {self.id!r}: tokens must be {N_PATHS} nonnegative integers")
        if self.outputs is not None:
            self.outputs = tuple(self.outputs)
            if len(self.outputs) != N_PATHS:
                raise ValueError(f"record {self.id!r}: outputs must have {N_PATHS} entries")
        if self.external_choice is not None:
            self.external_choice = Path.parse(self.external_choice)
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)

    @property
    def n_pos(self) -> int:
        return sum(self.outcomes)

    def to_json(self) -> dict:
        obj: dict = {"id": self.id, "dataset": self.dataset}
        if self.query is not None:
            obj["query"] = self.query
        if self.bucket is not None:
            obj["bucket"] = self.bucket
        if self.features_ref is not None:
            obj["features"] = self.features_ref
        elif self.features is not None:
            obj["features"] = self.features.tolist()
        obj["outcomes"] = list(self.outcomes)
        obj["tokens"] = list(self.tokens)
        if self.outputs is not None:
            obj["outputs"] = list(self.outputs)
        if self.external_choice is not None:
            obj["external_choice"] = self.external_choice.value
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "PathOutcomeRecord":
        feats = obj.get("features")
        ref = feats if isinstance(feats, dict) else None
        return cls(
            id=str(obj["id"]),
            dataset=str(obj.get("dataset", "")),
            outcomes=obj["outcomes"],
            tokens=obj["tokens"],
            query=obj.get("query"),
            bucket=obj.get("bucket"),
            features=None if ref is not None or feats is None else feats,
            outputs=obj.get("outputs"),
            external_choice=obj.get("external_choice"),
            features_ref=ref,
        )


def _resolve_sidecars(records: list[PathOutcomeRecord], base_dir: str) -> None:
    cache: dict[str, tuple] = {}
    for rec in records:
        ref = rec.features_ref
        if ref is None:
            continue
        fname = os.path.join(base_dir, ref["file"])
        if fname not in cache:
            ids, X = featio.read_features(fname)
            cache[fname] = (None if ids is None else {i: k for k, i in enumerate(ids)}, X)
        index, X = cache[fname]
        if "index" in ref:
            row = int(ref["index"])
        elif index is not None:
            if rec.id not in index:
                raise MissingField(f"record {rec.id!r} not found in {ref['file']}")
            row = index[rec.id]
        else:
            raise MissingField(f"record {rec.id!r}: binary sidecar reference needs an index")
        rec.features = X[row]


def read_records(path, resolve_features: bool = True) -> list[PathOutcomeRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(PathOutcomeRecord.from_json(json.loads(line)))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{n}: malformed record ({exc})") from None
    if resolve_features:
        _resolve_sidecars(records, os.path.dirname(os.path.abspath(path)))
    return records


def dumps_record(rec: PathOutcomeRecord) -> str:
    return json.dumps(rec.to_json(), ensure_ascii=False, separators=(", ", ": "))


def write_records(path, records: Iterable[PathOutcomeRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps_record(rec) + "\n")


def outcome_matrix(records: Sequence[PathOutcomeRecord]) -> np.ndarray:
    return np.array([r.outcomes for r in records], dtype=np.float64).reshape(-1, N_PATHS)


def token_matrix(records: Sequence[PathOutcomeRecord]) -> np.ndarray:
    return np.array([r.tokens for r in records], dtype=np.float64).reshape(-1, N_PATHS)


def feature_matrix(records: Sequence[PathOutcomeRecord]) -> np.ndarray:
    missing = [r.id for r in records if r.features is None]
    if missing:
        raise MissingField(f"{len(missing)} record(s) lack features, e.g. {missing[0]!r}")
    return np.array([r.features for r in records], dtype=np.float64)
