import os
import sys

import numpy as np
import pytest
from hypothesis import settings

from pathroute.records import PathOutcomeRecord

settings.register_profile("repo", deadline=None, max_examples=100)
settings.load_profile("repo")

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def fixture_path(*parts):
    return os.path.join(FIXTURES, *parts)


def make_record(rid, outcomes, tokens=(1, 75, 231, 291, 296), dataset="d", **kw):
    return PathOutcomeRecord(id=str(rid), dataset=dataset, outcomes=tuple(outcomes),
                             tokens=tuple(tokens), **kw)


def random_records(rng, n, F=4, datasets=("a", "b"), q=None):
    """Random records with features, queries and datasets for property tests."""
    q = np.full(5, 0.4) if q is None else np.asarray(q)
    out = []
    for i in range(n):
        out.append(PathOutcomeRecord(
            id=f"r{i}",
            dataset=datasets[i % len(datasets)],
            outcomes=tuple((rng.random(5) < q).astype(int)),
            tokens=tuple(rng.integers(1, 400, size=5)),
            query=["how many cats?", "what is the angle?", "describe it"][i % 3],
            features=rng.normal(size=F),
        ))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
