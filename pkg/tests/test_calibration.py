import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pathroute.calibration import (DEFAULT_BUCKET, BucketPolicy, BucketRule, CalibrationPolicy, EmptyBucket,
                                   GridSpec, builtin_rules, calibrate, classify_bucket, fit_bucket, fit_policy,
                                   load_policy, rules_from_json, save_policy, select_many, select_path,
                                   validate_rules)
from pathroute.paths import PATHS, Path
from pathroute.planner import scores
from pathroute.synth import OPEN_TEMPLATES, SIMPLE_TEMPLATES, STRUCTURED_TEMPLATES


# --- buckets ---------------------------------------------------------------------------

def test_classify_direct_match_and_default():
    rules = [BucketRule("count", 1, ("how many",))]
    assert classify_bucket("How many apples are on the table?", rules) == "count"
    assert classify_bucket("Describe the scene.", rules) == DEFAULT_BUCKET


def test_classify_priority():
    rules = [BucketRule("low", 1, ("angle",)), BucketRule("high", 5, ("how many",))]
    q = "How many angles are acute?"
    assert classify_bucket(q, rules) == "high"
    assert classify_bucket(q, list(reversed(rules))) == "high"


def test_wildcards_are_anchored():
    rules = [BucketRule("yn", 1, ("is the * red?",))]
    assert classify_bucket("Is the barn red?", rules) == "yn"
    assert classify_bucket("So, is the barn red?", rules) == DEFAULT_BUCKET


def test_validate_rules():
    with pytest.raises(ValueError):
        validate_rules([BucketRule("a", 1, ("x",)), BucketRule("a", 2, ("y",))])
    with pytest.raises(ValueError):
        validate_rules([BucketRule("a", 1, ("x",)), BucketRule("b", 1, ("y",))])
    with pytest.raises(ValueError):
        validate_rules([BucketRule(DEFAULT_BUCKET, 1, ("x",))])


@given(st.text(max_size=60))
def test_classify_is_total(query):
    rules = builtin_rules()
    assert classify_bucket(query, rules) in {r.bucket_id for r in rules} | {DEFAULT_BUCKET}


def test_builtin_rules_sort_synthetic_templates():
    rules = builtin_rules()
    fill = dict(obj="dogs", k="3", n="4", letter="B")
    for t in SIMPLE_TEMPLATES:
        assert classify_bucket(t.format(**fill), rules) == "simple", t
    for t in STRUCTURED_TEMPLATES:
        assert classify_bucket(t.format(**fill), rules) == "structured", t
    for t in OPEN_TEMPLATES:
        assert classify_bucket(t.format(**fill), rules) == DEFAULT_BUCKET, t


# --- calibrate / select ----------------------------------------------------------------

def test_calibrate_identity():
    logits = np.array([1.5, -0.3, 0.0, 2.2, -4.0])
    np.testing.assert_array_equal(calibrate(logits, BucketPolicy("b")), scores(logits))


def test_calibrate_large_temperature():
    s = calibrate(np.array([5.0, -5.0, 3.0, 0.0, 1.0]), BucketPolicy("b", temperature=1e12))
    np.testing.assert_allclose(s, 0.5, atol=1e-11)


def test_calibrate_closed_form():
    s = calibrate(np.array([2.0, 0, 0, 0, 0]), BucketPolicy("b", temperature=2.0))
    assert round(float(s[0]), 6) == 0.731059
    assert s[1:].tolist() == [0.5] * 4


def test_calibrate_bias_shifts_logit():
    pol = BucketPolicy("b", bias=(0.5, 0, 0, 0, -0.5))
    s = calibrate(np.zeros(5), pol)
    assert s[0] == pytest.approx(1 / (1 + math.exp(-0.5)))
    assert s[4] == pytest.approx(1 / (1 + math.exp(0.5)))


def test_select_margin_rule():
    s = np.array([0.60, 0.10, 0.20, 0.64, 0.30])
    assert select_path(s, BucketPolicy("b", margin=0.05, default_path=Path.A)) is Path.A
    assert select_path(s, BucketPolicy("b", margin=0.03, default_path=Path.A)) is Path.C
    assert select_path(np.full(5, 0.4), BucketPolicy("b", default_path=Path.R)) is Path.R
    assert select_path(np.array([0, 0, 0, 0, 1.0]), BucketPolicy("b", margin=math.inf)) is Path.A


def test_select_tie_break_lowest_non_default():
    s = np.array([0.1, 0.7, 0.2, 0.7, 0.7])
    assert select_path(s, BucketPolicy("b", default_path=Path.A)) is Path.U
    assert select_path(s, BucketPolicy("b", default_path=Path.U)) is Path.U  # no strict gain over default
    s2 = np.array([0.1, 0.2, 0.2, 0.7, 0.7])
    assert select_path(s2, BucketPolicy("b", default_path=Path.U)) is Path.C


def naive_select(s, d, m):
    best, best_v = None, -1.0
    for p in range(5):
        if p != d and s[p] > best_v:
            best, best_v = p, s[p]
    return best if best_v - s[d] > m else d


def test_select_many_matches_naive(rng):
    for _ in range(200):
        s = rng.random((8, 5))
        d = int(rng.integers(5))
        m = float(rng.choice([0.0, 0.02, 0.1, math.inf]))
        got = select_many(s, PATHS[d], m)
        assert got.tolist() == [naive_select(row, d, m) for row in s]


def test_bias_zero_margin_zero_is_argmax_over_non_default(rng):
    logits = rng.normal(size=(50, 5))
    pol = BucketPolicy("b", margin=0.0, default_path=Path.A)
    got = select_many(calibrate(logits, pol), Path.A, 0.0)
    best = 1 + np.argmax(logits[:, 1:], axis=1)
    expect = np.where(logits[np.arange(50), best] > logits[:, 0], best, 0)
    assert got.tolist() == expect.tolist()


# --- fitting -----------------------------------------------------------------------------

T_ROW = np.array([1.2, 74.9, 231.4, 291.5, 295.7])


def _routed(logits, R, pol):
    choice = select_many(calibrate(logits, pol), pol.default_path, pol.margin)
    return float(R[np.arange(len(R)), choice].mean())


def test_fit_pa_always_succeeds(rng):
    n = 60
    logits = rng.normal(size=(n, 5)) * 3
    R = (rng.random((n, 5)) < 0.3).astype(float)
    R[:, 0] = 1
    pol, acc = fit_bucket("b", logits, R, np.tile(T_ROW, (n, 1)), GridSpec())
    assert acc == 1.0
    choice = select_many(calibrate(logits, pol), pol.default_path, pol.margin)
    # accuracy ties broken by token cost, so everything goes to the cheapest path p_A
    assert set(choice.tolist()) == {0}


def test_fit_only_pc_succeeds(rng):
    n = 40
    logits = rng.normal(size=(n, 5))
    logits[:, 3] += 4.0
    R = np.zeros((n, 5))
    R[:, 3] = 1
    pol, acc = fit_bucket("b", logits, R, np.tile(T_ROW, (n, 1)), GridSpec())
    assert acc == 1.0
    assert set(select_many(calibrate(logits, pol), pol.default_path, pol.margin).tolist()) == {3}


def test_single_point_grid():
    logits = np.zeros((3, 5))
    R = np.eye(5)[:3]
    grid = GridSpec.single(temperature=2.0, bias=0.5, margin=0.02, default_path=Path.H)
    pol, _ = fit_bucket("b", logits, R, np.tile(T_ROW, (3, 1)), grid)
    assert (pol.temperature, pol.bias, pol.margin, pol.default_path) == (2.0, (0.5,) * 5, 0.02, Path.H)


def test_trivial_grid_yields_unit_temperature(rng):
    logits, R = rng.normal(size=(30, 5)), (rng.random((30, 5)) < 0.5).astype(float)
    pol, _ = fit_bucket("b", logits, R, np.tile(T_ROW, (30, 1)), GridSpec.trivial())
    assert pol.temperature == 1.0 and pol.bias == (0.0,) * 5


def brute_force_fit(logits, R, T, grid):
    """Exhaustive search over (tau, margin, default) with zero bias, same tie rules."""
    best_key, best = None, None
    for tau, m, d in itertools.product(grid.temperatures, grid.margins, grid.default_paths):
        pol = BucketPolicy("b", tau, (0.0,) * 5, m, d)
        choice = select_many(calibrate(logits, pol), d, m)
        rows = np.arange(len(R))
        key = (R[rows, choice].mean(), T[rows, choice].mean())
        if best_key is None or key[0] > best_key[0] or (key[0] == best_key[0] and key[1] < best_key[1]):
            best_key, best = key, pol
    return best, best_key[0]


def test_fit_matches_exhaustive_search_without_bias_search(rng):
    grid = GridSpec(bias_values=(0.0,))
    for _ in range(20):
        n = int(rng.integers(5, 40))
        logits = rng.normal(size=(n, 5)) * 2
        R = (rng.random((n, 5)) < rng.random(5)).astype(float)
        T = rng.integers(1, 300, size=(n, 5)).astype(float)
        pol, acc = fit_bucket("b", logits, R, T, grid)
        ref, ref_acc = brute_force_fit(logits, R, T, grid)
        assert acc == ref_acc
        assert (pol.temperature, pol.margin, pol.default_path) == (ref.temperature, ref.margin, ref.default_path)


def test_fit_never_below_trivial_or_model(rng):
    for _ in range(15):
        n = int(rng.integers(10, 80))
        logits = rng.normal(size=(n, 5)) * 2
        R = (rng.random((n, 5)) < rng.random(5)).astype(float)
        T = np.tile(T_ROW, (n, 1))
        pol, acc = fit_bucket("b", logits, R, T, GridSpec())
        assert acc == pytest.approx(_routed(logits, R, pol))
        for d in PATHS:
            trivial = BucketPolicy("b", 1.0, (0.0,) * 5, math.inf, d)
            assert acc >= _routed(logits, R, trivial)
        model_acc = R[np.arange(n), np.argmax(logits, axis=1)].mean()
        assert acc >= model_acc


def _policy_inputs(rng, n=120):
    rules = builtin_rules()
    queries = ["how many dogs?", "find the angle", "describe"]
    buckets = [classify_bucket(queries[i % 3], rules) for i in range(n)]
    logits = rng.normal(size=(n, 5))
    R = (rng.random((n, 5)) < 0.5).astype(float)
    return logits, R, np.tile(T_ROW, (n, 1)), buckets, rules


def test_fit_policy_all_buckets(rng):
    logits, R, T, buckets, rules = _policy_inputs(rng)
    pol = fit_policy(logits, R, T, buckets, rules)
    assert set(pol.policies) == {"simple", "structured", DEFAULT_BUCKET}
    assert set(pol.bucket_paths) == set(pol.policies)


def test_fit_policy_missing_bucket_falls_back_to_default(rng):
    logits, R, T, buckets, rules = _policy_inputs(rng)
    keep = np.array([b != "structured" for b in buckets])
    pol = fit_policy(logits[keep], R[keep], T[keep], [b for b in buckets if b != "structured"], rules)
    d, s = pol.policies[DEFAULT_BUCKET], pol.policies["structured"]
    assert (s.temperature, s.bias, s.margin, s.default_path) == (d.temperature, d.bias, d.margin, d.default_path)


def test_fit_policy_empty_default_bucket(rng):
    logits, R, T, buckets, rules = _policy_inputs(rng)
    keep = np.array([b != DEFAULT_BUCKET for b in buckets])
    with pytest.raises(EmptyBucket):
        fit_policy(logits[keep], R[keep], T[keep], [b for b in buckets if b != DEFAULT_BUCKET], rules)


def test_fit_policy_thread_count_independent(rng, monkeypatch):
    args = _policy_inputs(rng)
    monkeypatch.setenv("PATHROUTE_THREADS", "1")
    a = fit_policy(*args).to_json()
    monkeypatch.setenv("PATHROUTE_THREADS", "0")
    assert fit_policy(*args).to_json() == a


# --- policy files ------------------------------------------------------------------------

def test_policy_file_roundtrip(tmp_path, rng):
    logits, R, T, buckets, rules = _policy_inputs(rng)
    pol = fit_policy(logits, R, T, buckets, rules)
    pol.policies["simple"] = BucketPolicy("simple", 2.0, (0.5, 0, 0, 0, -0.5), math.inf, Path.U)
    save_policy(pol, tmp_path / "p.json")
    back = load_policy(tmp_path / "p.json")
    assert back.to_json() == pol.to_json()
    assert back.policies["simple"].margin == math.inf
    assert back.to_json()["version"] == 1


def test_policy_requires_every_bucket():
    rules = [BucketRule("simple", 1, ("how many",))]
    with pytest.raises(ValueError):
        CalibrationPolicy(rules, {DEFAULT_BUCKET: BucketPolicy(DEFAULT_BUCKET)})
    with pytest.raises(ValueError):
        CalibrationPolicy(rules, {"simple": BucketPolicy("simple")})


def test_policy_route():
    rules = rules_from_json({"rules": [{"bucket": "s", "priority": 1, "matchers": ["how many"]}]})
    pol = CalibrationPolicy(rules, {"s": BucketPolicy("s", default_path=Path.U, margin=math.inf),
                                    DEFAULT_BUCKET: BucketPolicy(DEFAULT_BUCKET)})
    logits = np.array([0, 0, 0, 5.0, 0])
    assert pol.route(logits, pol.bucket_of("How many?")) is Path.U
    assert pol.route(logits, pol.bucket_of("why?")) is Path.C


def test_bucket_policy_validation():
    with pytest.raises(ValueError):
        BucketPolicy("b", temperature=0.0)
    with pytest.raises(ValueError):
        BucketPolicy("b", margin=-0.1)
    with pytest.raises(ValueError):
        BucketPolicy("b", bias=(0.0,))
