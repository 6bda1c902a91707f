import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pathroute.losses import (STAGES, AllZeroWeights, CheckpointEval, DimensionMismatch, EmptySpan,
                              NoComponents, ProjectionHead, TokenStream, VisualSpan, build_loss_mask,
                              exec_loss, parse_loss_record, pool_span, read_loss_records, record_losses,
                              select_checkpoint, stage, text_loss, visual_loss, visual_loss_grad)
from pathroute.paths import Role

from conftest import fixture_path

U, R, C, H, A = Role.UNDERSTANDING, Role.REASONING, Role.CONSTRUCTION, Role.HYPOTHESIS, Role.ANSWER


# --- naive oracles ------------------------------------------------------------------

def naive_text_loss(logp, w):
    num = 0.0
    den = 0.0
    for lp, wt in zip(logp, w):
        num += wt * lp
        den += wt
    return -num / den


def naive_visual_loss(pooled, targets, W, b):
    total = 0.0
    for h, v in zip(pooled, targets):
        sq = 0.0
        for i in range(len(b)):
            y = b[i]
            for k in range(len(h)):
                y += W[i][k] * h[k]
            sq += (y - v[i]) ** 2
        total += sq
    return total / len(pooled)


# --- stage presets --------------------------------------------------------------------

def test_stage_presets_exact():
    def tup(s):
        return (s.w_thought, s.w_answer, s.lambda_text, s.lambda_mse, s.lambda_vis)
    assert tup(STAGES["S1"]) == (0.5, 4.0, 1.0, 0.0, 0.0)
    assert tup(STAGES["S2"]) == (0.25, 6.0, 1.0, 0.0, 0.05)
    assert tup(STAGES["S3"]) == (1.0, 1.0, 2.0, 0.3, 0.0)
    assert tup(STAGES["S4"]) == (1.0, 1.0, 2.0, 0.3, 0.05)


def test_stage_gating_values():
    assert STAGES["S1"].format_tolerance == 0.01
    assert (STAGES["S1"].patience, STAGES["S1"].warmup_steps) == (6, 1200)
    for s in ("S2", "S3", "S4"):
        assert STAGES[s].format_tolerance == 0.03
        assert (STAGES[s].patience, STAGES[s].warmup_steps) == (8, 1600)
    assert all(s.eval_every == 200 for s in STAGES.values())


def test_unknown_stage():
    with pytest.raises(ValueError):
        stage("S9")


# --- mask -----------------------------------------------------------------------------

def test_mask_s1():
    s = TokenStream([-1.0, -1.0, -1.0], (None, U, A))
    assert build_loss_mask(s, "S1").tolist() == [0.0, 0.5, 4.0]


def test_mask_s2():
    s = TokenStream([-1.0, -1.0], (R, A))
    assert build_loss_mask(s, "S2").tolist() == [0.25, 6.0]


def test_mask_s3_unit():
    s = TokenStream([-1.0, -1.0], (None, A))
    assert build_loss_mask(s, "S3").tolist() == [0.0, 1.0]
    s = TokenStream([-1.0] * 5, (U, R, C, H, A))
    assert build_loss_mask(s, "S4").tolist() == [1.0] * 5


def test_token_stream_validation():
    with pytest.raises(ValueError):
        TokenStream([], ())
    with pytest.raises(DimensionMismatch):
        TokenStream([-1.0, -2.0], (A,))
    with pytest.raises(ValueError):
        TokenStream([0.5], (A,))


# --- text loss ------------------------------------------------------------------------

def test_text_loss_two_tokens():
    a, b = 0.7, 2.3
    s = TokenStream([-a, -b], (U, A))
    assert text_loss(s, [0.5, 4.0]) == pytest.approx((0.5 * a + 4 * b) / 4.5, abs=1e-15)


@pytest.mark.parametrize("stage_id", ["S1", "S2", "S3", "S4"])
def test_text_loss_uniform_is_log_v(stage_id):
    V = 32000
    s = TokenStream([-math.log(V)] * 6, (None, U, R, C, R, A))
    assert text_loss(s, build_loss_mask(s, stage_id)) == pytest.approx(math.log(V), rel=1e-14)


def test_text_loss_certain_token():
    assert text_loss(TokenStream([0.0], (A,)), [1.0]) == 0.0


def test_text_loss_all_zero_weights():
    s = TokenStream([-1.0, -1.0], (None, None))
    with pytest.raises(AllZeroWeights):
        text_loss(s, build_loss_mask(s, "S1"))


@given(st.lists(st.floats(0.0, 20.0), min_size=1, max_size=12), st.floats(0.01, 100.0), st.data())
def test_text_loss_scale_invariant(nll, c, data):
    w = data.draw(st.lists(st.floats(0.01, 10.0), min_size=len(nll), max_size=len(nll)))
    s = TokenStream([-x for x in nll], (A,) * len(nll))
    base = text_loss(s, w)
    assert text_loss(s, [c * x for x in w]) == pytest.approx(base, rel=1e-12, abs=1e-12)


def test_text_loss_matches_naive_random(rng):
    roles = (None, U, R, C, H, A)
    for _ in range(100):
        T = int(rng.integers(1, 20))
        logp = -rng.exponential(2.0, size=T)
        tags = tuple(roles[k] for k in rng.integers(0, 6, size=T))
        if all(t is None for t in tags):
            tags = tags[:-1] + (A,)
        s = TokenStream(logp, tags)
        w = build_loss_mask(s, ["S1", "S2", "S3", "S4"][int(rng.integers(4))])
        assert abs(text_loss(s, w) - naive_text_loss(logp, w)) <= 1e-12


# --- pooling / visual loss -------------------------------------------------------------

def test_pool_span():
    assert pool_span([[1.0, 2.0]]).tolist() == [1.0, 2.0]
    assert pool_span([[1.0, 0.0], [0.0, 1.0]]).tolist() == [0.5, 0.5]
    assert pool_span([[3.0, -1.0]] * 4).tolist() == [3.0, -1.0]
    with pytest.raises(EmptySpan):
        pool_span(np.zeros((0, 3)))


def test_visual_loss_examples():
    I2 = ProjectionHead.identity(2)
    assert visual_loss([VisualSpan(np.array([0.3, 0.4]), np.array([0.3, 0.4]))], I2) == 0.0
    assert visual_loss([VisualSpan(np.array([1.0, 0.0]), np.zeros(2))], I2) == 1.0
    # per-span losses 1 and 3
    spans = [VisualSpan(np.array([1.0, 0.0]), np.zeros(2)),
             VisualSpan(np.array([1.0, np.sqrt(2.0)]), np.zeros(2))]
    assert visual_loss(spans, I2) == pytest.approx(2.0, abs=1e-15)


def test_visual_loss_dimension_errors():
    head = ProjectionHead(np.eye(2, 3), np.zeros(2))
    with pytest.raises(DimensionMismatch):
        visual_loss([VisualSpan(np.zeros(2), np.zeros(2))], head)
    with pytest.raises(DimensionMismatch):
        visual_loss([VisualSpan(np.zeros(3), np.zeros(3))], head)
    with pytest.raises(EmptySpan):
        visual_loss([], head)


def _random_visual(rng):
    J, dh, dv = (int(x) for x in rng.integers(1, 5, size=3))
    spans = [VisualSpan(rng.normal(size=dh), rng.normal(size=dv)) for _ in range(J)]
    return spans, ProjectionHead(rng.normal(size=(dv, dh)), rng.normal(size=dv))


def test_visual_loss_matches_naive_random(rng):
    for _ in range(100):
        spans, head = _random_visual(rng)
        naive = naive_visual_loss([s.pooled for s in spans], [s.target for s in spans],
                                  head.W.tolist(), head.b.tolist())
        assert abs(visual_loss(spans, head) - naive) <= 1e-12 * max(1.0, naive)


def test_visual_loss_nonnegative(rng):
    for _ in range(50):
        spans, head = _random_visual(rng)
        assert visual_loss(spans, head) >= 0.0


def test_visual_grad_unit_offset():
    g = visual_loss_grad([VisualSpan(np.array([1.0, 0.0]), np.zeros(2))], ProjectionHead.identity(2))
    assert g.b.tolist() == [2.0, 0.0]


def test_visual_grad_zero_at_optimum():
    g = visual_loss_grad([VisualSpan(np.array([0.2, 0.1]), np.array([0.2, 0.1]))], ProjectionHead.identity(2))
    assert not g.W.any() and not g.b.any() and not g.pooled.any()


def _fd(f, x, h=1e-6):
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        out[idx] = (up - down) / (2 * h)
    return out


def _rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


def test_visual_grad_finite_differences(rng):
    for _ in range(10):
        spans, head = _random_visual(rng)
        W, b = head.W.copy(), head.b.copy()
        H = np.array([s.pooled for s in spans])
        V = [s.target for s in spans]
        f = lambda: visual_loss([VisualSpan(H[j], V[j]) for j in range(len(V))], ProjectionHead(W, b))  # noqa: E731
        g = visual_loss_grad(spans, head)
        assert _rel_err(g.W, _fd(f, W)) < 1e-6
        assert _rel_err(g.b, _fd(f, b)) < 1e-6
        assert _rel_err(g.pooled, _fd(f, H)) < 1e-6


def test_visual_grad_is_mean_of_per_span(rng):
    spans, head = _random_visual(rng)
    spans = spans + [VisualSpan(rng.normal(size=head.W.shape[1]), rng.normal(size=head.W.shape[0]))]
    full = visual_loss_grad(spans, head)
    parts = [visual_loss_grad([s], head) for s in spans]
    np.testing.assert_allclose(full.W, np.mean([p.W for p in parts], axis=0), atol=1e-13)
    np.testing.assert_allclose(full.b, np.mean([p.b for p in parts], axis=0), atol=1e-13)


# --- exec loss --------------------------------------------------------------------------

def test_exec_loss_examples():
    assert exec_loss(1.0, None, 2.0, "S2") == 1.1
    assert exec_loss(1.0, 1.0, None, "S3") == 2.3
    assert exec_loss(0.8125, None, None, "S1") == 0.8125
    with pytest.raises(NoComponents):
        exec_loss(None, None, None, "S1")


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.sampled_from(["S1", "S2", "S3", "S4"]))
def test_exec_loss_linear(t, l, v, sid):
    cfg = STAGES[sid]
    expect = cfg.lambda_text * t + cfg.lambda_mse * l + cfg.lambda_vis * v
    assert exec_loss(t, l, v, sid) == pytest.approx(expect, abs=1e-12)
    assert exec_loss(t, None, None, sid) == cfg.lambda_text * t


# --- checkpoint selection ---------------------------------------------------------------

def _evals(metrics, fmt=None, every=200):
    fmt = fmt or [1.0] * len(metrics)
    return [CheckpointEval((k + 1) * every, m, f) for k, (m, f) in enumerate(zip(metrics, fmt))]


def test_checkpoint_best_metric():
    best = select_checkpoint(_evals([3.0, 2.0, 2.5, 1.5, 1.8]), "S2")
    assert best.step == 800


def test_checkpoint_format_gate():
    # the lowest-loss checkpoint dropped format accuracy by more than the S1 tolerance
    ev = _evals([3.0, 2.0, 1.0], [0.99, 0.985, 0.97])
    assert select_checkpoint(ev, "S1").step == 400
    assert select_checkpoint(ev, "S2").step == 600


def test_checkpoint_patience_after_warmup():
    metrics = [5.0, 4.0] + [4.5] * 20 + [0.1]
    ev = _evals(metrics)
    # S1: stops after 6 stale evaluations past step 1200, so the late 0.1 is never seen
    assert select_checkpoint(ev, "S1").step == 400
    # without early stopping the late checkpoint would win
    assert select_checkpoint(ev[:2] + ev[-1:], "S1").metric == 0.1


def test_checkpoint_no_admissible():
    ev = [CheckpointEval(200, 1.0, 0.5)]
    assert select_checkpoint(ev, "S1", reference_format=0.9) is None


# --- token files ------------------------------------------------------------------------

def test_loss_fixture_file():
    recs = {r.id: r for r in read_loss_records(fixture_path("losses", "tokens.jsonl"))}
    out = record_losses(recs["uniform"], "S1")
    assert out["L_text"] == pytest.approx(math.log(50), rel=1e-14)
    assert out["L_vis"] is None and out["L_latent"] is None
    s2 = record_losses(recs["text_vis"], "S2")
    assert (s2["L_text"], s2["L_vis"], s2["L_exec"]) == (1.0, 2.0, 1.1)
    s3 = record_losses(recs["text_latent"], "S3")
    assert (s3["L_text"], s3["L_latent"], s3["L_exec"]) == (1.0, 1.0, 2.3)
    hs = record_losses(recs["hidden_span"], "S4")
    assert hs["L_vis"] == pytest.approx(0.5, abs=1e-15)
    vis = record_losses(recs["vis_only"], "S4")
    assert vis["L_text"] is None and vis["L_exec"] == pytest.approx(0.05 * 4.0)


def test_parse_loss_record_unknown_role():
    with pytest.raises(ValueError):
        parse_loss_record({"id": "x", "tokens": [{"role": "Q", "logp": -1.0}]})
