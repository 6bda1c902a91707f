"""Executor loss kernels: role-weighted text loss, visual-thought alignment, stage mixing.

All arithmetic is float64. Token log-probabilities and hidden states are supplied
by the caller; nothing here runs a model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .paths import Role


class AllZeroWeights(ValueError):
    pass


class EmptySpan(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class NoComponents(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    stage_id: str
    w_thought: float
    w_answer: float
    lambda_text: float
    lambda_mse: float
    lambda_vis: float
    # checkpoint gating
    format_tolerance: float = 0.03
    patience: int = 8
    warmup_steps: int = 1600
    eval_every: int = 200
    learning_rate: float = 3e-6


STAGES: dict[str, StageConfig] = {
    "S1": StageConfig("S1", 0.5, 4.0, 1.0, 0.0, 0.0,
                      format_tolerance=0.01, patience=6, warmup_steps=1200, learning_rate=3e-6),
    "S2": StageConfig("S2", 0.25, 6.0, 1.0, 0.0, 0.05, learning_rate=4e-6),
    # every non-context token weighs 1 from here on; lambda_text scales the text term
    "S3": StageConfig("S3", 1.0, 1.0, 2.0, 0.3, 0.0),
    "S4": StageConfig("S4", 1.0, 1.0, 2.0, 0.3, 0.05),
}


def stage(name: str | StageConfig) -> StageConfig:
    if isinstance(name, StageConfig):
        return name
    try:
        return STAGES[name]
    except KeyError:
        raise ValueError(f"unknown stage {name!r}; expected one of {sorted(STAGES)}") from None


@dataclass(frozen=True)
class TokenStream:
    """Per-token target log-probs with role tags; a tag of None marks prompt/context."""

    logp: np.ndarray
    roles: tuple[Role | None, ...]

    def __post_init__(self):
        logp = np.asarray(self.logp, dtype=np.float64)
        object.__setattr__(self, "logp", logp)
        if logp.ndim != 1 or len(logp) < 1:
            raise ValueError("token stream needs at least one token")
        if len(self.roles) != len(logp):
            raise DimensionMismatch(f"{len(logp)} log-probs but {len(self.roles)} role tags")
        if np.any(logp > 0):
            raise ValueError("log-probabilities must be <= 0")


@dataclass(frozen=True)
class VisualSpan:
    pooled: np.ndarray
    target: np.ndarray

    @classmethod
    def from_hidden(cls, hidden, target) -> "VisualSpan":
        return cls(pool_span(hidden), np.asarray(target, dtype=np.float64))


@dataclass(frozen=True)
class ProjectionHead:
    W: np.ndarray  # (d_v, d_h)
    b: np.ndarray  # (d_v,)

    @classmethod
    def identity(cls, d: int) -> "ProjectionHead":
        return cls(np.eye(d), np.zeros(d))


def build_loss_mask(stream: TokenStream, stage_cfg: StageConfig | str) -> np.ndarray:
    cfg = stage(stage_cfg)
    w = np.empty(len(stream.roles))
    for t, role in enumerate(stream.roles):
        if role is None:
            w[t] = 0.0
        elif role is Role.ANSWER:
            w[t] = cfg.w_answer
        else:
            w[t] = cfg.w_thought
    return w


def text_loss(stream: TokenStream, w) -> float:
    """Weighted mean negative log-likelihood, normalised by the total weight."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != stream.logp.shape:
        raise DimensionMismatch(f"weights {w.shape} vs tokens {stream.logp.shape}")
    total = w.sum()
    if total <= 0:
        raise AllZeroWeights("loss weights sum to zero")
    return float(-(w @ stream.logp) / total)


def pool_span(hidden) -> np.ndarray:
    hidden = np.atleast_2d(np.asarray(hidden, dtype=np.float64))
    if hidden.shape[0] == 0 or hidden.size == 0:
        raise EmptySpan("visual-thought span has no tokens")
    return hidden.mean(axis=0)


def _stack(spans: Sequence[VisualSpan], head: ProjectionHead):
    if not spans:
        raise EmptySpan("need at least one visual-thought span")
    W = np.asarray(head.W, dtype=np.float64)
    b = np.asarray(head.b, dtype=np.float64)
    d_v, d_h = W.shape
    if b.shape != (d_v,):
        raise DimensionMismatch(f"head bias {b.shape} does not match W {W.shape}")
    Hb = np.array([np.asarray(s.pooled, dtype=np.float64) for s in spans])
    V = np.array([np.asarray(s.target, dtype=np.float64) for s in spans])
    if Hb.ndim != 2 or Hb.shape[1] != d_h:
        raise DimensionMismatch(f"pooled states must have dim {d_h}")
    if V.ndim != 2 or V.shape[1] != d_v:
        raise DimensionMismatch(f"targets must have dim {d_v}")
    return W, b, Hb, V


def visual_loss(spans: Sequence[VisualSpan], head: ProjectionHead) -> float:
    W, b, Hb, V = _stack(spans, head)
    resid = Hb @ W.T + b - V
    return float(np.mean(np.sum(resid * resid, axis=1)))


@dataclass(frozen=True)
class VisualGrad:
    W: np.ndarray
    b: np.ndarray
    pooled: np.ndarray  # (J, d_h), one row per span


def visual_loss_grad(spans: Sequence[VisualSpan], head: ProjectionHead) -> VisualGrad:
    W, b, Hb, V = _stack(spans, head)
    J = len(spans)
    resid = Hb @ W.T + b - V  # (J, d_v)
    g = 2.0 * resid / J
    return VisualGrad(W=g.T @ Hb, b=g.sum(axis=0), pooled=g @ W)


def exec_loss(text: float | None = None, latent: float | None = None,
              visual: float | None = None, stage_cfg: StageConfig | str = "S1") -> float:
    """Stage-weighted sum of the executor losses; absent terms contribute nothing."""
    cfg = stage(stage_cfg)
    if text is None and latent is None and visual is None:
        raise NoComponents("exec_loss needs at least one component")
    total = 0.0
    if text is not None:
        total += cfg.lambda_text * text
    if latent is not None:
        total += cfg.lambda_mse * latent
    if visual is not None:
        total += cfg.lambda_vis * visual
    return total


# --- stage checkpoint selection -------------------------------------------------

@dataclass(frozen=True)
class CheckpointEval:
    step: int
    metric: float
    format_acc: float


def select_checkpoint(evals: Sequence[CheckpointEval], stage_cfg: StageConfig | str,
                      reference_format: float | None = None,
                      higher_is_better: bool = False) -> CheckpointEval | None:
    """Best checkpoint whose format accuracy stays within the stage tolerance.

    ``reference_format`` defaults to the first evaluation's format accuracy.
    Evaluation stops early once ``patience`` consecutive evaluations after the
    warmup fail to improve; later checkpoints are never considered. Returns None
    if every checkpoint violates the format gate.
    """
    cfg = stage(stage_cfg)
    if not evals:
        return None
    evals = sorted(evals, key=lambda e: e.step)
    ref = evals[0].format_acc if reference_format is None else reference_format
    sign = -1.0 if higher_is_better else 1.0
    best, stale = None, 0
    for e in evals:
        admissible = e.format_acc >= ref - cfg.format_tolerance - 1e-12
        if admissible and (best is None or sign * e.metric < sign * best.metric):
            best, stale = e, 0
        elif e.step >= cfg.warmup_steps:
            stale += 1
            if stale >= cfg.patience:
                break
    return best


# --- trajectory token files -----------------------------------------------------

_ROLE_TAGS = {"ctx": None, "context": None, **{r.value: r for r in Role}}


@dataclass
class LossRecord:
    id: str
    stream: TokenStream | None
    spans: list[VisualSpan]
    latent: float | None


def parse_loss_record(obj: dict) -> LossRecord:
    tokens = obj.get("tokens") or []
    stream = None
    if tokens:
        try:
            roles = tuple(_ROLE_TAGS[t["role"]] for t in tokens)
        except KeyError as exc:
            raise ValueError(f"record {obj.get('id')!r}: unknown role tag {exc}") from None
        stream = TokenStream(np.array([t["logp"] for t in tokens], dtype=np.float64), roles)
    spans = []
    for s in obj.get("spans") or []:
        if "pooled" in s:
            spans.append(VisualSpan(np.asarray(s["pooled"], dtype=np.float64),
                                    np.asarray(s["target"], dtype=np.float64)))
        else:
            spans.append(VisualSpan.from_hidden(s["hidden"], s["target"]))
    latent = obj.get("latent")
    return LossRecord(str(obj["id"]), stream, spans, None if latent is None else float(latent))


def read_loss_records(path) -> Iterator[LossRecord]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield parse_loss_record(json.loads(line))


def record_losses(rec: LossRecord, stage_cfg: StageConfig | str,
                  head: ProjectionHead | None = None) -> dict:
    cfg = stage(stage_cfg)
    l_text = l_vis = None
    if rec.stream is not None:
        l_text = text_loss(rec.stream, build_loss_mask(rec.stream, cfg))
    if rec.spans:
        if head is None:
            head = ProjectionHead.identity(len(rec.spans[0].pooled))
        l_vis = visual_loss(rec.spans, head)
    return {
        "id": rec.id,
        "L_text": l_text,
        "L_vis": l_vis,
        "L_latent": rec.latent,
        "L_exec": exec_loss(l_text, rec.latent, l_vis, cfg),
    }
