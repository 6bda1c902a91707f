"""Path planner: a two-hidden-layer MLP scoring each coordination path.

The network maps a feature vector to five logits; sigmoid(logit) is the
estimated success probability of the corresponding path. It is trained with a
weighted multi-label binary cross-entropy, hand-written backprop and AdamW.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .features import feature_dim
from .paths import N_PATHS, Path

log = logging.getLogger(__name__)

HIDDEN_WIDTH = 768
SINGLE_POSITIVE_WEIGHT = 3.0
DOUBLE_POSITIVE_WEIGHT = 2.0
NON_DIRECT_POSITIVE_WEIGHT = 1.3


class DimensionMismatch(ValueError):
    pass


class ZeroPositives(ValueError):
    pass


class EmptyBatch(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class AllSamplesFiltered(ValueError):
    pass


@dataclass
class PlannerModel:
    """Affine layers stored as (out, in) weight matrices and bias vectors."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def n_features(self) -> int:
        return self.weights[0].shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "PlannerModel":
        return PlannerModel([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_model(seed: int, D: int | None = None, *, n_features: int | None = None,
               hidden: int | tuple[int, ...] = HIDDEN_WIDTH) -> PlannerModel:
    """Glorot-uniform weights, zero biases. Give either the block size D or n_features."""
    if n_features is None:
        if D is None or D < 1:
            raise ValueError("D must be >= 1")
        n_features = feature_dim(D)
    widths = (hidden, hidden) if isinstance(hidden, int) else tuple(hidden)
    dims = [n_features, *widths, N_PATHS]
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return PlannerModel(weights, biases)


def _check_input(model: PlannerModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != model.n_features:
        raise DimensionMismatch(f"model expects {model.n_features} features, got {X.shape[-1]}")
    return X


def _forward_cache(model: PlannerModel, X: np.ndarray):
    acts = [X]
    h = X
    last = len(model.weights) - 1
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W.T + b
        h = z if k == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def forward(model: PlannerModel, X) -> np.ndarray:
    """Logits for one feature vector (shape (5,)) or a batch (shape (n, 5))."""
    X = _check_input(model, X)
    return _forward_cache(model, X)[-1]


def scores(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    # two-branch form avoids overflow in exp for large |t|
    e = np.exp(-np.abs(logits))
    return np.where(logits >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sample_weight(n_pos: int) -> float:
    if n_pos < 1:
        raise ZeroPositives("samples with no successful path must be filtered out")
    if n_pos == 1:
        return SINGLE_POSITIVE_WEIGHT
    if n_pos == 2:
        return DOUBLE_POSITIVE_WEIGHT
    return 1.0


def label_weight(path: Path, r_label: int) -> float:
    return NON_DIRECT_POSITIVE_WEIGHT if r_label == 1 and Path.parse(path) is not Path.A else 1.0


def sample_weights(R: np.ndarray) -> np.ndarray:
    n_pos = R.sum(axis=1)
    if np.any(n_pos < 1):
        raise ZeroPositives("batch contains samples with no successful path")
    return np.where(n_pos == 1, SINGLE_POSITIVE_WEIGHT,
                    np.where(n_pos == 2, DOUBLE_POSITIVE_WEIGHT, 1.0))


def label_weights(R: np.ndarray) -> np.ndarray:
    beta = np.ones(R.shape)
    beta[:, 1:] = np.where(R[:, 1:] == 1, NON_DIRECT_POSITIVE_WEIGHT, 1.0)
    return beta


def bce_with_logits(t, r) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.maximum(t, 0.0) - t * r + np.log1p(np.exp(-np.abs(t)))


def _batch(model, X, R):
    X = _check_input(model, np.atleast_2d(X))
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    if X.shape[0] == 0:
        raise EmptyBatch("planner loss needs a nonempty batch")
    if R.shape != (X.shape[0], N_PATHS):
        raise DimensionMismatch(f"outcomes must have shape ({X.shape[0]}, {N_PATHS})")
    return X, R


def _loss_from_logits(T, R):
    omega = sample_weights(R)
    beta = label_weights(R)
    per_sample = (beta * bce_with_logits(T, R)).mean(axis=1)
    return float(omega @ per_sample / omega.sum()), omega, beta


def planner_loss(model: PlannerModel, X, R) -> float:
    """Data term of the planner objective (weight decay excluded)."""
    X, R = _batch(model, X, R)
    return _loss_from_logits(forward(model, X), R)[0]


def planner_grad(model: PlannerModel, X, R) -> tuple[float, list[np.ndarray]]:
    """Loss and its gradient, returned in the order of ``model.params()``."""
    X, R = _batch(model, X, R)
    acts = _forward_cache(model, X)
    loss, omega, beta = _loss_from_logits(acts[-1], R)
    delta = (omega[:, None] * beta * (scores(acts[-1]) - R)) / (N_PATHS * omega.sum())
    grads: list[np.ndarray] = []
    for k in range(len(model.weights) - 1, -1, -1):
        grads.append(delta.sum(axis=0))
        grads.append(delta.T @ acts[k])
        if k:
            delta = (delta @ model.weights[k]) * (acts[k] > 0)
    grads.reverse()  # now W0, b0, W1, b1, ...
    return loss, grads


# --- training ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 256
    weight_decay: float = 5e-5
    epochs: int = 20
    seed: int = 0
    val_fraction: float = 0.1
    hidden: int = HIDDEN_WIDTH
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "epochs", "hidden"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_utility: float


@dataclass
class TrainResult:
    model: PlannerModel
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    n_filtered: int = 0
    n_train: int = 0
    n_val: int = 0


class AdamW:
    """Adam with decoupled weight decay; decay applies only to the listed parameters."""

    def __init__(self, params, lr, weight_decay, decay_mask, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.wd = lr, weight_decay
        self.decay_mask = decay_mask
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v, decay in zip(self.params, grads, self.m, self.v, self.decay_mask):
            if decay and self.wd:
                p *= 1.0 - self.lr * self.wd
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def id_fraction(seed: int, record_id: str) -> float:
    digest = hashlib.sha256(f"{seed}:{record_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2.0 ** 64


def split_by_id(ids, fraction: float, seed: int) -> np.ndarray:
    """Boolean validation mask, decided per record id."""
    return np.array([id_fraction(seed, str(i)) < fraction for i in ids], dtype=bool)


def filter_all_fail(X, R):
    keep = np.asarray(R).sum(axis=1) > 0
    return X[keep], R[keep], int((~keep).sum())


def validation_utility(model: PlannerModel, X, R) -> float:
    """Fraction of records whose highest-scoring path succeeds."""
    R = np.atleast_2d(np.asarray(R))
    if len(R) == 0:
        return 0.0
    choice = np.argmax(forward(model, np.atleast_2d(X)), axis=1)
    return float(R[np.arange(len(R)), choice].mean())


def train(X, R, config: TrainConfig | None = None, ids=None, val=None,
          on_epoch=None) -> TrainResult:
    """Fit a planner; returns the epoch checkpoint with the best validation utility.

    ``val`` is an explicit (X_val, R_val) pair. Without it a validation split is
    drawn by hashing ``ids`` (or row indices) with the config seed.
    All-fail samples are dropped from the training portion only.
    ``on_epoch(stats, model)`` is called after every epoch with the live model.
    """
    cfg = config or TrainConfig()
    X = np.asarray(X, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if len(X) == 0:
        raise EmptyDataset("no training records")
    if val is None:
        ids = range(len(X)) if ids is None else ids
        mask = split_by_id(ids, cfg.val_fraction, cfg.seed)
        Xv, Rv = X[mask], R[mask]
        X, R = X[~mask], R[~mask]
    else:
        Xv, Rv = (np.asarray(a, dtype=np.float64) for a in val)
    X, R, n_filtered = filter_all_fail(X, R)
    if len(X) == 0:
        raise AllSamplesFiltered("every training sample has all paths failing")
    log.info("training planner on %d samples (%d all-fail removed), %d validation",
             len(X), n_filtered, len(Xv))

    model = init_model(cfg.seed, n_features=X.shape[1], hidden=cfg.hidden)
    params = model.params()
    opt = AdamW(params, cfg.learning_rate, cfg.weight_decay,
                decay_mask=[p.ndim == 2 for p in params],
                beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])

    result = TrainResult(model.copy(), n_filtered=n_filtered, n_train=len(X), n_val=len(Xv))
    best = -1.0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(X))
        loss_sum = 0.0
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = planner_grad(model, X[idx], R[idx])
            opt.step(grads)
            loss_sum += loss * len(idx)
        util = validation_utility(model, Xv, Rv) if len(Xv) else float("nan")
        result.history.append(EpochStats(epoch, loss_sum / len(X), util))
        log.debug("epoch %d loss %.5f val %.4f", epoch, loss_sum / len(X), util)
        if on_epoch is not None:
            on_epoch(result.history[-1], model)
        # NaN utility (no validation data) keeps the first epoch; ties keep the earliest
        if util > best or epoch == 1:
            best = util if not math.isnan(util) else best
            result.model = model.copy()
            result.best_epoch = epoch
    return result


# --- serialisation ----------------------------------------------------------------

FORMAT_NAME = "pathroute-planner"


def model_to_json(model: PlannerModel) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": 1,
        "layers": [
            {"in": W.shape[1], "out": W.shape[0],
             "weight": W.ravel().tolist(), "bias": b.tolist()}
            for W, b in zip(model.weights, model.biases)
        ],
    }


def model_from_json(obj: dict) -> PlannerModel:
    if obj.get("format") != FORMAT_NAME:
        raise ValueError("not a planner model file")
    layers = obj.get("layers") or []
    if not layers:
        raise ValueError("model file has no layers")
    weights, biases = [], []
    prev = None
    for layer in layers:
        n_in, n_out = int(layer["in"]), int(layer["out"])
        if prev is not None and n_in != prev:
            raise DimensionMismatch(f"layer input {n_in} does not match previous output {prev}")
        W = np.asarray(layer["weight"], dtype=np.float64)
        b = np.asarray(layer["bias"], dtype=np.float64)
        if W.size != n_in * n_out or b.shape != (n_out,):
            raise DimensionMismatch("parameter array size does not match layer header")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("model parameters must be finite")
        weights.append(W.reshape(n_out, n_in))
        biases.append(b)
        prev = n_out
    if prev != N_PATHS:
        raise DimensionMismatch(f"output dimension must be {N_PATHS}, got {prev}")
    return PlannerModel(weights, biases)


def save_model(model: PlannerModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_json(model), fh)


def load_model(path) -> PlannerModel:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: malformed model file ({exc})") from None
    return model_from_json(obj)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
