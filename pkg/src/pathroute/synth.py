"""Synthetic path-outcome corpora with controllable coordination-path diversity.

Generative model per record of a domain:

* bucket ~ the domain's bucket mixture; query = a filled bucket template
* success probabilities q = the bucket's override if it has one, else the domain's
* r_p = 1[sqrt(rho) z0 + sqrt(1 - rho) e_p < Phi^-1(q_p)] with z0, e_p ~ N(0, 1),
  i.e. a one-factor Gaussian copula over Bernoulli(q_p) margins
* features = domain mean + signal * sum_p r_p u_p + noise * N(0, I)
* tokens_p = max(1, Poisson(token_mean_p))

Everything is drawn from generators keyed on (seed, domain index), so a
config plus seed always reproduces the same corpus.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import integrate, optimize, stats

from .audit import AuditItem
from .features import block_slice, feature_dim
from .paths import N_PATHS, PATHS, Path, Segment, render_trajectory
from .records import PathOutcomeRecord

DEFAULT_TOKEN_MEANS = (1.2, 74.9, 231.4, 291.5, 295.7)
DEFAULT_RHO = 0.3
DEFAULT_BLOCK_DIM = 8
PRESETS = ("diversity", "homogeneous", "domain-shift")

_OBJECTS = ("dogs", "bicycles", "lamps", "trees", "cups", "books", "birds", "chairs")
_LETTERS = ("A", "B", "C", "D")

SIMPLE_TEMPLATES = (
    "How many {obj} are in the image?",
    "Are there any {obj} on the left side? Answer yes or no.",
    "True or false: the {obj} are red.",
)
STRUCTURED_TEMPLATES = (
    "In the triangle shown, what is the measure of angle {letter}?",
    "According to the bar chart, which group of {obj} is largest?",
    "What is the perimeter of the shape drawn next to the {obj}?",
)
OPEN_TEMPLATES = (
    "Which option best describes the {obj} in this scene?",
    "What is the most likely reason the {obj} look this way?",
    "Which statement about the {obj} is supported by the image?",
)


class InvalidConfig(ValueError):
    pass


@dataclass(frozen=True)
class BucketSpec:
    bucket_id: str
    weight: float
    templates: tuple[str, ...]
    q: tuple[float, ...] | None = None


def default_buckets() -> tuple[BucketSpec, ...]:
    return (
        BucketSpec("simple", 1.0, SIMPLE_TEMPLATES),
        BucketSpec("structured", 1.0, STRUCTURED_TEMPLATES),
        BucketSpec("default", 1.0, OPEN_TEMPLATES),
    )


@dataclass
class DomainSpec:
    domain_id: str
    q: tuple[float, ...]
    mean: np.ndarray
    directions: np.ndarray  # (5, F)
    signal: float = 1.0
    noise: float = 1.0
    buckets: tuple[BucketSpec, ...] = field(default_factory=default_buckets)
    split: str = "train"

    def __post_init__(self):
        self.q = tuple(float(v) for v in self.q)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.directions = np.asarray(self.directions, dtype=np.float64)


@dataclass
class SynthConfig:
    domains: list[DomainSpec]
    records_per_domain: int = 1000
    token_means: tuple[float, ...] = DEFAULT_TOKEN_MEANS
    rho: float = DEFAULT_RHO
    seed: int = 0
    name: str = "custom"

    @property
    def n_features(self) -> int:
        return len(self.domains[0].mean)


def validate_config(cfg: SynthConfig) -> None:
    if not cfg.domains:
        raise InvalidConfig("config needs at least one domain")
    if cfg.records_per_domain < 0:
        raise InvalidConfig("records_per_domain must be nonnegative")
    if not 0.0 <= cfg.rho <= 1.0:
        raise InvalidConfig(f"rho={cfg.rho} unsupported: the one-factor copula needs 0 <= rho <= 1")
    if len(cfg.token_means) != N_PATHS or any(not m >= 1 for m in cfg.token_means):
        raise InvalidConfig("token_means needs 5 values >= 1 (counts are clamped at 1)")
    F = cfg.n_features
    ids = set()
    for d in cfg.domains:
        if d.domain_id in ids:
            raise InvalidConfig(f"duplicate domain id {d.domain_id!r}")
        ids.add(d.domain_id)
        qs = [d.q] + [b.q for b in d.buckets if b.q is not None]
        for q in qs:
            if len(q) != N_PATHS or any(not 0.0 <= v <= 1.0 for v in q):
                raise InvalidConfig(f"domain {d.domain_id!r}: success probabilities must be 5 values in [0, 1]")
        if d.mean.shape != (F,) or d.directions.shape != (N_PATHS, F):
            raise InvalidConfig(f"domain {d.domain_id!r}: feature model must be {F}-dimensional")
        if not d.noise > 0:
            raise InvalidConfig(f"domain {d.domain_id!r}: noise scale must be positive")
        if d.signal < 0:
            raise InvalidConfig(f"domain {d.domain_id!r}: signal strength must be nonnegative")
        if not d.buckets or any(b.weight < 0 for b in d.buckets) or sum(b.weight for b in d.buckets) <= 0:
            raise InvalidConfig(f"domain {d.domain_id!r}: bucket weights must be nonnegative, not all zero")
        if any(not b.templates for b in d.buckets):
            raise InvalidConfig(f"domain {d.domain_id!r}: every bucket needs a query template")


def path_directions(D: int, rng: np.random.Generator) -> np.ndarray:
    """Unit signal direction per path, living in that path's two text blocks."""
    F = feature_dim(D)
    U = np.zeros((N_PATHS, F))
    for p in PATHS:
        v = rng.normal(size=2 * D)
        U[p.index, block_slice(D, p, "last")] = v[:D]
        U[p.index, block_slice(D, p, "mean")] = v[D:]
        U[p.index] /= np.linalg.norm(U[p.index])
    return U


def clamped_poisson_rate(mean: float) -> float:
    """Rate lam with E[max(X, 1)] = mean for X ~ Poisson(lam).

    E[max(X, 1)] = lam + exp(-lam), increasing in lam, so the root is unique.
    """
    if mean < 1:
        raise InvalidConfig(f"token mean {mean} < 1 is unreachable with counts clamped at 1")
    if mean == 1:
        return 0.0
    return optimize.brentq(lambda lam: lam + math.exp(-lam) - mean, 0.0, mean, xtol=1e-14, rtol=1e-15)


def draw_tokens(means, size, rng: np.random.Generator) -> np.ndarray:
    """Poisson token counts clamped at 1, with rates corrected so the means are preserved."""
    rates = np.array([clamped_poisson_rate(m) for m in np.atleast_1d(means)])
    if np.ndim(means) == 0:
        rates = rates[0]
    return np.maximum(rng.poisson(rates, size=size), 1)


def _fill(template: str, rng: np.random.Generator) -> str:
    return template.format(obj=_OBJECTS[rng.integers(len(_OBJECTS))],
                           letter=_LETTERS[rng.integers(len(_LETTERS))])


def _draw_outcomes(Q: np.ndarray, rho: float, rng: np.random.Generator) -> np.ndarray:
    n = len(Q)
    z0 = rng.standard_normal(n)
    eps = rng.standard_normal((n, N_PATHS))
    z = math.sqrt(rho) * z0[:, None] + math.sqrt(1.0 - rho) * eps
    with np.errstate(divide="ignore"):
        thresholds = stats.norm.ppf(Q)
    return (z < thresholds).astype(int)


def generate(cfg: SynthConfig) -> list[PathOutcomeRecord]:
    validate_config(cfg)
    records = []
    means = np.asarray(cfg.token_means, dtype=np.float64)
    for k, dom in enumerate(cfg.domains):
        n = cfg.records_per_domain
        rng = np.random.default_rng([cfg.seed, k])
        w = np.array([b.weight for b in dom.buckets], dtype=np.float64)
        which = rng.choice(len(dom.buckets), size=n, p=w / w.sum())
        Q = np.array([dom.buckets[b].q or dom.q for b in which], dtype=np.float64).reshape(n, N_PATHS)
        R = _draw_outcomes(Q, cfg.rho, rng)
        X = (dom.mean + dom.signal * (R @ dom.directions)
             + dom.noise * rng.standard_normal((n, len(dom.mean))))
        T = draw_tokens(means, (n, N_PATHS), rng)
        for i in range(n):
            bucket = dom.buckets[which[i]]
            query = _fill(bucket.templates[rng.integers(len(bucket.templates))], rng)
            records.append(PathOutcomeRecord(
                id=f"{dom.domain_id}-{i:06d}",
                dataset=dom.domain_id,
                outcomes=tuple(R[i]),
                tokens=tuple(T[i]),
                query=query,
                bucket=bucket.bucket_id,
                features=X[i],
            ))
    return records


# --- closed forms -----------------------------------------------------------------

def pattern_probabilities(q: Sequence[float], rho: float) -> dict[tuple[int, ...], float]:
    """Probability of each of the 2^5 success patterns under the copula model."""
    q = np.asarray(q, dtype=np.float64)
    if not 0.0 <= rho <= 1.0:
        raise InvalidConfig(f"rho={rho} outside the supported range [0, 1]")
    patterns = list(itertools.product((0, 1), repeat=len(q)))
    if rho == 0.0:
        return {pat: float(np.prod(np.where(np.array(pat) == 1, q, 1.0 - q))) for pat in patterns}
    with np.errstate(divide="ignore"):
        t = stats.norm.ppf(q)
    if rho == 1.0:
        # every path sees the same latent: success set is {p : z0 < t_p}
        cuts = np.unique(np.concatenate([[-np.inf, np.inf], t]))
        out = dict.fromkeys(patterns, 0.0)
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            mass = stats.norm.cdf(hi) - stats.norm.cdf(lo)
            if mass > 0:
                out[tuple(int(lo < tp) for tp in t)] += float(mass)
        return out
    a, b = math.sqrt(rho), math.sqrt(1.0 - rho)

    def density(z0, pat):
        p1 = stats.norm.cdf((t - a * z0) / b)
        return stats.norm.pdf(z0) * np.prod(np.where(np.array(pat) == 1, p1, 1.0 - p1))

    return {pat: integrate.quad(density, -np.inf, np.inf, args=(pat,),
                                epsabs=1e-13, epsrel=1e-11, limit=200)[0]
            for pat in patterns}


def all_fail_probability(q: Sequence[float], rho: float) -> float:
    """P(no path succeeds); the all-zero entry of ``pattern_probabilities`` in one integral."""
    q = np.asarray(q, dtype=np.float64)
    if not 0.0 <= rho <= 1.0:
        raise InvalidConfig(f"rho={rho} outside the supported range [0, 1]")
    if rho == 0.0:
        return float(np.prod(1.0 - q))
    if rho == 1.0:
        return float(1.0 - q.max())
    with np.errstate(divide="ignore"):
        t = stats.norm.ppf(q)
    a, b = math.sqrt(rho), math.sqrt(1.0 - rho)

    def density(z0):
        return stats.norm.pdf(z0) * np.prod(stats.norm.sf((t - a * z0) / b))

    return integrate.quad(density, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-11, limit=200)[0]


def _cells(cfg: SynthConfig, split: str | None = None):
    """(weight, q) mixture cells over domains and buckets."""
    doms = [d for d in cfg.domains if split is None or d.split == split]
    if not doms:
        raise InvalidConfig(f"no domains in split {split!r}")
    for d in doms:
        w = np.array([b.weight for b in d.buckets], dtype=np.float64)
        w = w / w.sum()
        for wb, b in zip(w, d.buckets):
            yield wb / len(doms), b.q or d.q


def expected_oracle(cfg: SynthConfig, split: str | None = None) -> float:
    """Expected fraction of records with at least one successful path."""
    validate_config(cfg)
    total = 0.0
    for w, q in _cells(cfg, split):
        total += w * (1.0 - all_fail_probability(q, cfg.rho))
    return total


def expected_fixed(cfg: SynthConfig, split: str | None = None) -> np.ndarray:
    """Expected accuracy of each fixed path (mixture of the success probabilities)."""
    validate_config(cfg)
    acc = np.zeros(N_PATHS)
    for w, q in _cells(cfg, split):
        acc += w * np.asarray(q)
    return acc


def oracle_variance(cfg: SynthConfig, split: str | None = None) -> float:
    """Per-record variance of the any-success indicator (Bernoulli mixture)."""
    p = expected_oracle(cfg, split)
    return p * (1.0 - p)


# --- presets ----------------------------------------------------------------------

def _domain(domain_id, q, D, rng, directions, signal, noise, mean_scale=1.0,
            buckets=None, split="train"):
    return DomainSpec(domain_id, q, mean_scale * rng.normal(size=feature_dim(D)), directions,
                      signal, noise, buckets or default_buckets(), split)


def preset(name: str, seed: int = 0, records_per_domain: int | None = None,
           D: int = DEFAULT_BLOCK_DIM) -> SynthConfig:
    """Named scenario configs.

    diversity     five domains, each favouring a different path (0.8 vs 0.35)
    homogeneous   one domain with nearly equal path success rates
    domain-shift  three training domains plus a held-out test domain whose path
                  affinities are permuted and whose feature mean is shifted; the
                  simple/structured buckets carry domain-independent path preferences
    """
    if name not in PRESETS:
        raise InvalidConfig(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")
    rng = np.random.default_rng([seed, 7919])
    U = path_directions(D, rng)

    if name == "diversity":
        domains = []
        for p in PATHS:
            q = tuple(0.8 if k == p.index else 0.35 for k in range(N_PATHS))
            domains.append(_domain(f"div-{p.name}", q, D, rng, U, signal=2.0, noise=0.5))
        return SynthConfig(domains, records_per_domain or 4400, seed=seed, name=name)

    if name == "homogeneous":
        dom = _domain("homog", (0.65, 0.65, 0.68, 0.70, 0.66), D, rng, U, signal=1.0, noise=1.0)
        return SynthConfig([dom], records_per_domain or 5000, seed=seed, name=name)

    buckets = lambda q: (  # noqa: E731
        BucketSpec("simple", 1.0, SIMPLE_TEMPLATES, (0.85, 0.75, 0.55, 0.40, 0.40)),
        BucketSpec("structured", 1.0, STRUCTURED_TEMPLATES, (0.25, 0.30, 0.50, 0.75, 0.55)),
        BucketSpec("default", 1.0, OPEN_TEMPLATES, q),
    )
    train_q = [
        (0.35, 0.70, 0.45, 0.35, 0.35),
        (0.35, 0.40, 0.70, 0.40, 0.35),
        (0.30, 0.35, 0.40, 0.40, 0.70),
    ]
    test_q = (0.70, 0.35, 0.35, 0.45, 0.35)
    domains = [_domain(f"train-{k}", q, D, rng, U, signal=1.5, noise=1.0, buckets=buckets(q))
               for k, q in enumerate(train_q)]
    domains.append(_domain("shift", test_q, D, rng, U, signal=1.5, noise=1.0, mean_scale=1.25,
                           buckets=buckets(test_q), split="test"))
    return SynthConfig(domains, records_per_domain or 3000, seed=seed, name=name)


def config_to_json(cfg: SynthConfig) -> dict:
    return {
        "name": cfg.name,
        "seed": cfg.seed,
        "records_per_domain": cfg.records_per_domain,
        "token_means": list(cfg.token_means),
        "rho": cfg.rho,
        "domains": [
            {
                "domain_id": d.domain_id,
                "split": d.split,
                "q": list(d.q),
                "signal": d.signal,
                "noise": d.noise,
                "mean": d.mean.tolist(),
                "directions": d.directions.tolist(),
                "buckets": [
                    {"bucket_id": b.bucket_id, "weight": b.weight, "templates": list(b.templates),
                     **({"q": list(b.q)} if b.q is not None else {})}
                    for b in d.buckets
                ],
            }
            for d in cfg.domains
        ],
        "generator": "one-factor gaussian copula outcomes, linear path-signal features, "
                     "poisson token counts clamped at 1 with mean-preserving rates (synthetic, not measured data)",
    }


def config_from_json(obj: dict) -> SynthConfig:
    try:
        domains = [
            DomainSpec(
                d["domain_id"], tuple(d["q"]), d["mean"], d["directions"],
                float(d.get("signal", 1.0)), float(d.get("noise", 1.0)),
                tuple(BucketSpec(b["bucket_id"], float(b.get("weight", 1.0)), tuple(b["templates"]),
                                 tuple(b["q"]) if b.get("q") is not None else None)
                      for b in d["buckets"]) if d.get("buckets") else default_buckets(),
                d.get("split", "train"),
            )
            for d in obj["domains"]
        ]
        cfg = SynthConfig(domains, int(obj.get("records_per_domain", 1000)),
                          tuple(obj.get("token_means", DEFAULT_TOKEN_MEANS)),
                          float(obj.get("rho", DEFAULT_RHO)), int(obj.get("seed", 0)),
                          obj.get("name", "custom"))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidConfig(f"malformed synth config: {exc}") from None
    validate_config(cfg)
    return cfg


def load_config(path) -> SynthConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            return config_from_json(json.load(fh))
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: {exc}") from None


def with_overrides(cfg: SynthConfig, **kw) -> SynthConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})


# --- audit corpora ------------------------------------------------------------------

@dataclass(frozen=True)
class AuditCorruption:
    """Which items of each path were corrupted (indices into that path's block)."""

    header: dict[Path, tuple[int, ...]]
    nonstrict: dict[Path, tuple[int, ...]]


def _canonical_output(path: Path, letter: str, rng: np.random.Generator) -> str:
    if path is Path.A:
        return letter
    texts = {
        "U": "The image shows a labelled diagram and asks which option matches it.",
        "R": f"Comparing the options against the diagram, only option {letter} is consistent.",
        "C": "Draw the auxiliary line that splits the figure into two congruent parts.",
        "H": "Candidate states: the part is rotated left, or the part is rotated right.",
    }
    segs = [Segment(role, letter if role.value == "A" else texts[role.value])
            for role in path.role_sequence]
    return render_trajectory(segs, path)


def generate_audit_corpus(n_per_path: int = 900, header_rate: float = 0.02,
                          nonstrict_rate: float = 0.01, seed: int = 0,
                          token_means: Sequence[float] = DEFAULT_TOKEN_MEANS
                          ) -> tuple[list[AuditItem], AuditCorruption]:
    """Fixed-path outputs with an exact, seeded number of format defects per path.

    ``round(header_rate * n)`` outputs per templated path lose their
    ``Understanding:`` header (a colon becomes a dash), and
    ``round(nonstrict_rate * n)`` outputs per path wrap the answer letter in a
    sentence. Direct answers have no headers to corrupt.
    """
    rng = np.random.default_rng([seed, 2])
    n_header = round(header_rate * n_per_path)
    n_nonstrict = round(nonstrict_rate * n_per_path)
    items, header, nonstrict = [], {}, {}
    for p in PATHS:
        hdr = () if p is Path.A else tuple(sorted(rng.choice(n_per_path, n_header, replace=False).tolist()))
        ns = tuple(sorted(rng.choice(n_per_path, n_nonstrict, replace=False).tolist()))
        header[p], nonstrict[p] = hdr, ns
        hdr_set, ns_set = set(hdr), set(ns)
        correct = rng.random(n_per_path) < 0.5
        toks = draw_tokens(token_means[p.index], n_per_path, rng)
        for i in range(n_per_path):
            letter = _LETTERS[rng.integers(len(_LETTERS))]
            out = _canonical_output(p, letter, rng)
            if i in ns_set:
                if p is Path.A:
                    out = f"The answer is {letter}."
                else:
                    out = out.replace(f"Answer:\n{letter}\n", f"Answer:\nThe answer is {letter}.\n")
            if i in hdr_set:
                out = out.replace("Understanding:\n", "Understanding -\n", 1)
            items.append(AuditItem(f"{p.value}-{i:05d}", p, out, int(toks[i]), int(correct[i])))
    return items, AuditCorruption(header, nonstrict)
