"""Density ratios over W, importance-weighted risks and generalization bound evaluators."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from .learners import Head, Loss, Predictor, TrainConfig, fit, per_example_loss

log = logging.getLogger(__name__)

DEFAULT_CLIP_MAX = 50.0


class OverlapViolation(ValueError):
    """The target puts mass where the source has none."""


class RatioMethod(str, Enum):
    EXACT_DISCRETE = "exact_discrete"
    CLASSIFIER = "classifier"


def encode_w(w: np.ndarray) -> np.ndarray:
    """Integer key per PI value: indices pass through, binary rows are bit-packed."""
    w = np.asarray(w)
    if w.ndim == 1:
        return w.astype(np.int64)
    if w.ndim == 2 and np.all((w == 0) | (w == 1)):
        return (w.astype(np.int64) << np.arange(w.shape[1], dtype=np.int64)).sum(axis=1)
    raise ValueError("discrete ratios need integer indices or binary vectors")


def _classifier_features(w: np.ndarray, card: int | None) -> np.ndarray:
    w = np.asarray(w)
    if w.ndim == 1:
        if card is None:
            raise ValueError("integer-coded W needs its cardinality for one-hot features")
        return np.eye(card)[w.astype(int)]
    return w.reshape(len(w), -1).astype(float)


@dataclass
class DensityRatioModel:
    """Estimate of ``rho(w) = T(w) / S(w)``.

    ``table`` maps integer keys (see :func:`encode_w`) to ratios for the
    discrete kind; the classifier kind holds a two-class domain classifier
    (class 1 = target) and the prior correction ``n_S / n_T``.
    """

    kind: RatioMethod
    table: dict[int, float] = field(default_factory=dict)
    default: float = 0.0
    classifier: Predictor | None = None
    prior_correction: float = 1.0
    card: int | None = None
    clip_max: float = DEFAULT_CLIP_MAX

    def __post_init__(self) -> None:
        self.kind = RatioMethod(self.kind)
        if self.clip_max <= 0:
            raise ValueError("clip_max must be positive")
        if any(v < 0 for v in self.table.values()) or self.default < 0:
            raise ValueError("ratio table entries must be non-negative")
        if self.kind is RatioMethod.CLASSIFIER and self.classifier is None:
            raise ValueError("classifier-based ratios need a classifier")

    @classmethod
    def from_table(cls, ratios, clip_max: float = np.inf) -> "DensityRatioModel":
        """Exact ratios indexed by integer w; no clipping unless requested."""
        table = {i: float(r) for i, r in enumerate(np.asarray(ratios, dtype=float))}
        return cls(RatioMethod.EXACT_DISCRETE, table=table, clip_max=clip_max)

    def raw(self, w: np.ndarray) -> np.ndarray:
        if self.kind is RatioMethod.EXACT_DISCRETE:
            return np.array([self.table.get(int(k), self.default) for k in encode_w(w)], dtype=float)
        prob = self.classifier.predict(_classifier_features(w, self.card))
        return prob[:, 1] / np.maximum(prob[:, 0], 1e-300) * self.prior_correction

    def __call__(self, w: np.ndarray) -> np.ndarray:
        r = self.raw(w)
        clipped = r > self.clip_max
        if np.any(clipped):
            log.info("density ratio clipped at %g on %d of %d values", self.clip_max, int(clipped.sum()), len(r))
        return np.minimum(r, self.clip_max)


def estimate_density_ratio(source_w: np.ndarray, target_w: np.ndarray,
                           method: RatioMethod | str = RatioMethod.EXACT_DISCRETE,
                           cfg: TrainConfig | None = None, card: int | None = None,
                           smoothing: bool = True, clip_max: float = DEFAULT_CLIP_MAX,
                           hidden: int | None = None) -> DensityRatioModel:
    """Fit ``rho`` from samples of W in each domain.

    The discrete estimate divides add-one-smoothed frequency tables over the
    union of observed values (or ``range(card)`` for integer W).  The
    classifier estimate trains a domain classifier and corrects for the
    sample-size imbalance.
    """
    method = RatioMethod(method)
    if len(source_w) == 0 or len(target_w) == 0:
        raise ValueError("both samples must be nonempty")
    n_s, n_t = len(source_w), len(target_w)
    if method is RatioMethod.EXACT_DISCRETE:
        ks, kt = encode_w(source_w), encode_w(target_w)
        support = np.union1d(ks, kt)
        if card is not None and np.asarray(source_w).ndim == 1:
            support = np.union1d(support, np.arange(card))
        cs = {int(k): 0 for k in support}
        ct = dict(cs)
        for k in ks:
            cs[int(k)] += 1
        for k in kt:
            ct[int(k)] += 1
        a = 1.0 if smoothing else 0.0
        size = len(support)
        table = {}
        for k in cs:
            if cs[k] == 0 and not smoothing:
                if ct[k] > 0:
                    raise OverlapViolation(f"w={k} appears in the target sample but never in the source")
                table[k] = 0.0
                continue
            table[k] = ((ct[k] + a) / (n_t + a * size)) / ((cs[k] + a) / (n_s + a * size))
        # unseen values get the smoothed ratio of empty counts
        default = (1.0 / (n_t + size)) / (1.0 / (n_s + size)) if smoothing else 0.0
        return DensityRatioModel(method, table=table, default=default, clip_max=clip_max, card=card)

    fs = _classifier_features(source_w, card)
    ft = _classifier_features(target_w, card)
    x = np.concatenate([fs, ft])
    # full-batch steps converge to the frequency estimate; minibatch noise does not
    cfg = cfg or TrainConfig(loss=Loss.CROSS_ENTROPY, learning_rate=1.0, epochs=200, batch_size=len(x))
    cfg = TrainConfig(**{**cfg.to_dict(), "loss": Loss.CROSS_ENTROPY})
    y = np.concatenate([np.zeros(n_s, dtype=np.int64), np.ones(n_t, dtype=np.int64)])
    clf = fit(Predictor(x.shape[1], 2, hidden=hidden, head=Head.SOFTMAX, seed=cfg.seed), x, y, cfg).predictor
    return DensityRatioModel(method, classifier=clf, prior_correction=n_s / n_t, card=card, clip_max=clip_max)


def example_losses(g: Predictor, features: np.ndarray, y: np.ndarray, loss: Loss | str) -> np.ndarray:
    """Per-example loss; ``"zero_one"`` scores the argmax prediction."""
    if loss == "zero_one":
        return (np.argmax(g.predict(features), axis=1) != np.asarray(y)).astype(float)
    return per_example_loss(g, loss, features, y)


def weighted_source_risk(g: Predictor, w: np.ndarray, y: np.ndarray, rho: DensityRatioModel,
                         loss: Loss | str = Loss.CROSS_ENTROPY,
                         features: np.ndarray | None = None) -> float:
    """``(1/m) sum_i rho(w_i) L(g(w_i), y_i)``.

    ``features`` is what ``g`` reads when it differs from the raw ``w``
    passed to ``rho`` (for example a one-hot encoding of integer W).
    """
    if len(w) == 0:
        raise ValueError("source sample is empty")
    feats = np.asarray(w, dtype=float) if features is None else features
    return float(np.mean(rho(w) * example_losses(g, feats, y, loss)))


def renyi_d2(target_pw, source_pw) -> float:
    """``sum_w T(w)^2 / S(w)``, the exponentiated order-2 Renyi divergence."""
    t = np.asarray(target_pw, dtype=float)
    s = np.asarray(source_pw, dtype=float)
    if t.shape != s.shape:
        raise ValueError("distributions must have the same length")
    bad = np.flatnonzero((t > 0) & (s <= 0))
    if bad.size:
        raise OverlapViolation(f"target has mass on w={bad.tolist()} where the source has none")
    ok = t > 0
    return float(np.sum(t[ok] ** 2 / s[ok]))


def pseudo_dimension_surrogate(p: Predictor) -> int:
    """Capacity stand-in for a predictor class: its parameter count."""
    return p.num_parameters


@dataclass
class BoundBreakdown:
    """Additive terms of a bound, in evaluation order, and their sum."""

    terms: dict[str, float]
    total: float

    def to_dict(self) -> dict[str, Any]:
        return {"terms": dict(self.terms), "total": self.total}

    def lines(self) -> list[str]:
        width = max(len(k) for k in self.terms)
        out = [f"{k:<{width}}  {v:.10g}" for k, v in self.terms.items()]
        out.append(f"{'total':<{width}}  {self.total:.10g}")
        return out


@dataclass
class Prop2Inputs:
    """Scalars entering the two-stage finite-sample bound.

    ``m`` counts labeled source samples (for ``g``) and ``n`` target PI
    samples (for ``f``).  ``d`` and ``d_prime`` are capacity measures of the
    label and PI hypothesis classes; ``d_w`` is the PI dimension.
    """

    r_hat_y_rho: float
    r_hat_w_t: float
    m: int
    n: int
    d: float
    d_prime: float
    d_w: int
    big_m: float
    big_b: float
    delta: float
    d2: float

    def __post_init__(self) -> None:
        if self.m < 1 or self.n < 1:
            raise ValueError("sample counts must be at least 1")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.d2 < 1 - 1e-12:
            raise ValueError("d2 is at least 1 for any pair of distributions")
        if self.r_hat_y_rho < 0 or self.r_hat_w_t < 0:
            raise ValueError("empirical risks must be non-negative")
        if self.d <= 0 or self.d_prime <= 0 or self.d_w < 1:
            raise ValueError("capacity terms must be positive")
        if self.big_m < 0 or self.big_b < 0:
            raise ValueError("Lipschitz constant and loss bound must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def prop2_bound(inp: Prop2Inputs) -> BoundBreakdown:
    """High-probability bound on half the target risk of ``g o f``.

    Terms: the weighted source risk of ``g``; ``M^2`` times the target PI
    risk of ``f``; the importance-weighted complexity
    ``2^{5/4} sqrt(d2) ((d log(2me/d) + log(4/delta)) / m)^{3/8}``; and the
    PI complexity
    ``d_W B M^2 (sqrt(2 d' log(en/d') / n) + sqrt(log(d_W/delta) / (2n)))``.

    Raises
    ------
    ValueError
        If a logarithm's argument drops below 1, i.e. ``m < d/(2e)``,
        ``n < d'/e`` or ``d_W < delta``.
    """
    m, n, d, dp = inp.m, inp.n, inp.d, inp.d_prime
    arg_g = 2 * m * math.e / d
    arg_f = math.e * n / dp
    arg_dw = inp.d_w / inp.delta
    for name, arg in (("2me/d", arg_g), ("en/d'", arg_f), ("d_W/delta", arg_dw)):
        if arg < 1:
            raise ValueError(f"log argument {name} = {arg:.6g} is below 1; the bound is undefined here")
    m2 = inp.big_m ** 2
    label_complexity = 2 ** 1.25 * math.sqrt(inp.d2) * ((d * math.log(arg_g) + math.log(4 / inp.delta)) / m) ** 0.375
    pi_complexity = inp.d_w * inp.big_b * m2 * (
        math.sqrt(2 * dp * math.log(arg_f) / n) + math.sqrt(math.log(arg_dw) / (2 * n))
    )
    terms = {
        "weighted_source_risk": float(inp.r_hat_y_rho),
        "scaled_target_pi_risk": m2 * inp.r_hat_w_t,
        "label_complexity": label_complexity,
        "pi_complexity": pi_complexity,
    }
    return BoundBreakdown(terms, float(sum(terms.values())))


@dataclass
class PacBayesInputs:
    """Scalars of the PAC-Bayes bound for randomized ``g o f``."""

    expected_weighted_source_risk: float
    expected_target_pi_risk: float
    kl_g: float
    kl_f: float
    beta_inf: float
    gamma: float
    alpha: float
    big_m: float
    m: int
    n: int
    delta: float

    def __post_init__(self) -> None:
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.kl_g < 0 or self.kl_f < 0:
            raise ValueError("KL terms are non-negative")
        if self.m < 1 or self.n < 1:
            raise ValueError("sample counts must be at least 1")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def alpha_factor(alpha: float) -> float:
    """``alpha / (1 - e^{-alpha})``, accurate as ``alpha -> 0``."""
    return alpha / -math.expm1(-alpha)


def pacbayes_bound(inp: PacBayesInputs) -> BoundBreakdown:
    """Bound on the posterior-expected target risk.

    ``(2/gamma) E R_rho + beta_inf (KL_g + ln(2/delta)) / (2 gamma (1-gamma) m)
    + (2 M^2 alpha / (1 - e^{-alpha})) (E R_W + (KL_f + ln(2/delta)) / (n alpha))``
    """
    g, a = inp.gamma, inp.alpha
    log_term = math.log(2 / inp.delta)
    factor = 2 * inp.big_m ** 2 * alpha_factor(a)
    terms = {
        "weighted_source_risk": (2 / g) * inp.expected_weighted_source_risk,
        "label_complexity": inp.beta_inf * (inp.kl_g + log_term) / (2 * g * (1 - g) * inp.m),
        "scaled_target_pi_risk": factor * inp.expected_target_pi_risk,
        "pi_complexity": factor * (inp.kl_f + log_term) / (inp.n * a),
    }
    return BoundBreakdown(terms, float(sum(terms.values())))
