"""Exact risk computations on finite worlds.

Everything here is full enumeration over ``(x, w, y)``; nothing is sampled.
These functions are the ground truth the estimators are checked against.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .world import DiscreteWorld, Domain

# probability mass below this counts as zero when detecting support
SUPPORT_TOL = 1e-12


class Unidentified(ValueError):
    """The requested quantity depends on source conditionals outside the source support."""

    def __init__(self, message: str, violating_w: list[int]):
        super().__init__(message)
        self.violating_w = violating_w


class RiskLoss(str, Enum):
    SQUARED = "squared"
    ZERO_ONE = "zero_one"


@dataclass(frozen=True, eq=False)
class TabularHypothesis:
    """A hypothesis on a finite input space.

    ``values`` is either a real vector indexed by x (regression form) or a
    row-stochastic ``[x_card, y_card]`` matrix (classification form).
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float)
        if v.ndim not in (1, 2) or not np.all(np.isfinite(v)):
            raise ValueError("hypothesis values must be a finite vector or matrix")
        if v.ndim == 2:
            if np.any(v < 0) or np.max(np.abs(v.sum(axis=1) - 1.0)) > 1e-9:
                raise ValueError("classification-form hypothesis rows must be probability vectors")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def is_stochastic(self) -> bool:
        return self.values.ndim == 2


def loss_matrix(world: DiscreteWorld, h: TabularHypothesis, loss: RiskLoss | str) -> np.ndarray:
    """``L(h(x), y)`` as an ``[x_card, y_card]`` table."""
    loss = RiskLoss(loss)
    v = h.values
    if v.shape[0] != world.x_card:
        raise ValueError(f"hypothesis covers {v.shape[0]} inputs, world has {world.x_card}")
    yv = world.y_values
    if loss is RiskLoss.SQUARED:
        if h.is_stochastic:
            raise ValueError("squared loss needs a real-valued (regression-form) hypothesis")
        return (v[:, None] - yv[None, :]) ** 2
    if h.is_stochastic:
        if v.shape[1] != world.y_card:
            raise ValueError("classification-form hypothesis has the wrong number of labels")
        return 1.0 - v
    # a real-valued prediction is read as the label whose embedding is nearest
    pred = np.argmin(np.abs(v[:, None] - yv[None, :]), axis=1)
    return (pred[:, None] != np.arange(world.y_card)[None, :]).astype(float)


def w_marginal(world: DiscreteWorld, domain: Domain | str) -> np.ndarray:
    px, pwx, _ = world.tables(domain)
    return px @ pwx


def label_given_w(world: DiscreteWorld, domain: Domain | str) -> np.ndarray:
    """``P(y|w)`` as a ``[w_card, y_card]`` table; rows with ``P(w) = 0`` are NaN."""
    px, pwx, pywx = world.tables(domain)
    pxw = px[:, None] * pwx  # P(x, w)
    pw = pxw.sum(axis=0)
    num = np.einsum("xw,wxy->wy", pxw, pywx)
    out = np.full_like(num, np.nan)
    ok = pw > SUPPORT_TOL
    out[ok] = num[ok] / pw[ok, None]
    return out


def x_given_w(world: DiscreteWorld, domain: Domain | str) -> np.ndarray:
    """``P(x|w)`` as ``[w_card, x_card]``; rows with ``P(w) = 0`` are NaN."""
    px, pwx, _ = world.tables(domain)
    pxw = (px[:, None] * pwx).T
    pw = pxw.sum(axis=1)
    out = np.full_like(pxw, np.nan)
    ok = pw > SUPPORT_TOL
    out[ok] = pxw[ok] / pw[ok, None]
    return out


@dataclass
class AssumptionReport:
    """Covariate shift, overlap and sufficiency, each measured w.r.t. W."""

    labeling_invariant: bool
    marginals_differ: bool
    overlap_w: bool
    sufficiency: bool
    tolerance: float
    labeling_violations: list[int] = field(default_factory=list)
    overlap_violations: list[int] = field(default_factory=list)
    sufficiency_violations: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def covariate_shift_w(self) -> dict[str, bool]:
        return {"labeling_invariant": self.labeling_invariant, "marginals_differ": self.marginals_differ}

    @property
    def all_hold(self) -> bool:
        return self.labeling_invariant and self.marginals_differ and self.overlap_w and self.sufficiency

    def to_dict(self) -> dict:
        d = asdict(self)
        d["covariate_shift_w"] = self.covariate_shift_w
        d["sufficiency_violations"] = [list(t) for t in self.sufficiency_violations]
        return d


def check_assumptions(world: DiscreteWorld, tol: float = 1e-9) -> AssumptionReport:
    """Evaluate the three identification assumptions with respect to W."""
    s_w, t_w = w_marginal(world, Domain.SOURCE), w_marginal(world, Domain.TARGET)
    s_y, t_y = label_given_w(world, Domain.SOURCE), label_given_w(world, Domain.TARGET)

    joint = (s_w > SUPPORT_TOL) & (t_w > SUPPORT_TOL)
    labeling = [int(w) for w in np.flatnonzero(joint)
                if np.max(np.abs(t_y[w] - s_y[w])) > tol]
    overlap = [int(w) for w in np.flatnonzero((t_w > tol) & ~(s_w > tol))]

    insufficient = []
    for domain in (Domain.SOURCE, Domain.TARGET):
        px, pwx, pywx = world.tables(domain)
        pw = w_marginal(world, domain)
        pyw = label_given_w(world, domain)
        for w in np.flatnonzero(pw > tol):
            for x in np.flatnonzero(px * pwx[:, w] > SUPPORT_TOL):
                if np.max(np.abs(pywx[w, x] - pyw[w])) > tol:
                    insufficient.append((domain.value, int(w), int(x)))

    return AssumptionReport(
        labeling_invariant=not labeling,
        marginals_differ=bool(np.any(np.abs(t_w - s_w) > tol)),
        overlap_w=not overlap,
        sufficiency=not insufficient,
        tolerance=tol,
        labeling_violations=labeling,
        overlap_violations=overlap,
        sufficiency_violations=insufficient,
    )


def true_target_risk(world: DiscreteWorld, h: TabularHypothesis, loss: RiskLoss | str) -> float:
    """Target risk by enumerating the target joint of ``(x, w, y)``."""
    lm = loss_matrix(world, h, loss)
    joint = world.joint(Domain.TARGET)  # [x, w, y]
    return float(np.einsum("xwy,xy->", joint, lm))


def _require_w_overlap(world: DiscreteWorld) -> np.ndarray:
    s_w, t_w = w_marginal(world, Domain.SOURCE), w_marginal(world, Domain.TARGET)
    bad = [int(w) for w in np.flatnonzero((t_w > SUPPORT_TOL) & ~(s_w > SUPPORT_TOL))]
    if bad:
        raise Unidentified(
            f"target risk is unidentified: target puts mass on w={bad} where the source has none",
            bad,
        )
    return s_w > SUPPORT_TOL


def _target_xw_weights(world: DiscreteWorld, supported: np.ndarray) -> np.ndarray:
    """``T(x) T(w|x)`` restricted to source-supported w."""
    weights = world.target_px[:, None] * world.target_pw_given_x
    return np.where(supported[None, :], weights, 0.0)


def identified_target_risk(world: DiscreteWorld, h: TabularHypothesis, loss: RiskLoss | str) -> float:
    """Target risk computed only from ``T(x)``, ``T(w|x)`` and the source ``S(y|w)``.

    Raises :class:`Unidentified` when the target puts mass on a value of W
    that the source never produces.
    """
    supported = _require_w_overlap(world)
    lm = loss_matrix(world, h, loss)
    s_y = np.nan_to_num(label_given_w(world, Domain.SOURCE))
    weights = _target_xw_weights(world, supported)
    return float(np.einsum("xw,wy,xy->", weights, s_y, lm))


def optimal_hypothesis(world: DiscreteWorld) -> TabularHypothesis:
    """Squared-loss minimizer ``h*(x) = sum_w T(w|x) E_S[Y|w]``.

    Inputs with zero target mass get the same formula with unsupported
    values of W contributing nothing; their value does not affect any risk.
    """
    supported = _require_w_overlap(world)
    s_y = np.nan_to_num(label_given_w(world, Domain.SOURCE))
    cond_mean = s_y @ world.y_values
    pwx = np.where(supported[None, :], world.target_pw_given_x, 0.0)
    return TabularHypothesis(pwx @ cond_mean)


def _sup_ratio(world: DiscreteWorld, domain: Domain) -> np.ndarray:
    """``sup_x P(y|w,x) / P(y|w)`` over the support of ``P(x|w)``, as ``[w, y]``.

    Entries are NaN where ``P(w) = 0`` and 0 where ``P(y|w) = 0``.
    """
    _, _, pywx = world.tables(domain)
    pxw = x_given_w(world, domain)
    pyw = label_given_w(world, domain)
    out = np.full((world.w_card, world.y_card), np.nan)
    for w in range(world.w_card):
        if np.isnan(pyw[w, 0]):
            continue
        xs = np.flatnonzero(pxw[w] > SUPPORT_TOL)
        top = pywx[w, xs].max(axis=0)
        for y in range(world.y_card):
            if pyw[w, y] > SUPPORT_TOL:
                out[w, y] = top[y] / pyw[w, y]
            elif top[y] > SUPPORT_TOL:
                raise ZeroDivisionError(
                    f"{domain.value} P(y={y}|w={w}) is zero while P(y|w,x) is positive on the support"
                )
            else:
                out[w, y] = 0.0
    return out


def raw_gamma_ratio(world: DiscreteWorld) -> float:
    """Largest target/source sup-ratio quotient over the joint support.

    May be below 1, e.g. when only the source violates sufficiency.
    """
    t_ratio = _sup_ratio(world, Domain.TARGET)
    s_ratio = _sup_ratio(world, Domain.SOURCE)
    t_w = w_marginal(world, Domain.TARGET)
    worst = 0.0
    for w in range(world.w_card):
        if t_w[w] <= SUPPORT_TOL or np.isnan(s_ratio[w, 0]):
            continue
        for y in range(world.y_card):
            num = t_ratio[w, y]
            if not num > 0:
                continue
            den = s_ratio[w, y]
            if not den > 0:
                raise ZeroDivisionError(f"source sup-ratio is zero at (w={w}, y={y}) while the target's is not")
            worst = max(worst, num / den)
    return worst


def minimal_gamma(world: DiscreteWorld) -> float:
    """Smallest admissible ``gamma >= 1`` for the relaxed sufficiency condition."""
    return max(1.0, raw_gamma_ratio(world))


def relaxed_sufficiency_bound(world: DiscreteWorld, h: TabularHypothesis, gamma: float,
                              loss: RiskLoss | str) -> float:
    """Upper bound on the target risk when sufficiency is relaxed by ``gamma``.

    Each source conditional ``S(y|w)`` is inflated by
    ``gamma * sup_x S(y|w,x) / S(y|w)``.
    """
    if gamma < 1:
        raise ValueError("gamma must be at least 1")
    supported = _require_w_overlap(world)
    lm = loss_matrix(world, h, loss)
    s_y = np.nan_to_num(label_given_w(world, Domain.SOURCE))
    delta = gamma * np.nan_to_num(_sup_ratio(world, Domain.SOURCE))
    weights = _target_xw_weights(world, supported)
    return float(np.einsum("xw,wy,xy->", weights, delta * s_y, lm))
