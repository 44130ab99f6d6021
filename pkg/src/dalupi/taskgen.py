"""Synthetic tasks: random finite worlds, the background-skew image task and
a binary-attribute task with domain-specific nuisance directions."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from .oracle import check_assumptions
from .world import (
    BoxPI,
    DiscreteWorld,
    Labeled,
    PIKind,
    PIPairs,
    SampleSet,
    make_rng,
)


class Knob(str, Enum):
    BREAK_OVERLAP_W = "break_overlap_w"
    BREAK_SUFFICIENCY = "break_sufficiency"
    BREAK_COVARIATE_SHIFT_W = "break_covariate_shift_w"


class InfeasibleSpec(ValueError):
    pass


def _streams(seed: int, *key: int, count: int) -> list[np.random.Generator]:
    ss = np.random.SeedSequence([int(seed), *key])
    return [np.random.Generator(np.random.Philox(s)) for s in ss.spawn(count)]


# ---------------------------------------------------------------------------
# Random finite worlds
# ---------------------------------------------------------------------------


@dataclass
class WorldGenSpec:
    """Cardinalities, violation knobs and sharpness of a random world.

    ``disjoint_x`` gives the two domains disjoint input supports, so overlap
    in X fails while overlap in W can still hold.
    """

    x_card: int = 3
    w_card: int = 3
    y_card: int = 2
    knobs: frozenset = frozenset()
    concentration: float = 1.0
    seed: int = 0
    disjoint_x: bool = False

    def __post_init__(self) -> None:
        self.knobs = frozenset(Knob(k) for k in self.knobs)
        if min(self.x_card, self.w_card, self.y_card) < 1:
            raise InfeasibleSpec("cardinalities must be at least 1")
        if self.concentration <= 0:
            raise InfeasibleSpec("concentration must be positive")
        if Knob.BREAK_OVERLAP_W in self.knobs and self.w_card < 2:
            raise InfeasibleSpec("breaking overlap in W needs w_card >= 2")
        if Knob.BREAK_COVARIATE_SHIFT_W in self.knobs and self.y_card < 2:
            raise InfeasibleSpec("breaking covariate shift in W needs y_card >= 2")
        if Knob.BREAK_SUFFICIENCY in self.knobs:
            per_domain = self.x_card // 2 if self.disjoint_x else self.x_card
            if per_domain < 2 or self.y_card < 2:
                raise InfeasibleSpec("breaking sufficiency needs two inputs per domain and y_card >= 2")
        if self.disjoint_x and self.x_card < 2:
            raise InfeasibleSpec("disjoint input supports need x_card >= 2")


def _dirichlet(rng: np.random.Generator, conc: float, shape: tuple[int, ...]) -> np.ndarray:
    out = rng.gamma(conc, size=shape)
    # a row of underflowed gammas would be all zero
    out += 1e-3 * out.sum(axis=-1, keepdims=True).mean() + 1e-12
    return out / out.sum(axis=-1, keepdims=True)


def _perturb_sufficiency(rng, pxw: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Label tables ``P(y|w,x)`` that depend on x but average back to ``q(y|w)``."""
    w_card, x_card = pxw.shape
    out = np.repeat(q[:, None, :], x_card, axis=1)
    for w in range(w_card):
        x1, x2 = np.argsort(-pxw[w])[:2]
        a, b = pxw[w, x1], pxw[w, x2]
        y1, y2 = rng.choice(q.shape[1], size=2, replace=False)
        t_max = min(a * q[w, y2], b * q[w, y1])
        t = rng.uniform(0.5, 0.95) * t_max
        out[w, x1, y1] += t / a
        out[w, x1, y2] -= t / a
        out[w, x2, y1] -= t / b
        out[w, x2, y2] += t / b
    return np.clip(out, 0.0, None)


def _to_world(pw: dict, pxw: dict, pywx: dict) -> dict[str, np.ndarray]:
    """Convert ``P(w) P(x|w) P(y|w,x)`` into the ``P(x) P(w|x) P(y|w,x)`` layout."""
    out = {}
    for d in ("source", "target"):
        joint = pw[d][:, None] * pxw[d]  # [w, x]
        px = joint.sum(axis=0)
        w_card = joint.shape[0]
        pw_x = np.full((joint.shape[1], w_card), 1.0 / w_card)
        ok = px > 0
        pw_x[ok] = (joint[:, ok] / px[ok]).T
        out[f"{d}_px"] = px / px.sum()
        out[f"{d}_pw_given_x"] = pw_x / pw_x.sum(axis=1, keepdims=True)
        t = pywx[d]
        out[f"{d}_py_given_wx"] = t / t.sum(axis=2, keepdims=True)
    return out


def gen_world(spec: WorldGenSpec) -> DiscreteWorld:
    """Random world satisfying the identification assumptions in W, except
    for the violations requested through ``spec.knobs``.

    The result is checked with :func:`check_assumptions`; an
    ``AssertionError`` means a flag other than the intended ones flipped.
    """
    rng = make_rng(spec.seed)
    xc, wc, yc = spec.x_card, spec.w_card, spec.y_card
    conc = spec.concentration

    pw = {d: _dirichlet(rng, conc, (wc,)) for d in ("source", "target")}
    if Knob.BREAK_OVERLAP_W in spec.knobs:
        pw["source"][-1] = 0.0
        pw["source"] /= pw["source"].sum()
        pw["target"][-1] = max(pw["target"][-1], 0.25)
        pw["target"] /= pw["target"].sum()

    pxw = {}
    for i, d in enumerate(("source", "target")):
        table = _dirichlet(rng, conc, (wc, xc))
        if spec.disjoint_x:
            half = xc // 2
            mask = np.zeros(xc, bool)
            mask[:half] = i == 0
            mask[half:] = i == 1
            table = table * mask
            table /= table.sum(axis=1, keepdims=True)
        pxw[d] = table

    q_source = _dirichlet(rng, conc, (wc, yc))
    q = {"source": q_source, "target": q_source}
    if Knob.BREAK_COVARIATE_SHIFT_W in spec.knobs:
        q_target = _dirichlet(rng, conc, (wc, yc))
        # make sure the change is visible on a commonly supported w
        while np.max(np.abs(q_target - q_source)) < 0.05:
            q_target = _dirichlet(rng, conc, (wc, yc))
        q["target"] = q_target

    pywx = {}
    for d in ("source", "target"):
        if Knob.BREAK_SUFFICIENCY in spec.knobs:
            pywx[d] = _perturb_sufficiency(rng, pxw[d], q[d])
        else:
            pywx[d] = np.repeat(q[d][:, None, :], xc, axis=1)

    world = DiscreteWorld(**_to_world(pw, pxw, pywx))

    report = check_assumptions(world, tol=1e-9)
    expected = {
        "labeling_invariant": Knob.BREAK_COVARIATE_SHIFT_W not in spec.knobs,
        "overlap_w": Knob.BREAK_OVERLAP_W not in spec.knobs,
        "sufficiency": Knob.BREAK_SUFFICIENCY not in spec.knobs,
    }
    got = {k: getattr(report, k) for k in expected}
    assert got == expected, f"generated world flags {got}, intended {expected}"
    return world


# ---------------------------------------------------------------------------
# Background-skew image task
# ---------------------------------------------------------------------------

# coarse 4x4 motifs, upsampled to the patch size; extra classes get seeded random motifs
_BASE_MOTIFS = np.array(
    [
        [[1, 1, 1, 1], [1, 1, 1, 1], [0, 0, 0, 0], [0, 0, 0, 0]],
        [[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 0, 0]],
        [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]],
        [[0, 0, 0, 0], [0, 1, 1, 0], [0, 1, 1, 0], [0, 0, 0, 0]],
        [[1, 1, 1, 1], [1, 0, 0, 1], [1, 0, 0, 1], [1, 1, 1, 1]],
    ],
    dtype=float,
)

PATCH_LOW, PATCH_HIGH = 0.6, 1.0
BACKGROUND_MEAN, BACKGROUND_AMPLITUDE = 0.2, 0.15


def class_motif(label: int, num_classes: int, patch_size: int) -> np.ndarray:
    """Deterministic ``patch_size x patch_size`` motif for one class."""
    if label < len(_BASE_MOTIFS) and num_classes <= len(_BASE_MOTIFS):
        coarse = _BASE_MOTIFS[label]
    else:
        coarse = make_rng(10_007 + label).integers(0, 2, size=(4, 4)).astype(float)
    idx = (np.arange(patch_size) * 4) // patch_size
    return PATCH_LOW + (PATCH_HIGH - PATCH_LOW) * coarse[np.ix_(idx, idx)]


def background_texture(b: int, num_backgrounds: int, image_size: int) -> np.ndarray:
    """Oriented sinusoidal grating, one orientation per background class."""
    ii, jj = np.mgrid[0:image_size, 0:image_size]
    theta = np.pi * b / num_backgrounds
    phase = 2 * np.pi * 3 * (ii * np.cos(theta) + jj * np.sin(theta)) / image_size
    return BACKGROUND_MEAN + BACKGROUND_AMPLITUDE * np.sin(phase + b)


def skew_row(label: int, epsilon: float, num_classes: int) -> np.ndarray:
    """``P(B = . | Y = label)`` in the source domain."""
    row = np.full(num_classes, (1.0 - epsilon) / (num_classes - 1) if num_classes > 1 else 0.0)
    row[label] = epsilon
    return row


@dataclass
class SkewTaskSpec:
    """Images with a class motif planted on a class-correlated background.

    Positions are drawn uniformly from the lattice ``{0, s, 2s, ...}`` with
    ``s = position_stride``; ``s = 1`` gives every pixel offset.
    """

    num_classes: int = 5
    epsilon: float = 0.2
    image_size: int = 32
    patch_size: int = 8
    noise_sigma: float = 0.05
    n_source: int = 2000
    n_target_pi: int = 2000
    n_target_unlabeled: int = 0
    n_test_source: int = 1000
    n_test_target: int = 1000
    position_stride: int = 4
    seed: int = 0
    num_backgrounds: int | None = None

    def __post_init__(self) -> None:
        if self.num_backgrounds is None:
            self.num_backgrounds = self.num_classes
        c = self.num_classes
        if c < 2:
            raise ValueError("need at least two classes")
        if self.num_backgrounds != c:
            raise ValueError("the skew formula pairs each class with one background")
        if not (1.0 / c - 1e-12 <= self.epsilon <= 1.0 + 1e-12):
            raise ValueError(f"epsilon must lie in [1/{c}, 1], got {self.epsilon}")
        if not 1 <= self.patch_size < self.image_size:
            raise ValueError("patch_size must be smaller than image_size")
        if self.position_stride < 1 or self.noise_sigma < 0:
            raise ValueError("position_stride must be positive and noise_sigma non-negative")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


_ROLE_KEYS = {"source": 0, "target_pi": 1, "test_source": 2, "test_target": 3, "target_unlabeled": 4}


def _skew_role(spec: SkewTaskSpec, role: str, n: int, skewed: bool):
    """Images, labels, backgrounds and boxes for one data role.

    Label, position and pixel noise come from streams that do not depend on
    epsilon; only the background draw reads it.
    """
    c, size, k = spec.num_classes, spec.image_size, spec.patch_size
    labels_rng, bg_rng, noise_rng = _streams(spec.seed, _ROLE_KEYS[role], count=3)
    y = labels_rng.integers(0, c, size=n)
    slots = (size - k) // spec.position_stride + 1
    pos = labels_rng.integers(0, slots, size=(n, 2)) * spec.position_stride
    u = bg_rng.random(n)
    if skewed:
        rows = np.stack([skew_row(label, spec.epsilon, c) for label in range(c)])[y]
        b = np.minimum((u[:, None] >= np.cumsum(rows, axis=1)).sum(axis=1), c - 1)
    else:
        b = np.minimum((u * c).astype(int), c - 1)
    textures = np.stack([background_texture(i, c, size) for i in range(c)])
    motifs = np.stack([class_motif(i, c, k) for i in range(c)])
    x = textures[b].copy()
    for i in range(n):
        r, col = pos[i]
        x[i, r:r + k, col:col + k] = motifs[y[i]]
    x += noise_rng.normal(0.0, spec.noise_sigma, size=x.shape)
    boxes = np.stack([pos[:, 1], pos[:, 0], pos[:, 1] + k, pos[:, 0] + k], axis=1).astype(float)
    patches = np.stack([x[i, r:r + k, col:col + k] for i, (r, col) in enumerate(pos)]) if n else np.zeros((0, k, k))
    return x, y, b, boxes, patches


def _yb_table(y: np.ndarray, b: np.ndarray, c: int) -> list[list[int]]:
    t = np.zeros((c, c), dtype=int)
    np.add.at(t, (y, b), 1)
    return t.tolist()


def gen_skew_task(spec: SkewTaskSpec) -> SampleSet:
    """Sample every data role of the background-skew task.

    Source backgrounds follow ``P(B=b|Y=y) = eps`` if ``b == y`` else
    ``(1-eps)/(c-1)``; target backgrounds are uniform and independent of Y.
    Metadata records labels, backgrounds and boxes per role plus the
    label/background contingency tables.
    """
    c = spec.num_classes
    roles = {
        "source": (spec.n_source, True),
        "target_pi": (spec.n_target_pi, False),
        "test_source": (spec.n_test_source, True),
        "test_target": (spec.n_test_target, False),
        "target_unlabeled": (spec.n_target_unlabeled, False),
    }
    made = {name: _skew_role(spec, name, n, sk) for name, (n, sk) in roles.items()}
    meta: dict[str, Any] = {"task": "skew", "num_classes": c, "spec": spec.to_dict(), "roles": {}}
    for name, (x, y, b, boxes, _) in made.items():
        meta["roles"][name] = {
            "labels": y.tolist(),
            "backgrounds": b.tolist(),
            "boxes": boxes.tolist(),
            "label_background_counts": _yb_table(y, b, c),
        }
    xs, ys, _, bs, ps = made["source"]
    xt, yt, _, bt, pt = made["target_pi"]
    out = SampleSet(
        pi_kind=PIKind.SINGLE_BOX,
        pi_dim=spec.patch_size,
        source_labeled=PIPairs(xs, BoxPI(bs, ps), ys),
        target_pi=PIPairs(xt, BoxPI(bt, pt)),
        target_unlabeled=made["target_unlabeled"][0],
        test_source=Labeled(made["test_source"][0], made["test_source"][1]),
        test_target=Labeled(made["test_target"][0], made["test_target"][1]),
        target_labeled=Labeled(xt, yt),
        metadata=meta,
    )
    out.validate()
    return out


# ---------------------------------------------------------------------------
# Binary-attribute task
# ---------------------------------------------------------------------------


@dataclass
class AttributeTaskSpec:
    """Attribute vectors W drive both the features X and the label Y.

    ``x = A w + offset_d * u_d + z * u_d + noise`` with a shared embedding
    ``A`` and orthogonal nuisance directions ``u_S``, ``u_T``; the offsets
    separate the domains' input supports.  ``y ~ Bernoulli(sigmoid(s * (beta.w - b0)))``
    with the same coefficients in both domains; ``sharpness=None`` makes the
    label the deterministic sign of the logit.
    """

    num_attributes: int = 7
    n_source: int = 2000
    n_source_pi: int = 0
    n_target_pi: int = 2000
    n_target_unlabeled: int = 0
    n_test_source: int = 1000
    n_test_target: int = 1000
    shift: float = 0.3
    nuisance_offset: float = 3.0
    noise_sigma: float = 0.1
    sharpness: float | None = 4.0
    seed: int = 0
    feature_dim: int | None = None

    def __post_init__(self) -> None:
        if self.num_attributes < 1:
            raise ValueError("need at least one attribute")
        if self.feature_dim is None:
            self.feature_dim = self.num_attributes + 4
        if self.feature_dim < self.num_attributes + 2:
            raise ValueError("feature_dim must leave room for two nuisance directions")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def attribute_rates(spec: AttributeTaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-attribute Bernoulli rates for source and target."""
    d = spec.num_attributes
    base = np.linspace(0.3, 0.7, d)
    sign = np.where(np.arange(d) % 2 == 0, 1.0, -1.0)
    src = np.clip(base - 0.5 * spec.shift * sign, 0.02, 0.98)
    tgt = np.clip(base + 0.5 * spec.shift * sign, 0.02, 0.98)
    return src, tgt


def _attribute_geometry(spec: AttributeTaskSpec):
    rng = make_rng(spec.seed * 7919 + 17)
    d, D = spec.num_attributes, spec.feature_dim
    q, _ = np.linalg.qr(rng.normal(size=(D, D)))
    embed = q[:, :d] * 2.0
    u_source, u_target = q[:, d], q[:, d + 1]
    beta = np.linspace(1.0, 2.0, d) * np.where(np.arange(d) % 3 == 1, -1.0, 1.0)
    src_rate, _ = attribute_rates(spec)
    offset = float(beta @ src_rate)
    return embed, u_source, u_target, beta, offset


def attribute_label_prob(spec: AttributeTaskSpec, w: np.ndarray) -> np.ndarray:
    _, _, _, beta, offset = _attribute_geometry(spec)
    logit = np.asarray(w, dtype=float) @ beta - offset
    if spec.sharpness is None:
        return (logit > 0).astype(float)
    return 1.0 / (1.0 + np.exp(-spec.sharpness * logit))


def _attribute_role(spec: AttributeTaskSpec, role: str, domain: str, n: int):
    keys = {"source": 0, "source_pi": 5, "target_pi": 1, "test_source": 2, "test_target": 3, "target_unlabeled": 4}
    w_rng, z_rng, y_rng = _streams(spec.seed, 100 + keys[role], count=3)
    embed, u_s, u_t, _, _ = _attribute_geometry(spec)
    src_rate, tgt_rate = attribute_rates(spec)
    rate = src_rate if domain == "source" else tgt_rate
    w = (w_rng.random((n, spec.num_attributes)) < rate).astype(np.int64)
    u = u_s if domain == "source" else u_t
    z = z_rng.normal(size=n)
    x = w @ embed.T + (spec.nuisance_offset + z)[:, None] * u[None, :]
    x += spec.noise_sigma * z_rng.normal(size=x.shape)
    y = (y_rng.random(n) < attribute_label_prob(spec, w)).astype(np.int64)
    return x, w, y


def gen_attribute_task(spec: AttributeTaskSpec) -> SampleSet:
    """Sample every data role of the attribute task."""
    roles = {
        "source": "source",
        "source_pi": "source",
        "target_pi": "target",
        "test_source": "source",
        "test_target": "target",
        "target_unlabeled": "target",
    }
    sizes = {
        "source": spec.n_source,
        "source_pi": spec.n_source_pi,
        "target_pi": spec.n_target_pi,
        "test_source": spec.n_test_source,
        "test_target": spec.n_test_target,
        "target_unlabeled": spec.n_target_unlabeled,
    }
    made = {r: _attribute_role(spec, r, dom, sizes[r]) for r, dom in roles.items()}
    src_rate, tgt_rate = attribute_rates(spec)
    out = SampleSet(
        pi_kind=PIKind.BINARY_ATTRIBUTES,
        pi_dim=spec.num_attributes,
        source_labeled=PIPairs(*made["source"]),
        source_pi=PIPairs(made["source_pi"][0], made["source_pi"][1]) if spec.n_source_pi else None,
        target_pi=PIPairs(made["target_pi"][0], made["target_pi"][1]),
        target_unlabeled=made["target_unlabeled"][0],
        test_source=Labeled(made["test_source"][0], made["test_source"][2]),
        test_target=Labeled(made["test_target"][0], made["test_target"][2]),
        target_labeled=Labeled(made["target_pi"][0], made["target_pi"][2]),
        metadata={
            "task": "attribute",
            "num_classes": 2,
            "spec": spec.to_dict(),
            "source_rates": src_rate.tolist(),
            "target_rates": tgt_rate.tolist(),
        },
    )
    out.validate()
    return out


TASK_BUILDERS = {
    "skew": (SkewTaskSpec, gen_skew_task),
    "attribute": (AttributeTaskSpec, gen_attribute_task),
}


def build_task(kind: str, params: dict[str, Any]) -> SampleSet:
    """Construct a task from a kind name and keyword parameters."""
    if kind not in TASK_BUILDERS:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {sorted(TASK_BUILDERS)}")
    spec_cls, builder = TASK_BUILDERS[kind]
    return builder(spec_cls(**params))
