"""Finite world models over (X, W, Y) and empirical sample containers.

A :class:`DiscreteWorld` holds the exact source and target joints, factored
as ``P(x) P(w|x) P(y|w,x)``.  A :class:`SampleSet` holds empirical data split
into the data roles a learner may be allowed to read during training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

WORLD_FORMAT = "dalupi-world/1"
SAMPLES_FORMAT = "dalupi-samples/1"

# rows deviating from unit sum by more than this are rejected
ROW_SUM_TOL = 1e-9


class ValidationError(ValueError):
    """Raised when a world or sample set violates its invariants."""


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"


class Variable(str, Enum):
    X = "x"
    W = "w"
    Y = "y"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based 64-bit generator used everywhere a seed is accepted."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _check_stochastic(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} has non-finite entries")
    if np.any(arr < 0):
        raise ValidationError(f"{name} has negative entries")
    sums = arr.sum(axis=-1)
    worst = float(np.max(np.abs(sums - 1.0)))
    if worst > ROW_SUM_TOL:
        raise ValidationError(f"{name} rows do not sum to 1 (max deviation {worst:.3g})")


@dataclass(frozen=True, eq=False)
class DiscreteWorld:
    """Exact source and target distributions on finite X, W, Y.

    Conditional label tables are indexed ``[w, x, y]``.
    """

    source_px: np.ndarray
    target_px: np.ndarray
    source_pw_given_x: np.ndarray
    target_pw_given_x: np.ndarray
    source_py_given_wx: np.ndarray
    target_py_given_wx: np.ndarray
    y_values: np.ndarray | None = None

    def __post_init__(self) -> None:
        for name in (
            "source_px",
            "target_px",
            "source_pw_given_x",
            "target_pw_given_x",
            "source_py_given_wx",
            "target_py_given_wx",
        ):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        xc = self.source_px.shape[0] if self.source_px.ndim == 1 else 0
        if self.source_px.ndim != 1 or xc < 1:
            raise ValidationError("source_px must be a nonempty vector")
        wc = self.source_pw_given_x.shape[-1] if self.source_pw_given_x.ndim == 2 else 0
        yc = self.source_py_given_wx.shape[-1] if self.source_py_given_wx.ndim == 3 else 0
        if wc < 1 or yc < 1:
            raise ValidationError("cardinalities must be at least 1")
        shapes = {
            "target_px": (xc,),
            "source_pw_given_x": (xc, wc),
            "target_pw_given_x": (xc, wc),
            "source_py_given_wx": (wc, xc, yc),
            "target_py_given_wx": (wc, xc, yc),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValidationError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for name in ("source_px", "target_px", *list(shapes)[1:]):
            _check_stochastic(name, getattr(self, name))
        if self.y_values is None:
            yv = np.arange(yc, dtype=float)
        else:
            yv = np.array(self.y_values, dtype=float)
        if yv.shape != (yc,) or not np.all(np.isfinite(yv)):
            raise ValidationError("y_values must be a finite vector of length y_card")
        object.__setattr__(self, "y_values", yv)
        for name in shapes:
            getattr(self, name).setflags(write=False)
        for name in ("source_px", "y_values"):
            getattr(self, name).setflags(write=False)

    @property
    def x_card(self) -> int:
        return self.source_px.shape[0]

    @property
    def w_card(self) -> int:
        return self.source_pw_given_x.shape[1]

    @property
    def y_card(self) -> int:
        return self.source_py_given_wx.shape[2]

    def tables(self, domain: Domain | str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(P(x), P(w|x), P(y|w,x))`` for one domain."""
        if Domain(domain) is Domain.SOURCE:
            return self.source_px, self.source_pw_given_x, self.source_py_given_wx
        return self.target_px, self.target_pw_given_x, self.target_py_given_wx

    def joint(self, domain: Domain | str) -> np.ndarray:
        """Full joint ``P(x, w, y)`` with axes ``[x, w, y]``."""
        px, pwx, pywx = self.tables(domain)
        return px[:, None, None] * pwx[:, :, None] * np.transpose(pywx, (1, 0, 2))

    def marginal(self, domain: Domain | str, variable: Variable | str) -> np.ndarray:
        axis = {"x": (1, 2), "w": (0, 2), "y": (0, 1)}[Variable(variable).value]
        return self.joint(domain).sum(axis=axis)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": WORLD_FORMAT,
            "x_card": self.x_card,
            "w_card": self.w_card,
            "y_card": self.y_card,
            "source_px": self.source_px.tolist(),
            "target_px": self.target_px.tolist(),
            "source_pw_given_x": self.source_pw_given_x.tolist(),
            "target_pw_given_x": self.target_pw_given_x.tolist(),
            "source_py_given_wx": self.source_py_given_wx.tolist(),
            "target_py_given_wx": self.target_py_given_wx.tolist(),
            "y_values": self.y_values.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DiscreteWorld":
        if d.get("format") != WORLD_FORMAT:
            raise ValidationError(f"expected format {WORLD_FORMAT!r}, got {d.get('format')!r}")
        world = cls(
            source_px=d["source_px"],
            target_px=d["target_px"],
            source_pw_given_x=d["source_pw_given_x"],
            target_pw_given_x=d["target_pw_given_x"],
            source_py_given_wx=d["source_py_given_wx"],
            target_py_given_wx=d["target_py_given_wx"],
            y_values=d.get("y_values"),
        )
        if (world.x_card, world.w_card, world.y_card) != (d["x_card"], d["w_card"], d["y_card"]):
            raise ValidationError("declared cardinalities do not match the tables")
        return world


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise inverse CDF: ``probs`` is (n, k), ``u`` is (n,)."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[:, None] >= cdf).sum(axis=-1)
    # guards against cdf[-1] slightly below 1
    return np.minimum(idx, probs.shape[-1] - 1)


def sample_world(world: DiscreteWorld, domain: Domain | str, count: int, seed: int) -> np.ndarray:
    """Draw ``count`` i.i.d. ``(x, w, y)`` index triples as an ``(count, 3)`` int array."""
    if count < 0:
        raise ValueError("count must be non-negative")
    px, pwx, pywx = world.tables(domain)
    if count == 0:
        return np.zeros((0, 3), dtype=np.int64)
    u = make_rng(seed).random((count, 3))
    x = _inverse_cdf(np.broadcast_to(px, (count, px.size)), u[:, 0])
    w = _inverse_cdf(pwx[x], u[:, 1])
    y = _inverse_cdf(pywx[w, x], u[:, 2])
    return np.stack([x, w, y], axis=1).astype(np.int64)


def empirical_marginal(samples: np.ndarray, variable: Variable | str, card: int) -> np.ndarray:
    """Normalized histogram of one coordinate of an index-triple array."""
    samples = np.asarray(samples)
    if samples.size == 0:
        raise ValueError("no samples: empirical marginal undefined")
    col = samples[:, {"x": 0, "w": 1, "y": 2}[Variable(variable).value]]
    if col.min() < 0 or col.max() >= card:
        raise ValueError(f"sample indices out of range for cardinality {card}")
    counts = np.bincount(col, minlength=card).astype(float)
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# Empirical sample containers
# ---------------------------------------------------------------------------


class PIKind(str, Enum):
    BINARY_ATTRIBUTES = "binary_attributes"
    SINGLE_BOX = "single_box"
    NONE = "none"


@dataclass(frozen=True, eq=False)
class BoxPI:
    """Bounding boxes ``(x_min, y_min, x_max, y_max)`` in pixels plus enclosed patches."""

    boxes: np.ndarray
    patches: np.ndarray

    def __len__(self) -> int:
        return len(self.boxes)

    def validate(self, image_shape: tuple[int, int] | None = None) -> None:
        b = np.asarray(self.boxes, dtype=float)
        if b.ndim != 2 or b.shape[1] != 4:
            raise ValidationError("boxes must have shape (n, 4)")
        if len(self.patches) != len(b):
            raise ValidationError("one patch per box is required")
        if np.any(b[:, 0] >= b[:, 2]) or np.any(b[:, 1] >= b[:, 3]):
            raise ValidationError("boxes need x_min < x_max and y_min < y_max")
        if image_shape is not None:
            h, w = image_shape
            if np.any(b[:, :2] < 0) or np.any(b[:, 2] > w) or np.any(b[:, 3] > h):
                raise ValidationError("box extends beyond image bounds")


@dataclass(frozen=True, eq=False)
class Labeled:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.x)


@dataclass(frozen=True, eq=False)
class PIPairs:
    """Inputs with privileged information and optional labels."""

    x: np.ndarray
    w: Any
    y: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.x)


def _empty_labeled() -> Labeled:
    return Labeled(np.zeros((0, 0)), np.zeros(0, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Training and test data, one attribute per data role.

    ``source_labeled`` holds ``(x, w, y)``; ``source_pi`` holds extra source
    ``(x, w)`` pairs without labels; ``target_pi`` holds ``(x, w)`` from the
    target; ``target_labeled`` is the oracle-only labeled target training data.
    """

    pi_kind: PIKind
    pi_dim: int
    source_labeled: PIPairs
    target_pi: PIPairs
    target_unlabeled: np.ndarray
    test_source: Labeled
    test_target: Labeled
    source_pi: PIPairs | None = None
    target_labeled: Labeled | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def validate(self) -> None:
        roles = [self.source_labeled.x, self.target_pi.x, self.test_source.x, self.test_target.x]
        if self.source_pi is not None:
            roles.append(self.source_pi.x)
        if self.target_labeled is not None:
            roles.append(self.target_labeled.x)
        if len(self.target_unlabeled):
            roles.append(self.target_unlabeled)
        shapes = {np.asarray(r).shape[1:] for r in roles if len(r)}
        if len(shapes) > 1:
            raise ValidationError(f"feature shapes disagree across roles: {sorted(shapes)}")
        pis = [self.source_labeled.w, self.target_pi.w]
        if self.source_pi is not None:
            pis.append(self.source_pi.w)
        for w in pis:
            if self.pi_kind is PIKind.BINARY_ATTRIBUTES:
                w = np.asarray(w)
                if w.ndim != 2 or w.shape[1] != self.pi_dim:
                    raise ValidationError("attribute PI must have shape (n, d)")
                if not np.all((w == 0) | (w == 1)):
                    raise ValidationError("attribute PI must be exactly 0 or 1")
            elif self.pi_kind is PIKind.SINGLE_BOX:
                if not isinstance(w, BoxPI):
                    raise ValidationError("single-box PI must be a BoxPI")
                shape = next(iter(shapes)) if shapes else None
                w.validate(shape if shape is not None and len(shape) == 2 else None)

    def to_dict(self) -> dict[str, Any]:
        def enc_w(w):
            if w is None:
                return None
            if isinstance(w, BoxPI):
                return {"boxes": np.asarray(w.boxes).tolist(), "patches": np.asarray(w.patches).tolist()}
            return np.asarray(w).tolist()

        def enc_pairs(p):
            if p is None:
                return None
            return {
                "x": np.asarray(p.x).tolist(),
                "w": enc_w(p.w),
                "y": None if p.y is None else np.asarray(p.y).tolist(),
            }

        def enc_lab(lab):
            if lab is None:
                return None
            return {"x": np.asarray(lab.x).tolist(), "y": np.asarray(lab.y).tolist()}

        return {
            "format": SAMPLES_FORMAT,
            "pi_kind": self.pi_kind.value,
            "pi_dim": self.pi_dim,
            "source_labeled": enc_pairs(self.source_labeled),
            "source_pi": enc_pairs(self.source_pi),
            "target_pi": enc_pairs(self.target_pi),
            "target_unlabeled": np.asarray(self.target_unlabeled).tolist(),
            "target_labeled": enc_lab(self.target_labeled),
            "test_source": enc_lab(self.test_source),
            "test_target": enc_lab(self.test_target),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SampleSet":
        if d.get("format") != SAMPLES_FORMAT:
            raise ValidationError(f"expected format {SAMPLES_FORMAT!r}, got {d.get('format')!r}")
        kind = PIKind(d["pi_kind"])

        def dec_w(w):
            if w is None:
                return None
            if kind is PIKind.SINGLE_BOX:
                return BoxPI(np.asarray(w["boxes"], dtype=float), np.asarray(w["patches"], dtype=float))
            return np.asarray(w, dtype=np.int64)

        def dec_pairs(p):
            if p is None:
                return None
            y = None if p["y"] is None else np.asarray(p["y"], dtype=np.int64)
            return PIPairs(np.asarray(p["x"], dtype=float), dec_w(p["w"]), y)

        def dec_lab(lab):
            if lab is None:
                return None
            return Labeled(np.asarray(lab["x"], dtype=float), np.asarray(lab["y"], dtype=np.int64))

        out = cls(
            pi_kind=kind,
            pi_dim=int(d["pi_dim"]),
            source_labeled=dec_pairs(d["source_labeled"]),
            target_pi=dec_pairs(d["target_pi"]),
            target_unlabeled=np.asarray(d["target_unlabeled"], dtype=float),
            test_source=dec_lab(d["test_source"]),
            test_target=dec_lab(d["test_target"]),
            source_pi=dec_pairs(d.get("source_pi")),
            target_labeled=dec_lab(d.get("target_labeled")),
            metadata=d.get("metadata", {}),
        )
        out.validate()
        return out


def dump_json(obj: DiscreteWorld | SampleSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj.to_dict(), fh)


def load_json(path) -> DiscreteWorld | SampleSet:
    with open(path) as fh:
        d = json.load(fh)
    if d.get("format") == WORLD_FORMAT:
        return DiscreteWorld.from_dict(d)
    return SampleSet.from_dict(d)
