"""Two-stage estimator ``h = g o f`` and the direct supervised baselines.

``f`` maps inputs to privileged information (attribute vectors, or box
coordinates followed by a fixed crop), ``g`` maps privileged information to
labels.  The two stages are fit separately on whatever data the chosen
setting permits.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np

from .learners import Head, Loss, Predictor, TrainConfig, fit
from .world import PIKind, SampleSet

TWOSTAGE_FORMAT = "dalupi-twostage/1"


class Setting(str, Enum):
    SL_S = "SL_S"
    SL_T = "SL_T"
    LUPI = "LUPI"
    DALUPI_T = "DALUPI_T"
    DALUPI_ST = "DALUPI_ST"


TWO_STAGE_SETTINGS = (Setting.LUPI, Setting.DALUPI_T, Setting.DALUPI_ST)
BASELINE_SETTINGS = (Setting.SL_S, Setting.SL_T)


class MissingRole(ValueError):
    """A data role required by the chosen setting is absent or empty."""

    def __init__(self, setting: Setting | str, role: str):
        super().__init__(f"setting {Setting(setting).value} needs data role {role!r}, which is missing or empty")
        self.setting = Setting(setting)
        self.role = role


# ---------------------------------------------------------------------------
# Crop function
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CropSpec:
    """Image size and output patch side for nearest-neighbor cropping."""

    image_height: int
    image_width: int
    out_size: int

    def __post_init__(self) -> None:
        if self.out_size < 1:
            raise ValueError("out_size must be at least 1")
        if self.out_size > min(self.image_height, self.image_width):
            raise ValueError("out_size cannot exceed the image dimensions")

    def to_dict(self) -> dict[str, int]:
        return {"image_height": self.image_height, "image_width": self.image_width, "out_size": self.out_size}


def _clamp_interval(lo: float, hi: float, size: int) -> tuple[float, float]:
    lo, hi = min(lo, hi), max(lo, hi)
    lo, hi = float(np.clip(lo, 0, size)), float(np.clip(hi, 0, size))
    if hi - lo <= 1.0:
        mid = 0.5 * (lo + hi)
        lo, hi = mid - 1.0, mid + 1.0
        # shift the 2-px window back inside the image
        if lo < 0:
            lo, hi = 0.0, 2.0
        if hi > size:
            lo, hi = size - 2.0, float(size)
    return lo, hi


def _nn_indices(lo: float, hi: float, p: int, size: int) -> np.ndarray:
    idx = np.floor(lo + (np.arange(p) + 0.5) * (hi - lo) / p).astype(int)
    return np.clip(idx, 0, size - 1)


def crop_phi(image: np.ndarray, box, spec: CropSpec) -> np.ndarray:
    """Crop ``image`` to ``box = (x_min, y_min, x_max, y_max)`` and resize to ``p x p``.

    The box is clamped to the image; sides of at most one pixel are widened
    to two pixels around their midpoint.  Resizing is nearest-neighbor.
    """
    img = np.asarray(image, dtype=float)
    x0, y0, x1, y1 = (float(v) for v in box)
    x0, x1 = _clamp_interval(x0, x1, spec.image_width)
    y0, y1 = _clamp_interval(y0, y1, spec.image_height)
    rows = _nn_indices(y0, y1, spec.out_size, spec.image_height)
    cols = _nn_indices(x0, x1, spec.out_size, spec.image_width)
    return img[np.ix_(rows, cols)]


def crop_batch(images: np.ndarray, boxes: np.ndarray, spec: CropSpec) -> np.ndarray:
    images = np.asarray(images, dtype=float)
    out = np.empty((len(images), spec.out_size, spec.out_size))
    for i, (img, box) in enumerate(zip(images, boxes)):
        out[i] = crop_phi(img, box, spec)
    return out


def resize_patches(patches: np.ndarray, out_size: int) -> np.ndarray:
    """Nearest-neighbor resize of whole patches, the same map as a full-extent crop."""
    patches = np.asarray(patches, dtype=float)
    if len(patches) == 0:
        return np.zeros((0, out_size, out_size))
    h, w = patches.shape[1:]
    rows = _nn_indices(0, h, out_size, h)
    cols = _nn_indices(0, w, out_size, w)
    return patches[:, rows][:, :, cols]


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class TwoStageModel:
    """Composed predictor ``g(f(x))``.

    For attribute PI, ``f_hat`` outputs attribute probabilities that are
    thresholded before ``g_hat``.  For box PI, ``f_hat`` outputs box
    coordinates scaled to ``[0, 1]`` by the image size, and ``g_hat`` sees
    the crop of the predicted box.
    """

    f_hat: Predictor
    g_hat: Predictor
    pi_kind: PIKind
    crop_spec: CropSpec | None = None
    threshold: float = 0.5
    setting: Setting = Setting.DALUPI_T

    def __post_init__(self) -> None:
        self.pi_kind = PIKind(self.pi_kind)
        self.setting = Setting(self.setting)
        if self.pi_kind is PIKind.SINGLE_BOX:
            if self.crop_spec is None:
                raise ValueError("box PI needs a crop spec")
            if self.f_hat.out_dim != 4:
                raise ValueError("box regressor must output exactly 4 numbers")
            if self.g_hat.in_dim != self.crop_spec.out_size ** 2:
                raise ValueError("label model input does not match the crop size")
        elif self.f_hat.out_dim != self.g_hat.in_dim:
            raise ValueError("attribute model output does not match label model input")

    def _box_scale(self) -> np.ndarray:
        c = self.crop_spec
        return np.array([c.image_width, c.image_height, c.image_width, c.image_height], dtype=float)

    def predict_pi(self, x: np.ndarray) -> np.ndarray:
        """Intermediate PI estimate: thresholded attributes or pixel-unit boxes."""
        out = self.f_hat.predict(x)
        if self.pi_kind is PIKind.SINGLE_BOX:
            return out * self._box_scale()
        return (out >= self.threshold).astype(float)

    def g_input(self, x: np.ndarray) -> np.ndarray:
        """What ``g_hat`` sees for inputs ``x``."""
        pi = self.predict_pi(x)
        if self.pi_kind is PIKind.SINGLE_BOX:
            return crop_batch(x, pi, self.crop_spec)
        return pi

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.g_hat.predict(self.g_input(x))

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": TWOSTAGE_FORMAT,
            "pi_kind": self.pi_kind.value,
            "setting": self.setting.value,
            "threshold": self.threshold,
            "crop_spec": None if self.crop_spec is None else self.crop_spec.to_dict(),
            "f_hat": self.f_hat.to_dict(),
            "g_hat": self.g_hat.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TwoStageModel":
        if d.get("format") != TWOSTAGE_FORMAT:
            raise ValueError(f"expected format {TWOSTAGE_FORMAT!r}, got {d.get('format')!r}")
        return cls(
            f_hat=Predictor.from_dict(d["f_hat"]),
            g_hat=Predictor.from_dict(d["g_hat"]),
            pi_kind=PIKind(d["pi_kind"]),
            crop_spec=None if d["crop_spec"] is None else CropSpec(**d["crop_spec"]),
            threshold=d["threshold"],
            setting=Setting(d["setting"]),
        )


def predict(model: TwoStageModel | Predictor, x: np.ndarray) -> np.ndarray:
    """Class-probability rows for either a two-stage model or a direct classifier."""
    return model.predict(x)


def num_classes(data: SampleSet, labels: np.ndarray) -> int:
    k = data.metadata.get("num_classes")
    return int(k) if k is not None else int(np.max(labels)) + 1


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _nonempty(obj, setting: Setting, role: str):
    if obj is None or len(obj) == 0:
        raise MissingRole(setting, role)
    return obj


def _f_training_pairs(data: SampleSet, setting: Setting, source_weight: float):
    """Inputs, PI targets and per-row weights for the first stage."""
    parts = []
    if setting is Setting.LUPI:
        src = _nonempty(data.source_labeled, setting, "source_labeled")
        parts.append((src.x, src.w, 1.0))
    else:
        tgt = _nonempty(data.target_pi, setting, "target_pi")
        parts.append((tgt.x, tgt.w, 1.0))
        if setting is Setting.DALUPI_ST:
            src = _nonempty(data.source_labeled, setting, "source_labeled")
            parts.append((src.x, src.w, source_weight))
            if data.source_pi is not None and len(data.source_pi):
                parts.append((data.source_pi.x, data.source_pi.w, source_weight))
    return parts


def _pi_target(pi_kind: PIKind, w, image_shape) -> np.ndarray:
    if pi_kind is PIKind.SINGLE_BOX:
        h, wd = image_shape
        return np.asarray(w.boxes, dtype=float) / np.array([wd, h, wd, h], dtype=float)
    return np.asarray(w, dtype=float)


def fit_two_stage(data: SampleSet, setting: Setting | str, f_cfg: TrainConfig, g_cfg: TrainConfig,
                  f_hidden: int | None = 64, g_hidden: int | None = None,
                  source_weight: float = 1.0, threshold: float = 0.5,
                  crop_size: int | None = None) -> TwoStageModel:
    """Fit ``f_hat`` on the setting's PI pairs, then ``g_hat`` on source ``(w, y)``.

    Parameters
    ----------
    setting : Setting
        ``LUPI`` learns ``f`` from source pairs only, ``DALUPI_T`` from target
        pairs only, ``DALUPI_ST`` from both (source rows weighted by
        ``source_weight``).
    f_cfg, g_cfg : TrainConfig
        Stage configurations.  The loss of ``f_cfg`` is overridden to binary
        cross-entropy for attributes and squared error for boxes; ``g_cfg``
        always uses cross-entropy.
    crop_size : int, optional
        Side of the patch fed to ``g_hat``; defaults to the PI patch size.
    """
    setting = Setting(setting)
    if setting not in TWO_STAGE_SETTINGS:
        raise ValueError(f"{setting.value} is not a two-stage setting")
    if data.pi_kind is PIKind.NONE:
        raise MissingRole(setting, "privileged information")
    if source_weight < 0:
        raise ValueError("source_weight must be non-negative")

    parts = _f_training_pairs(data, setting, source_weight)
    image_shape = np.asarray(parts[0][0]).shape[1:]
    box = data.pi_kind is PIKind.SINGLE_BOX
    xs = np.concatenate([np.asarray(x, dtype=float) for x, _, _ in parts])
    ts = np.concatenate([_pi_target(data.pi_kind, w, image_shape) for _, w, _ in parts])
    wts = np.concatenate([np.full(len(x), wt, dtype=float) for x, _, wt in parts])
    in_dim = int(np.prod(image_shape))

    f_head, f_loss = (Head.IDENTITY, Loss.SQUARED_ERROR) if box else (Head.SIGMOID, Loss.BINARY_CROSS_ENTROPY)
    f_cfg = TrainConfig(**{**f_cfg.to_dict(), "loss": f_loss})
    f0 = Predictor(in_dim, ts.shape[1], hidden=f_hidden, head=f_head, seed=f_cfg.seed)
    f_hat = fit(f0, xs, ts, f_cfg, sample_weight=wts).predictor

    src = _nonempty(data.source_labeled, setting, "source_labeled")
    sw, sy = src.w, src.y
    if sy is None or len(sy) == 0:
        raise MissingRole(setting, "source_labeled.y")
    k = num_classes(data, sy)
    crop_spec = None
    if box:
        p = int(crop_size or data.pi_dim)
        crop_spec = CropSpec(image_shape[0], image_shape[1], p)
        g_in = resize_patches(sw.patches, p)
    else:
        g_in = np.asarray(sw, dtype=float)
    g_cfg = TrainConfig(**{**g_cfg.to_dict(), "loss": Loss.CROSS_ENTROPY})
    g0 = Predictor(int(np.prod(g_in.shape[1:])), k, hidden=g_hidden, head=Head.SOFTMAX, seed=g_cfg.seed + 1)
    g_hat = fit(g0, g_in, sy, g_cfg).predictor
    return TwoStageModel(f_hat, g_hat, data.pi_kind, crop_spec, threshold, setting)


def fit_baseline(data: SampleSet, setting: Setting | str, cfg: TrainConfig,
                 hidden: int | None = 64) -> Predictor:
    """Direct ``X -> Y`` classifier on source (``SL_S``) or labeled target (``SL_T``) data."""
    setting = Setting(setting)
    if setting is Setting.SL_S:
        src = _nonempty(data.source_labeled, setting, "source_labeled")
        x, y = src.x, src.y
        role = "source_labeled.y"
    elif setting is Setting.SL_T:
        tgt = _nonempty(data.target_labeled, setting, "target_labeled")
        x, y = tgt.x, tgt.y
        role = "target_labeled.y"
    else:
        raise ValueError(f"{setting.value} is not a baseline setting")
    if y is None or len(y) == 0:
        raise MissingRole(setting, role)
    x = np.asarray(x, dtype=float)
    cfg = TrainConfig(**{**cfg.to_dict(), "loss": Loss.CROSS_ENTROPY})
    p0 = Predictor(int(np.prod(x.shape[1:])), num_classes(data, y), hidden=hidden, head=Head.SOFTMAX, seed=cfg.seed)
    return fit(p0, x, y, cfg).predictor
