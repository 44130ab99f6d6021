"""Small differentiable predictors trained with mini-batch SGD.

Everything is plain numpy with hand-written backpropagation so that the
gradients can be audited against finite differences (:func:`grad_check`).
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from .world import make_rng

logger = logging.getLogger(__name__)

MODEL_FORMAT = "dalupi-model/1"


class Head(str, Enum):
    IDENTITY = "identity"
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"


class Loss(str, Enum):
    SQUARED_ERROR = "squared_error"
    CROSS_ENTROPY = "cross_entropy"
    BINARY_CROSS_ENTROPY = "binary_cross_entropy"


class TrainingDiverged(FloatingPointError):
    pass


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


class Predictor:
    """Linear map or one-hidden-layer ReLU network with an output head.

    Parameters
    ----------
    in_dim, out_dim : int
        Input and output dimensions.  Inputs with more than one trailing
        axis (images) are flattened.
    hidden : int or None
        Hidden width; ``None`` gives a linear predictor.
    head : Head
        Output nonlinearity applied by :meth:`predict`.
    seed : int
        Seed for the Glorot-uniform initialization.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None,
                 head: Head | str = Head.IDENTITY, seed: int = 0):
        if in_dim < 1 or out_dim < 1 or (hidden is not None and hidden < 1):
            raise ValueError("dimensions must be positive")
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.hidden = None if hidden is None else int(hidden)
        self.head = Head(head)
        rng = make_rng(seed)
        dims = [self.in_dim, self.out_dim] if hidden is None else [self.in_dim, self.hidden, self.out_dim]
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            self.params.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    @property
    def architecture(self) -> str:
        return "linear" if self.hidden is None else "mlp"

    @property
    def weight_matrices(self) -> list[np.ndarray]:
        return self.params[0::2]

    @property
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params))

    def copy(self) -> "Predictor":
        return copy.deepcopy(self)

    def _flatten(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :] if self.in_dim > 1 or x.size == 1 else x[:, None]
        x = x.reshape(len(x), -1)
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} input features, got {x.shape[1]}")
        return x

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Pre-head outputs and the activations needed for backprop."""
        x = self._flatten(x)
        if self.hidden is None:
            w, b = self.params
            return x @ w + b, [x]
        w1, b1, w2, b2 = self.params
        pre = x @ w1 + b1
        act = np.maximum(pre, 0.0)
        return act @ w2 + b2, [x, pre, act]

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def predict(self, x: np.ndarray) -> np.ndarray:
        z = self.logits(x)
        if self.head is Head.SOFTMAX:
            return _softmax(z)
        if self.head is Head.SIGMOID:
            return _sigmoid(z)
        return z

    def backward(self, cache: list[np.ndarray], dz: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients given ``dL/d(pre-head output)``."""
        if self.hidden is None:
            (x,) = cache
            return [x.T @ dz, dz.sum(axis=0)]
        x, pre, act = cache
        w2 = self.params[2]
        dact = dz @ w2.T
        dpre = dact * (pre > 0)
        return [x.T @ dpre, dpre.sum(axis=0), act.T @ dz, dz.sum(axis=0)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": MODEL_FORMAT,
            "architecture": self.architecture,
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "hidden": self.hidden,
            "activation": None if self.hidden is None else "relu",
            "head": self.head.value,
            "weights": [p.ravel().tolist() for p in self.params],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Predictor":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError(f"expected format {MODEL_FORMAT!r}, got {d.get('format')!r}")
        p = cls(d["in_dim"], d["out_dim"], d["hidden"], d["head"])
        p.params = [np.asarray(flat, dtype=float).reshape(ref.shape) for flat, ref in zip(d["weights"], p.params)]
        return p


def _as_targets(p: Predictor, loss: Loss, target: np.ndarray) -> np.ndarray:
    t = np.asarray(target)
    if loss is Loss.CROSS_ENTROPY and t.ndim == 1:
        t = np.eye(p.out_dim)[t.astype(int)]
    t = np.asarray(t, dtype=float)
    if t.ndim == 1:
        t = t[:, None]
    if t.shape[1] != p.out_dim:
        raise ValueError(f"targets have {t.shape[1]} columns, predictor outputs {p.out_dim}")
    return t


def _rows(p: Predictor, loss: Loss, z: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row loss values and ``dL/dz`` for each row."""
    if loss is Loss.CROSS_ENTROPY:
        if p.head is not Head.SOFTMAX:
            raise ValueError("cross-entropy requires the softmax head")
        logp = _log_softmax(z)
        per_row = -(t * logp).sum(axis=1)
        dz = np.exp(logp) * t.sum(axis=1, keepdims=True) - t
    elif loss is Loss.BINARY_CROSS_ENTROPY:
        if p.head is not Head.SIGMOID:
            raise ValueError("binary cross-entropy requires the sigmoid head")
        # log(1 + e^z) - t z, computed stably
        per_row = (np.logaddexp(0.0, z) - t * z).sum(axis=1)
        dz = _sigmoid(z) - t
    else:
        if p.head is Head.SOFTMAX:
            out = _softmax(z)
            g = 2.0 * (out - t)
            dz = out * (g - (g * out).sum(axis=1, keepdims=True))
        elif p.head is Head.SIGMOID:
            out = _sigmoid(z)
            dz = 2.0 * (out - t) * out * (1.0 - out)
        else:
            out = z
            dz = 2.0 * (out - t)
        per_row = ((out - t) ** 2).sum(axis=1)
    return per_row, dz


def per_example_loss(p: Predictor, loss: Loss | str, x: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Loss of every row, same conventions as :func:`loss_and_grad`."""
    loss = Loss(loss)
    return _rows(p, loss, p.logits(x), _as_targets(p, loss, target))[0]


def loss_and_grad(p: Predictor, loss: Loss | str, x: np.ndarray, target: np.ndarray,
                  sample_weight: np.ndarray | None = None, need_grad: bool = True):
    """Weighted mean loss over rows and its gradient w.r.t. every parameter.

    Squared error is the per-row sum of squared differences between the
    head output and the target; it works with every head.  Cross-entropy
    needs the softmax head and binary cross-entropy the sigmoid head.
    """
    loss = Loss(loss)
    t = _as_targets(p, loss, target)
    z, cache = p.forward(x)
    n = len(z)
    wts = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    scale = wts / wts.sum()
    per_row, dz = _rows(p, loss, z, t)
    value = float(scale @ per_row)
    if not need_grad:
        return value, None
    return value, p.backward(cache, dz * scale[:, None])


@dataclass
class TrainConfig:
    loss: Loss | str = Loss.CROSS_ENTROPY
    learning_rate: float = 0.1
    epochs: int = 100
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0
    early_stop_patience: int = 10
    validation_fraction: float = 0.0

    def __post_init__(self) -> None:
        self.loss = Loss(self.loss)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")

    def to_dict(self) -> dict[str, Any]:
        d = dict(self.__dict__)
        d["loss"] = self.loss.value
        return d


@dataclass
class FitResult:
    predictor: Predictor
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def fit(p: Predictor, x: np.ndarray, target: np.ndarray, cfg: TrainConfig,
        sample_weight: np.ndarray | None = None) -> FitResult:
    """Train a copy of ``p`` by mini-batch SGD with decoupled weight decay.

    When ``cfg.validation_fraction > 0`` a seeded split is held out, training
    stops after ``early_stop_patience`` epochs without validation improvement,
    and the returned predictor carries the best-validation weights.  The
    recorded training loss is evaluated on the full training split after
    each epoch.
    """
    x = p._flatten(x)
    target = np.asarray(target)
    n = len(x)
    if n == 0:
        raise ValueError("cannot fit on empty data")
    if len(target) != n:
        raise ValueError("inputs and targets differ in length")
    wts = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    rng = make_rng(cfg.seed)
    model = p.copy()

    idx = np.arange(n)
    n_val = int(round(cfg.validation_fraction * n))
    if n_val > 0 and n - n_val >= 1:
        perm = rng.permutation(n)
        val_idx, idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    else:
        val_idx = idx[:0]

    xt, tt, wt = x[idx], target[idx], wts[idx]
    result = FitResult(model)
    best = np.inf
    best_params = [q.copy() for q in model.params]
    bad_epochs = 0
    # overflow shows up as a non-finite loss, which is reported below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(xt))
            for start in range(0, len(order), cfg.batch_size):
                b = order[start:start + cfg.batch_size]
                value, grads = loss_and_grad(model, cfg.loss, xt[b], tt[b], wt[b])
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}; learning_rate={cfg.learning_rate} is the likely cause"
                    )
                for i, (q, g) in enumerate(zip(model.params, grads)):
                    q -= cfg.learning_rate * g
                    if cfg.weight_decay and i % 2 == 0:
                        q -= cfg.learning_rate * cfg.weight_decay * q
            train_loss = loss_and_grad(model, cfg.loss, xt, tt, wt, need_grad=False)[0]
            if not np.isfinite(train_loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; learning_rate={cfg.learning_rate} is the likely cause"
                )
            result.train_losses.append(train_loss)
            if len(val_idx):
                val_loss = loss_and_grad(model, cfg.loss, x[val_idx], target[val_idx], wts[val_idx],
                                         need_grad=False)[0]
                result.val_losses.append(val_loss)
                if val_loss < best:
                    best, bad_epochs = val_loss, 0
                    best_params = [q.copy() for q in model.params]
                    result.best_epoch = epoch
                else:
                    bad_epochs += 1
                    if bad_epochs >= cfg.early_stop_patience:
                        result.stopped_early = True
                        break
            else:
                result.best_epoch = epoch
    if len(val_idx):
        model.params = best_params
    return result


def grad_check(p: Predictor, loss: Loss | str, x: np.ndarray, target: np.ndarray,
               epsilon: float = 1e-5) -> float:
    """Max relative disagreement between analytic and central-difference gradients.

    The default step sits near the cube root of machine precision, which
    balances truncation error against roundoff for central differences.
    """
    if not 1e-8 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-8, 1e-3]")
    _, grads = loss_and_grad(p, loss, x, target)
    worst = 0.0
    for q, g in zip(p.params, grads):
        flat, gflat = q.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + epsilon
            up = loss_and_grad(p, loss, x, target, need_grad=False)[0]
            flat[i] = old - epsilon
            down = loss_and_grad(p, loss, x, target, need_grad=False)[0]
            flat[i] = old
            num = (up - down) / (2 * epsilon)
            rel = abs(gflat[i] - num) / max(1e-12, abs(gflat[i]) + abs(num))
            worst = max(worst, rel)
    return worst


class LipschitzMethod(str, Enum):
    WEIGHT_PRODUCT_UPPER = "weight_product_upper"
    EMPIRICAL_PAIRWISE = "empirical_pairwise"


@dataclass(frozen=True)
class LipschitzEstimate:
    m_hat: float
    method: LipschitzMethod


_HEAD_LIPSCHITZ = {Head.IDENTITY: 1.0, Head.SOFTMAX: 1.0, Head.SIGMOID: 0.25}


def estimate_lipschitz(p: Predictor, probe: np.ndarray | None = None,
                       method: LipschitzMethod | str = LipschitzMethod.WEIGHT_PRODUCT_UPPER) -> LipschitzEstimate:
    """Lipschitz constant of ``p.predict`` in the Euclidean norm.

    The weight-product bound multiplies exact spectral norms of the layer
    matrices (ReLU is 1-Lipschitz) and the head's own constant.  The
    pairwise estimate is the largest output/input distance ratio over probe
    pairs, a lower bound on the true constant.
    """
    method = LipschitzMethod(method)
    if method is LipschitzMethod.WEIGHT_PRODUCT_UPPER:
        m = _HEAD_LIPSCHITZ[p.head]
        for w in p.weight_matrices:
            m *= float(np.linalg.norm(w, 2))
        return LipschitzEstimate(m, method)
    if probe is None or len(probe) < 2:
        raise ValueError("pairwise Lipschitz estimate needs at least two probe points")
    xin = p._flatten(probe)
    out = p.predict(xin)
    din = np.linalg.norm(xin[:, None, :] - xin[None, :, :], axis=-1)
    dout = np.linalg.norm(out[:, None, :] - out[None, :, :], axis=-1)
    mask = din > 0
    m = float(np.max(dout[mask] / din[mask])) if mask.any() else 0.0
    return LipschitzEstimate(m, method)


def accuracy(p: Predictor, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(p.predict(x), axis=1) == np.asarray(y)))
