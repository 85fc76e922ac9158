"""Overfitting fields: truncated distance loss, attribute loss, Adam."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .field_oracle import FieldKind, truncate_target
from .neural_field import FieldModel, Gradients, encode, value_and_backward

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainingDivergence",
    "AttributeSet",
    "geometry_loss",
    "attribute_loss",
    "joint_loss",
    "adam_step",
    "fit",
]

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 500
    batch_size: int = 10_000
    lambda_l1: float = 1e-8
    lambda_a: float = 1e-3
    joint: bool = False
    param_seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    truncate: bool = True

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class AttributeSet:
    """Surface points with the color of their nearest ground-truth point."""

    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.points) != len(self.colors):
            raise ValueError("points and colors differ in length")

    def __len__(self) -> int:
        return len(self.points)


def _l1(model: FieldModel, lam: float, grads: Gradients) -> float:
    if lam == 0:
        return 0.0
    total = 0.0
    for (w, b), (gw, gb) in zip(model.layers, grads.layers):
        total += np.abs(w).sum() + np.abs(b).sum()
        gw += lam * np.sign(w)
        gb += lam * np.sign(b)
    return lam * total


def _distance_residual(pred: np.ndarray, d_s: np.ndarray, d_star: float,
                       truncate: bool) -> np.ndarray:
    if not truncate:
        return pred - d_s
    keep = (np.abs(d_s) <= d_star) | (np.abs(pred) <= d_star)
    return np.where(keep, pred - truncate_target(d_s, d_star), 0.0)


def geometry_loss(model: FieldModel, points: np.ndarray, distances: np.ndarray,
                  d_star: Optional[float] = None, lambda_l1: float = 0.0,
                  truncate: bool = True,
                  encoded: Optional[np.ndarray] = None) -> tuple[float, Gradients]:
    """Masked truncated squared error plus L1 penalty.

    ``distances`` are the raw ground-truth values; a sample is ignored when
    both it and the prediction lie beyond ``d_star``. The mean runs over the
    whole batch, masked samples counting as zeros.
    """
    d_star = model.d_star if d_star is None else d_star
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d_s = np.asarray(distances, dtype=np.float64).reshape(-1)
    n = len(points)
    resid = {}

    def cotangent(y):
        r = _distance_residual(y[:, 0], d_s, d_star, truncate)
        resid["r"] = r
        up = np.zeros_like(y)
        up[:, 0] = 2.0 * r / n
        return up

    _, grads = value_and_backward(model, points, cotangent, input_grad=False,
                                  encoded=encoded)
    r = resid["r"]
    loss = float(np.mean(r * r))
    return loss + _l1(model, lambda_l1, grads), grads


def attribute_loss(model: FieldModel, points: np.ndarray, colors: np.ndarray,
                   lambda_l1: float = 0.0,
                   encoded: Optional[np.ndarray] = None) -> tuple[float, Gradients]:
    """Mean over points of the per-point squared RGB error, plus L1 penalty."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if model.kind != FieldKind.ATTR:
        raise ValueError("attribute_loss needs an ATTR model")
    resid = {}

    def cotangent(y):
        resid["r"] = y - colors
        return 2.0 * resid["r"] / n

    _, grads = value_and_backward(model, points, cotangent, input_grad=False,
                                  encoded=encoded)
    r = resid["r"]
    loss = float(np.sum(r * r) / n)
    return loss + _l1(model, lambda_l1, grads), grads


def joint_loss(model: FieldModel, points: np.ndarray, distances: np.ndarray,
               attr_points: np.ndarray, attr_colors: np.ndarray, lambda_a: float,
               lambda_l1: float = 0.0, truncate: bool = True) -> tuple[float, Gradients]:
    """Geometry loss on channel 0 plus ``lambda_a`` times the color loss on channels 1-3."""
    if not model.joint:
        raise ValueError("joint_loss needs a 4-output joint model")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d_s = np.asarray(distances, dtype=np.float64).reshape(-1)
    n = len(points)
    loss, grads = geometry_loss(model, points, d_s, model.d_star, 0.0, truncate)
    m = len(attr_points)
    if m and lambda_a:
        resid = {}

        def cotangent(y):
            resid["r"] = y[:, 1:] - attr_colors
            up = np.zeros_like(y)
            up[:, 1:] = lambda_a * 2.0 * resid["r"] / m
            return up

        _, ga = value_and_backward(model, attr_points, cotangent, input_grad=False)
        ra = resid["r"]
        for (gw, gb), (aw, ab) in zip(grads.layers, ga.layers):
            gw += aw
            gb += ab
        loss += lambda_a * float(np.sum(ra * ra) / m)
    return loss + _l1(model, lambda_l1, grads), grads


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, model: FieldModel) -> "AdamState":
        return cls([(np.zeros_like(w), np.zeros_like(b)) for w, b in model.layers],
                   [(np.zeros_like(w), np.zeros_like(b)) for w, b in model.layers])


def _check_finite(grads: Gradients) -> None:
    for i, (gw, gb) in enumerate(grads.layers):
        bad = (~np.isfinite(gw)).sum() + (~np.isfinite(gb)).sum()
        if bad:
            raise TrainingDivergence(
                f"non-finite gradient: {bad} entries in layer {i} "
                f"(weight shape {gw.shape})")


def adam_step(model: FieldModel, grads: Gradients, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``model`` and ``state``."""
    _check_finite(grads)
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for (w, b), (gw, gb), (mw, mb), (vw, vb) in zip(model.layers, grads.layers,
                                                     state.m, state.v):
        for p, g, m, v in ((w, gw, mw, vw), (b, gb, mb, vb)):
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def epoch_order(n: int, param_seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([param_seed, epoch]).permutation(n)


def fit(model: FieldModel, data, cfg: TrainConfig, attr_data: Optional[AttributeSet] = None,
        effective: Optional[Callable[[FieldModel], FieldModel]] = None,
        project: Optional[Callable[[FieldModel], None]] = None,
        callback: Optional[Callable[[int, float], None]] = None,
        ) -> tuple[FieldModel, list]:
    """Train a copy of ``model`` and return it with the per-epoch mean loss.

    ``data`` is a :class:`TrainingSet` for distance models or an
    :class:`AttributeSet` for ATTR models. ``effective`` maps the trained
    (shadow) parameters to the ones the loss sees and gradients pass through
    it unchanged, which is how quantization-aware retraining plugs in;
    ``project`` runs after every optimizer step.
    """
    model = model.copy()
    n = len(data)
    if n == 0:
        raise ValueError("training data is empty")
    if model.joint and attr_data is None:
        raise ValueError("joint training needs attribute data")
    state = AdamState.zeros_like(model)
    history = []
    is_attr = model.kind == FieldKind.ATTR
    n_batches = -(-n // cfg.batch_size)
    # the encoding depends on the inputs only; compute it once
    enc = encode(data.points, model.encoding) if cfg.epochs else None
    for epoch in range(cfg.epochs):
        order = epoch_order(n, cfg.param_seed, epoch)
        if model.joint:
            a_order = epoch_order(len(attr_data), cfg.param_seed + 1, epoch)
            a_bs = -(-len(attr_data) // n_batches)
        total = 0.0
        for k in range(n_batches):
            idx = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            eff = effective(model) if effective is not None else model
            if is_attr:
                loss, grads = attribute_loss(eff, data.points[idx], data.colors[idx],
                                             cfg.lambda_l1, encoded=enc[idx])
            elif model.joint:
                aidx = a_order[k * a_bs:(k + 1) * a_bs]
                loss, grads = joint_loss(eff, data.points[idx], data.distances[idx],
                                         attr_data.points[aidx], attr_data.colors[aidx],
                                         cfg.lambda_a, cfg.lambda_l1, cfg.truncate)
            else:
                loss, grads = geometry_loss(eff, data.points[idx], data.distances[idx],
                                            model.d_star, cfg.lambda_l1, cfg.truncate,
                                            encoded=enc[idx])
            if not np.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}, batch {k}")
            adam_step(model, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            if project is not None:
                project(model)
            total += loss
        history.append(total / n_batches)
        if callback is not None:
            callback(epoch, history[-1])
        log.debug("epoch %d loss %.6g", epoch, history[-1])
    return model, history


def evaluate_loss(model: FieldModel, data, cfg: TrainConfig,
                  chunk: int = 50_000) -> float:
    """Full-data objective (data term averaged over every sample, plus penalty)."""
    n = len(data)
    total = 0.0
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        if model.kind == FieldKind.ATTR:
            part, _ = attribute_loss(model, data.points[sl], data.colors[sl], 0.0)
        else:
            part, _ = geometry_loss(model, data.points[sl], data.distances[sl],
                                    model.d_star, 0.0, cfg.truncate)
        total += part * len(data.points[sl])
    pen = cfg.lambda_l1 * float(np.abs(model.flat()).sum())
    return total / n + pen
