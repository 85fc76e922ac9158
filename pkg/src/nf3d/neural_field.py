"""Sinusoidal MLP fields with positional encoding and hand-written reverse mode.

Layout: ``encode(x) -> [sin(omega0 * (W h + b))] * num_hidden -> W h + b -> head``.
All arithmetic is float64; ``forward``/``backward`` accept a single point of
shape (3,) or a batch of shape (n, 3).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from .field_oracle import FieldKind

__all__ = [
    "Head",
    "EncodingConfig",
    "FieldModel",
    "Gradients",
    "encode",
    "encode_grad",
    "init_params",
    "forward",
    "backward",
    "value_and_backward",
    "evaluate_lattice",
    "WIDTHS",
]

WIDTHS = (16, 24, 32, 48, 64, 96)


class Head(str, Enum):
    ABS = "abs"
    RELU = "relu"
    IDENTITY = "identity"


_DEFAULT_HEAD = {FieldKind.UDF: Head.ABS, FieldKind.SDF: Head.IDENTITY,
                 FieldKind.ATTR: Head.IDENTITY}


@dataclass(frozen=True)
class EncodingConfig:
    levels: int = 16
    sigma_p: float = 1.4

    def __post_init__(self):
        if self.levels < 0:
            raise ValueError("levels must be >= 0")
        if not self.sigma_p > 0:
            raise ValueError("sigma_p must be positive")

    @property
    def dim(self) -> int:
        return 3 * (1 + 2 * self.levels)

    @property
    def frequencies(self) -> np.ndarray:
        return np.pi * self.sigma_p ** np.arange(self.levels, dtype=np.float64)


@dataclass
class FieldModel:
    kind: FieldKind
    encoding: EncodingConfig
    layers: list  # [(W (out, in), b (out,)), ...]
    omega0: float = 30.0
    d_star: float = 0.1
    head: Optional[Head] = None
    joint: bool = False

    def __post_init__(self):
        self.kind = FieldKind(self.kind)
        self.head = Head(self.head) if self.head is not None else _DEFAULT_HEAD[self.kind]
        if self.joint and self.kind == FieldKind.ATTR:
            raise ValueError("joint models carry a distance channel; kind must be UDF or SDF")
        if self.layers and self.layers[0][0].shape[1] != self.encoding.dim:
            raise ValueError(
                f"first layer expects {self.layers[0][0].shape[1]} inputs, "
                f"encoding produces {self.encoding.dim}")

    @property
    def num_hidden(self) -> int:
        return len(self.layers) - 1

    @property
    def hidden_width(self) -> int:
        return self.layers[0][0].shape[0] if self.num_hidden else 0

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    def with_flat(self, theta: np.ndarray) -> "FieldModel":
        layers, k = [], 0
        for w, b in self.layers:
            nw = theta[k:k + w.size].reshape(w.shape)
            k += w.size
            nb = theta[k:k + b.size].copy()
            k += b.size
            layers.append((nw.copy(), nb))
        return replace(self, layers=layers)

    def copy(self) -> "FieldModel":
        return replace(self, layers=[(w.copy(), b.copy()) for w, b in self.layers])


@dataclass
class Gradients:
    layers: list
    input: Optional[np.ndarray] = field(default=None)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])


def output_dim(kind: FieldKind, joint: bool = False) -> int:
    if joint:
        return 4
    return 3 if FieldKind(kind) == FieldKind.ATTR else 1


def encode(x: np.ndarray, cfg: EncodingConfig) -> np.ndarray:
    """Per-coordinate ``(p, sin(f_0 p), cos(f_0 p), ...)`` blocks, x|y|z concatenated."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = x.reshape(-1, 3)
    arg = x[:, :, None] * cfg.frequencies
    sc = np.stack([np.sin(arg), np.cos(arg)], axis=-1).reshape(len(x), 3, 2 * cfg.levels)
    out = np.concatenate([x[:, :, None], sc], axis=2).reshape(len(x), cfg.dim)
    return out[0] if single else out


def encode_grad(x: np.ndarray, g_enc: np.ndarray, cfg: EncodingConfig) -> np.ndarray:
    """Pull a cotangent on ``encode(x)`` back to ``x``."""
    x = x.reshape(-1, 3)
    g = g_enc.reshape(len(x), 3, 1 + 2 * cfg.levels)
    f = cfg.frequencies
    arg = x[:, :, None] * f
    g_sin = g[:, :, 1::2]
    g_cos = g[:, :, 2::2]
    return g[:, :, 0] + np.sum(f * (g_sin * np.cos(arg) - g_cos * np.sin(arg)), axis=2)


def init_params(kind: FieldKind, width: int, encoding: EncodingConfig = EncodingConfig(),
                num_hidden: int = 2, seed: int = 0, omega0: float = 30.0,
                d_star: float = 0.1, head: Optional[Head] = None,
                joint: bool = False) -> FieldModel:
    """Sinusoidal-network initialization, deterministic in ``seed``.

    First layer ``U(-1/fan_in, 1/fan_in)``, later layers
    ``U(-sqrt(6/fan_in)/omega0, sqrt(6/fan_in)/omega0)``, zero biases.
    """
    rng = np.random.default_rng(seed)
    dims = [encoding.dim] + [width] * num_hidden + [output_dim(kind, joint)]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / fan_in if i == 0 else np.sqrt(6.0 / fan_in) / omega0
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append((w, np.zeros(fan_out)))
    return FieldModel(kind, encoding, layers, omega0=omega0, d_star=d_star,
                      head=head, joint=joint)


def _apply_head(model: FieldModel, z: np.ndarray) -> np.ndarray:
    if model.kind == FieldKind.ATTR:
        return z
    out = z.copy()
    d = z[:, 0]
    if model.head == Head.ABS:
        out[:, 0] = np.abs(d)
    elif model.head == Head.RELU:
        out[:, 0] = np.maximum(d, 0.0)
    return out


def _head_grad(model: FieldModel, z: np.ndarray, up: np.ndarray) -> np.ndarray:
    if model.kind == FieldKind.ATTR or model.head == Head.IDENTITY:
        return up
    g = up.copy()
    d = z[:, 0]
    if model.head == Head.ABS:
        g[:, 0] *= np.sign(d)
    else:
        g[:, 0] *= (d > 0)
    return g


def _run(model: FieldModel, x: np.ndarray, encoded: Optional[np.ndarray] = None):
    h = encode(x, model.encoding) if encoded is None else encoded
    acts = [h]
    pre = []
    for w, b in model.layers[:-1]:
        a = h @ w.T + b
        pre.append(a)
        h = np.sin(model.omega0 * a)
        acts.append(h)
    w, b = model.layers[-1]
    z = h @ w.T + b
    return z, pre, acts


def _shape_out(model: FieldModel, y: np.ndarray, single: bool):
    if model.out_dim == 1:
        y = y[:, 0]
    return y[0] if single else y


def forward(model: FieldModel, x: np.ndarray) -> np.ndarray:
    """Field value(s): scalar distances, RGB triples, or 4-vectors for joint models."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    z, _, _ = _run(model, x.reshape(-1, 3))
    return _shape_out(model, _apply_head(model, z), single)


def forward_pre(model: FieldModel, x: np.ndarray) -> np.ndarray:
    """Output pre-activations, before the head."""
    x = np.asarray(x, dtype=np.float64)
    z, _, _ = _run(model, x.reshape(-1, 3))
    return _shape_out(model, z, x.ndim == 1)


def value_and_backward(model: FieldModel, x: np.ndarray, upstream,
                       input_grad: bool = True,
                       encoded: Optional[np.ndarray] = None) -> tuple[np.ndarray, Gradients]:
    """Forward pass plus gradients of ``sum(output * upstream)``.

    ``upstream`` may be a callable receiving the (n, out_dim) outputs, for
    cotangents that depend on the prediction. Parameter gradients are
    summed over the batch in a fixed order; the input gradient has one row
    per point. ``abs`` uses ``sign(0) = 0``. ``encoded`` lets callers reuse a
    precomputed ``encode(x)``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x.reshape(-1, 3)
    z, pre, acts = _run(model, xb, encoded)
    y = _apply_head(model, z)
    if callable(upstream):
        upstream = upstream(y)
    up = np.asarray(upstream, dtype=np.float64).reshape(len(xb), model.out_dim)
    g = _head_grad(model, z, up)
    grads = []
    w, _ = model.layers[-1]
    grads.append((g.T @ acts[-1], g.sum(axis=0)))
    gh = g @ w
    for i in range(len(model.layers) - 2, -1, -1):
        w, _ = model.layers[i]
        ga = gh * model.omega0 * np.cos(model.omega0 * pre[i])
        grads.append((ga.T @ acts[i], ga.sum(axis=0)))
        if i or input_grad:
            gh = ga @ w
    grads.reverse()
    gin = encode_grad(xb, gh, model.encoding) if input_grad else None
    if single and gin is not None:
        gin = gin[0]
    return _shape_out(model, y, single), Gradients(grads, gin)


def backward(model: FieldModel, x: np.ndarray, upstream) -> Gradients:
    """Gradients of ``sum(output * upstream)`` w.r.t. parameters and input."""
    return value_and_backward(model, x, upstream)[1]


def _axis_tables(model: FieldModel, coords: np.ndarray):
    """Per-axis contributions of the first layer on a tensor-product lattice."""
    cfg = model.encoding
    blk = 1 + 2 * cfg.levels
    w0, b0 = model.layers[0]
    enc = encode(np.repeat(coords[:, None], 3, axis=1), cfg).reshape(len(coords), 3, blk)[:, 0]
    f = cfg.frequencies
    arg = coords[:, None] * f
    denc = np.empty((len(coords), blk))
    denc[:, 0] = 1.0
    denc[:, 1::2] = f * np.cos(arg)
    denc[:, 2::2] = -f * np.sin(arg)
    pre = [enc @ w0[:, a * blk:(a + 1) * blk].T for a in range(3)]
    dpre = [denc @ w0[:, a * blk:(a + 1) * blk].T for a in range(3)]
    return pre, dpre, b0


def evaluate_lattice(model: FieldModel, coords: np.ndarray, with_gradients: bool = False):
    """Evaluate a scalar field on the lattice ``coords^3``, one x-slab at a time.

    The first layer is separable over the three axes, so the encoding is only
    computed for the 1-D coordinate list. Yields ``(i, values (r, r),
    gradients (r, r, 3) or None)`` with axes ordered (y, z).
    """
    if model.out_dim != 1 and not model.joint:
        raise ValueError("lattice evaluation needs a scalar field")
    r = len(coords)
    (ax, ay, az), (dx, dy, dz), b0 = _axis_tables(model, coords)
    yz = (ay[:, None, :] + az[None, :, :] + b0).reshape(r * r, -1)
    for i in range(r):
        a = yz + ax[i]
        pre = [a]
        h = np.sin(model.omega0 * a)
        acts = [h]
        for w, b in model.layers[1:-1]:
            a = h @ w.T + b
            pre.append(a)
            h = np.sin(model.omega0 * a)
            acts.append(h)
        w, b = model.layers[-1]
        z = (h @ w[:1].T + b[:1])
        vals = _apply_head(model, z)[:, 0]
        grads = None
        if with_gradients:
            g = _head_grad(model, z, np.ones_like(z))
            gh = g @ w[:1]
            for k in range(len(pre) - 1, -1, -1):
                ga = gh * model.omega0 * np.cos(model.omega0 * pre[k])
                if k:
                    gh = ga @ model.layers[k][0]
            ga = ga.reshape(r, r, -1)
            grads = np.stack([
                ga @ dx[i],
                np.einsum("jkw,jw->jk", ga, dy),
                np.einsum("jkw,kw->jk", ga, dz),
            ], axis=-1)
        yield i, vals.reshape(r, r), grads
