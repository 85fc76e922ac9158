"""Per-layer uniform quantization, quantization-aware retraining and the NF3D bitstream."""

from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .field_oracle import FieldKind
from .geometry_io import Normalization
from .neural_field import _DEFAULT_HEAD, EncodingConfig, FieldModel, output_dim
from .training import TrainConfig, evaluate_loss, fit

__all__ = [
    "QuantizedModel",
    "CompressedField",
    "BitstreamError",
    "ChecksumError",
    "quantize",
    "dequantize",
    "quantize_with",
    "qat_retrain",
    "entropy_encode",
    "entropy_decode",
    "compress_pipeline",
    "QAT_DEFAULTS",
]

log = logging.getLogger(__name__)

MAGIC = b"NF3D"
VERSION = 1
# kinds 3 and 4 extend the format with jointly trained geometry + color models
_KIND_CODE = {(FieldKind.UDF, False): 0, (FieldKind.SDF, False): 1, (FieldKind.ATTR, False): 2,
              (FieldKind.UDF, True): 3, (FieldKind.SDF, True): 4}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}
_HEAD = struct.Struct("<4sBBBBHBfff3ffB")
_LAYER = struct.Struct("<fI")

QAT_DEFAULTS = TrainConfig(lr=1e-7, epochs=50)


class BitstreamError(ValueError):
    """Malformed or unsupported NF3D data."""


class ChecksumError(BitstreamError):
    """CRC32 mismatch: the stream was corrupted."""


def _levels(bitwidth: int) -> int:
    return 2 ** bitwidth - 1


@dataclass
class QuantizedModel:
    """Integer indices per layer on a symmetric grid of spacing ``s_l``.

    ``peaks`` holds each layer's largest magnitude; the step is
    ``s_l = peak / (2^b - 1)`` and a parameter is restored as
    ``peak * (k / (2^b - 1))``, so the extreme element comes back exactly.
    """

    indices: list  # [(K_w (out, in) int64, K_b (out,) int64), ...]
    peaks: np.ndarray
    bitwidth: int
    template: FieldModel  # architecture and metadata, parameters unused

    @property
    def scales(self) -> np.ndarray:
        return self.peaks / _levels(self.bitwidth)

    def flat_indices(self) -> np.ndarray:
        return np.concatenate([np.concatenate([kw.ravel(), kb]) for kw, kb in self.indices])


def _round_half_away(x: np.ndarray) -> np.ndarray:
    a = np.abs(x)
    f = np.floor(a)
    return np.sign(x) * (f + (a - f >= 0.5))


def _check_bitwidth(b: int) -> None:
    if not (isinstance(b, (int, np.integer)) and 2 <= b <= 16):
        raise ValueError(f"bitwidth must be an integer in [2, 16], got {b!r}")


def _index_layer(w: np.ndarray, bias: np.ndarray, peak: float, n: int):
    if peak == 0:
        return np.zeros(w.shape, np.int64), np.zeros(bias.shape, np.int64)
    s = peak / n
    kw = np.clip(_round_half_away(w / s), -n, n).astype(np.int64)
    kb = np.clip(_round_half_away(bias / s), -n, n).astype(np.int64)
    return kw, kb


def quantize(model: FieldModel, bitwidth: int = 8) -> QuantizedModel:
    """Quantize every layer (weights and biases together) with its own step size."""
    _check_bitwidth(bitwidth)
    for w, b in model.layers:
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("cannot quantize non-finite parameters")
    peaks = np.array([max(np.abs(w).max(initial=0.0), np.abs(b).max(initial=0.0))
                      for w, b in model.layers])
    return quantize_with(model, peaks, bitwidth)


def quantize_with(model: FieldModel, peaks: np.ndarray, bitwidth: int) -> QuantizedModel:
    """Quantize on a fixed grid; values beyond a layer's peak are clamped."""
    n = _levels(bitwidth)
    idx = [_index_layer(w, b, float(p), n) for (w, b), p in zip(model.layers, peaks)]
    return QuantizedModel(idx, np.asarray(peaks, dtype=np.float64), bitwidth, model)


def dequantize(q: QuantizedModel) -> FieldModel:
    n = _levels(q.bitwidth)
    layers = [(p * (kw / n), p * (kb / n)) for (kw, kb), p in zip(q.indices, q.peaks)]
    return replace(q.template, layers=layers)


def qat_retrain(model: FieldModel, q_grid: QuantizedModel, data,
                cfg: TrainConfig = QAT_DEFAULTS, attr_data=None,
                keep_better: bool = True) -> FieldModel:
    """Fine-tune full-precision shadow weights through a fixed quantization grid.

    The forward pass sees the quantized weights; gradients pass the rounding
    unchanged (straight-through). Shadow weights are clamped to each layer's
    grid range after every step. If retraining raised the training loss of
    the quantized model, the starting weights are returned instead (unless
    ``keep_better`` is False).
    """
    peaks, b = q_grid.peaks, q_grid.bitwidth

    def effective(m: FieldModel) -> FieldModel:
        return dequantize(quantize_with(m, peaks, b))

    def project(m: FieldModel) -> None:
        for (w, bias), p in zip(m.layers, peaks):
            np.clip(w, -p, p, out=w)
            np.clip(bias, -p, p, out=bias)

    start = model.copy()
    project(start)
    shadow, _ = fit(start, data, cfg, attr_data=attr_data, effective=effective,
                    project=project)
    if not keep_better:
        return shadow
    before = evaluate_loss(effective(start), data, cfg)
    after = evaluate_loss(effective(shadow), data, cfg)
    log.debug("qat loss %.9g -> %.9g", before, after)
    return shadow if after <= before else start


def _pack(indices: np.ndarray, bitwidth: int) -> bytes:
    nbytes = math.ceil((bitwidth + 1) / 8)
    if nbytes == 1:
        return indices.astype("<i1").tobytes()
    if nbytes == 2:
        return indices.astype("<i2").tobytes()
    raw = indices.astype("<i4").view(np.uint8).reshape(-1, 4)
    return raw[:, :nbytes].tobytes()


def _unpack(buf: bytes, count: int, bitwidth: int) -> np.ndarray:
    nbytes = math.ceil((bitwidth + 1) / 8)
    if len(buf) != count * nbytes:
        raise BitstreamError(f"payload holds {len(buf)} bytes, expected {count * nbytes}")
    if nbytes == 1:
        return np.frombuffer(buf, "<i1").astype(np.int64)
    if nbytes == 2:
        return np.frombuffer(buf, "<i2").astype(np.int64)
    raw = np.frombuffer(buf, np.uint8).reshape(-1, nbytes)
    wide = np.zeros((count, 4), np.uint8)
    wide[:, :nbytes] = raw
    wide[:, nbytes:] = np.where(raw[:, -1:] & 0x80, 0xFF, 0)
    return wide.view("<i4").ravel().astype(np.int64)


def _deflate(data: bytes) -> bytes:
    c = zlib.compressobj(9, zlib.DEFLATED, -15)
    return c.compress(data) + c.flush()


def _inflate(data: bytes) -> bytes:
    d = zlib.decompressobj(-15)
    try:
        out = d.decompress(data) + d.flush()
    except zlib.error as exc:
        raise BitstreamError(f"payload is not valid DEFLATE data: {exc}") from None
    if not d.eof or d.unused_data:
        raise BitstreamError("DEFLATE payload is truncated or has trailing bytes")
    return out


@dataclass(frozen=True)
class CompressedField:
    """A serialized NF3D stream."""

    data: bytes

    @property
    def total_size_bytes(self) -> int:
        return len(self.data)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.data)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CompressedField":
        return cls(Path(path).read_bytes())


def entropy_encode(q: QuantizedModel, norm: Optional[Normalization] = None) -> CompressedField:
    """Serialize ``q`` and the input normalization into the NF3D layout."""
    t = q.template
    if t.head != _DEFAULT_HEAD[t.kind]:
        raise BitstreamError(f"the bitstream has no field for a {t.head.value!r} head")
    norm = norm or Normalization.identity()
    if t.num_hidden > 255 or t.hidden_width > 65535 or t.encoding.levels > 255:
        raise BitstreamError("architecture does not fit the header fields")
    d_star = 0.0 if t.kind == FieldKind.ATTR else t.d_star
    head = _HEAD.pack(MAGIC, VERSION, _KIND_CODE[(t.kind, t.joint)], q.bitwidth,
                      t.num_hidden, t.hidden_width, t.encoding.levels,
                      t.encoding.sigma_p, t.omega0, d_star,
                      *np.asarray(norm.center, dtype=np.float64), float(norm.scale),
                      len(q.indices))
    layers = b"".join(_LAYER.pack(s, kw.size + kb.size)
                      for s, (kw, kb) in zip(q.scales, q.indices))
    payload = _deflate(_pack(q.flat_indices(), q.bitwidth))
    body = head + layers + struct.pack("<I", len(payload)) + payload
    return CompressedField(body + struct.pack("<I", zlib.crc32(body)))


def _shapes(kind: FieldKind, joint: bool, num_hidden: int, width: int, in_dim: int):
    out = output_dim(kind, joint)
    dims = [in_dim] + [width] * num_hidden + [out]
    return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


def entropy_decode(cf: Union[CompressedField, bytes]) -> tuple[QuantizedModel, Normalization]:
    """Parse and verify an NF3D stream; raises :class:`BitstreamError` on bad data."""
    data = cf.data if isinstance(cf, CompressedField) else bytes(cf)
    if len(data) < _HEAD.size + 8:
        raise BitstreamError(f"stream too short ({len(data)} bytes)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("CRC32 mismatch: stream is corrupted")
    (magic, version, code, bitwidth, num_hidden, width, levels, sigma_p, omega0, d_star,
     cx, cy, cz, scale, num_layers) = _HEAD.unpack_from(body, 0)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}")
    if code not in _CODE_KIND:
        raise BitstreamError(f"unknown field kind code {code}")
    try:
        _check_bitwidth(bitwidth)
    except ValueError as exc:
        raise BitstreamError(str(exc)) from None
    kind, joint = _CODE_KIND[code]
    if num_layers != num_hidden + 1 or (num_hidden and width == 0):
        raise BitstreamError("layer count does not match the architecture")
    pos = _HEAD.size
    table = []
    for _ in range(num_layers):
        table.append(_LAYER.unpack_from(body, pos))
        pos += _LAYER.size
    (plen,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if pos + plen != len(body):
        raise BitstreamError("payload length does not match the stream size")
    try:
        encoding = EncodingConfig(levels=levels, sigma_p=float(sigma_p))
    except ValueError as exc:
        raise BitstreamError(str(exc)) from None
    shapes = _shapes(kind, joint, num_hidden, width, encoding.dim)
    counts = [c for _, c in table]
    if counts != [o * i + o for o, i in shapes]:
        raise BitstreamError("per-layer index counts do not match the architecture")
    flat = _unpack(_inflate(body[pos:]), sum(counts), bitwidth)
    n = _levels(bitwidth)
    if np.any(np.abs(flat) > n):
        raise BitstreamError("index outside the grid range")
    indices, layers, off = [], [], 0
    for (o, i), c in zip(shapes, counts):
        chunk = flat[off:off + c]
        off += c
        indices.append((chunk[:o * i].reshape(o, i), chunk[o * i:]))
        layers.append((np.zeros((o, i)), np.zeros(o)))
    steps = np.array([s for s, _ in table], dtype=np.float64)
    if np.any(~np.isfinite(steps)) or np.any(steps < 0):
        raise BitstreamError("invalid step size")
    template = FieldModel(kind, encoding, layers, omega0=float(omega0),
                          d_star=float(d_star) if kind != FieldKind.ATTR else 0.1,
                          joint=joint)
    if not (np.all(np.isfinite([cx, cy, cz])) and np.isfinite(scale) and scale > 0):
        raise BitstreamError("invalid normalization in header")
    norm = Normalization(np.array([cx, cy, cz], dtype=np.float64), float(scale))
    # steps are f32 and n < 2^17, so peak = n * s is exact and s = peak / n again
    return QuantizedModel(indices, steps * n, bitwidth, template), norm


def compress_pipeline(model: FieldModel, data, bitwidth: int = 8,
                      cfg_qat: TrainConfig = QAT_DEFAULTS,
                      norm: Optional[Normalization] = None,
                      attr_data=None) -> tuple[CompressedField, FieldModel]:
    """quantize -> retrain through the grid -> quantize -> entropy code.

    Returns the stream and the model the decoder will reconstruct from it.
    """
    q = quantize(model, bitwidth)
    if cfg_qat.epochs:
        model = qat_retrain(model, q, data, cfg_qat, attr_data=attr_data)
    q = quantize_with(model, q.peaks, bitwidth)
    cf = entropy_encode(q, norm)
    q_dec, _ = entropy_decode(cf)
    return cf, dequantize(q_dec)
