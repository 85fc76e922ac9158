"""End-to-end encode and decode of a shape, shared by the CLI and the sweeps."""

from __future__ import annotations

import logging
import secrets
import time
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .attribute import build_attribute_set, compress_attributes
from .compression import CompressedField, compress_pipeline, dequantize, entropy_decode
from .config import ConfigError, RunConfig
from .evaluation import attribute_psnr, chamfer
from .extraction import decode_to_pointcloud, evaluate_grid, marching_cubes_sdf, marching_cubes_udf
from .field_oracle import FieldKind, GroundTruthField
from .geometry_io import Normalization, PointCloud, TriMesh, normalize, sample_surface
from .neural_field import EncodingConfig, FieldModel, Head, init_params
from .sampler import build_training_set
from .training import AttributeSet, TrainConfig, fit

__all__ = ["Encoded", "RoundTrip", "resolve_seeds", "check_compatible", "encode_shape",
           "extract_mesh", "decode_streams", "roundtrip", "subseed"]

log = logging.getLogger(__name__)


def subseed(seed: int, stream: int) -> int:
    """Independent child seed for a numbered purpose."""
    return int(np.random.SeedSequence([seed, stream]).generate_state(1, np.uint64)[0])


def resolve_seeds(cfg: RunConfig) -> RunConfig:
    """Fill missing seeds from OS entropy."""
    changes = {}
    if cfg.param_seed is None:
        changes["param_seed"] = secrets.randbits(31)
    if cfg.data_seed is None:
        changes["data_seed"] = secrets.randbits(31)
    return cfg.replace(**changes) if changes else cfg


def check_compatible(shape: Union[TriMesh, PointCloud], cfg: RunConfig) -> None:
    """Reject combinations that cannot work before any expensive step."""
    if cfg.kind == "sdf" and not isinstance(shape, TriMesh):
        raise ConfigError("SDF needs a watertight mesh input; use --kind udf for point clouds")
    if cfg.joint and not (isinstance(shape, PointCloud) and shape.has_colors):
        raise ConfigError("joint mode needs a colored point cloud")


def _train_config(cfg: RunConfig, **over) -> TrainConfig:
    base = dict(lr=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch_size,
                lambda_l1=cfg.lambda_l1, lambda_a=cfg.lambda_a, joint=cfg.joint,
                param_seed=cfg.param_seed, truncate=cfg.truncate)
    base.update(over)
    return TrainConfig(**base)


@dataclass
class Encoded:
    geometry: CompressedField
    model: FieldModel  # as reconstructed by a decoder
    norm: Normalization
    attributes: Optional[CompressedField] = None
    attr_model: Optional[FieldModel] = None
    history: Optional[list] = None
    t_encode: float = 0.0
    trained: Optional[FieldModel] = None  # full precision, before quantization
    data: Optional[object] = None  # geometry training set

    @property
    def bytes(self) -> int:
        extra = self.attributes.total_size_bytes if self.attributes is not None else 0
        return self.geometry.total_size_bytes + extra


def extract_mesh(model: FieldModel, r_mc: int) -> TriMesh:
    """Surface of a distance model in normalized coordinates."""
    grid = evaluate_grid(model, r_mc, with_gradients=model.kind == FieldKind.UDF)
    if model.kind == FieldKind.SDF:
        return marching_cubes_sdf(grid)
    return marching_cubes_udf(grid)


def encode_shape(shape: Union[TriMesh, PointCloud], cfg: RunConfig, threads: int = 1,
                 callback=None) -> Encoded:
    """Fit, quantize, retrain and entropy-code ``shape`` (plus its colors when present).

    ``cfg`` must carry explicit seeds (see :func:`resolve_seeds`).
    """
    if cfg.param_seed is None or cfg.data_seed is None:
        raise ConfigError("encode_shape needs explicit seeds")
    check_compatible(shape, cfg)
    t0 = time.perf_counter()
    kind = FieldKind(cfg.kind)
    local, norm = normalize(shape)
    gt = GroundTruthField(local, kind, d_star=cfg.d_star)
    data = build_training_set(gt, local, cfg.m_total, cfg.sigma, seed=cfg.data_seed,
                              threads=threads, exact=not cfg.truncate)
    colored = isinstance(local, PointCloud) and local.has_colors
    attr_data = None
    if cfg.joint:
        rng = np.random.default_rng(subseed(cfg.data_seed, 1))
        idx = rng.integers(0, len(local), size=max(cfg.m_attr, 1))
        attr_data = AttributeSet(local.points[idx], local.colors[idx])
    head = None if cfg.head == "default" else Head(cfg.head)
    model = init_params(kind, cfg.width, EncodingConfig(cfg.levels, cfg.sigma_p),
                        num_hidden=cfg.num_hidden, seed=cfg.param_seed, omega0=cfg.omega0,
                        d_star=cfg.d_star, head=head, joint=cfg.joint)
    train_cfg = _train_config(cfg)
    trained, history = fit(model, data, train_cfg, attr_data=attr_data, callback=callback)
    qat_cfg = _train_config(cfg, lr=cfg.qat_lr, epochs=cfg.qat_epochs)
    stream, decoded = compress_pipeline(trained, data, cfg.bitwidth, qat_cfg, norm=norm,
                                        attr_data=attr_data)
    out = Encoded(stream, decoded, norm, history=history, trained=trained, data=data)
    if colored and cfg.attributes and not cfg.joint and cfg.m_attr > 0:
        mesh = extract_mesh(decoded, cfg.r_mc)
        aset = build_attribute_set(mesh, local, cfg.m_attr, seed=subseed(cfg.data_seed, 2))
        attr_cfg = _train_config(cfg, joint=False)
        out.attributes, out.attr_model = compress_attributes(
            aset, cfg.attr_width or cfg.width, attr_cfg, cfg.bitwidth,
            EncodingConfig(cfg.attr_levels, cfg.sigma_p), cfg.num_hidden, cfg.omega0,
            _train_config(cfg, joint=False, lr=cfg.qat_lr, epochs=cfg.qat_epochs), norm)
    out.t_encode = time.perf_counter() - t0
    return out


def decode_streams(geometry: Union[CompressedField, bytes],
                   attributes: Union[CompressedField, bytes, None] = None,
                   r_mc: int = 256, n_points: int = 100_000, seed: int = 0,
                   world: bool = True) -> tuple[TriMesh, PointCloud]:
    """Rebuild a mesh and a sampled (colored) point cloud from NF3D streams.

    With ``world`` the outputs are mapped back to the input frame, otherwise
    they stay in the normalized frame.
    """
    q, norm = entropy_decode(geometry)
    model = dequantize(q)
    if model.kind == FieldKind.ATTR:
        raise ConfigError("geometry stream holds an attribute field")
    attr_model = None
    if attributes is not None:
        qa, _ = entropy_decode(attributes)
        attr_model = dequantize(qa)
        if attr_model.kind != FieldKind.ATTR:
            raise ConfigError("attribute stream does not hold an attribute field")
    elif model.joint:
        attr_model = model
    mesh = extract_mesh(model, r_mc)
    frame = norm if world else None
    pc = decode_to_pointcloud(mesh, n_points, frame, attr_model, seed)
    if world:
        mesh = TriMesh(norm.invert(mesh.vertices), mesh.triangles)
    return mesh, pc


@dataclass
class RoundTrip:
    encoded: Encoded
    bytes: int
    cd: float
    psnr: Optional[float]
    t_encode: float
    t_decode: float


def roundtrip(shape: Union[TriMesh, PointCloud], cfg: RunConfig, threads: int = 1,
              gt_seed: int = 0, decode_seed: int = 1) -> RoundTrip:
    """Encode, decode and score in the normalized frame of the input."""
    cfg = resolve_seeds(cfg)
    enc = encode_shape(shape, cfg, threads)
    t0 = time.perf_counter()
    _, rec = decode_streams(enc.geometry, enc.attributes, cfg.r_mc, cfg.n_points,
                            seed=decode_seed, world=False)
    t_dec = time.perf_counter() - t0
    local, _ = normalize(shape)
    gt = sample_surface(local, cfg.n_points, gt_seed) if isinstance(local, TriMesh) else local
    cd = chamfer(gt, rec)
    psnr = attribute_psnr(gt, rec) if gt.has_colors and rec.has_colors else None
    return RoundTrip(enc, enc.bytes, cd, psnr, enc.t_encode, t_dec)
