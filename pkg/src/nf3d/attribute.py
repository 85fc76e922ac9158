"""Sequential color compression on top of decoded geometry."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .compression import QAT_DEFAULTS, CompressedField, compress_pipeline
from .field_oracle import FieldKind
from .geometry_io import Normalization, PointCloud, TriMesh, sample_surface
from .neural_field import EncodingConfig, FieldModel, init_params
from .spatial import PointIndex
from .training import AttributeSet, TrainConfig, fit

__all__ = ["AttributeTrainingSet", "build_attribute_set", "compress_attributes",
           "nearest_colors"]

AttributeTrainingSet = AttributeSet


def nearest_colors(gt: PointCloud, points: np.ndarray) -> np.ndarray:
    """Color of the exact nearest ground-truth point (lowest index on ties)."""
    if not gt.has_colors:
        raise ValueError("ground-truth point cloud has no colors")
    if len(points) == 0:
        return np.zeros((0, 3))
    _, idx = PointIndex(gt.points).nearest(points)
    return gt.colors[idx]


def build_attribute_set(decoded_mesh: TriMesh, gt: PointCloud, m: int,
                        seed: int = 0) -> AttributeSet:
    """``m`` area-uniform points on the decoded surface, labeled with NN colors."""
    if not gt.has_colors:
        raise ValueError("ground-truth point cloud has no colors")
    if m == 0:
        return AttributeSet(np.zeros((0, 3)), np.zeros((0, 3)))
    if len(decoded_mesh.triangles) == 0:
        raise ValueError("decoded mesh is empty")
    pts = sample_surface(decoded_mesh, m, seed).points
    return AttributeSet(pts, nearest_colors(gt, pts))


def compress_attributes(attr_set: AttributeSet, width: int, cfg: TrainConfig,
                        bitwidth: int = 8, encoding: EncodingConfig = EncodingConfig(levels=8),
                        num_hidden: int = 2, omega0: float = 30.0,
                        cfg_qat: TrainConfig = QAT_DEFAULTS,
                        norm: Optional[Normalization] = None,
                        ) -> tuple[CompressedField, FieldModel]:
    """Fit an ATTR field to the set and run it through the compression stack.

    Returns the stream and the model a decoder reconstructs from it.
    """
    if len(attr_set) == 0:
        raise ValueError("attribute training set is empty")
    model = init_params(FieldKind.ATTR, width, encoding, num_hidden=num_hidden,
                        seed=cfg.param_seed, omega0=omega0)
    model, _ = fit(model, attr_set, cfg)
    return compress_pipeline(model, attr_set, bitwidth, cfg_qat, norm=norm)
