"""Ground-truth distance fields for supervision."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

import numpy as np

from .geometry_io import PointCloud, TriMesh
from .spatial import PointIndex, TriangleIndex, build_ray_grids, ray_parity

__all__ = ["FieldKind", "GroundTruthField", "distance", "truncate_target", "UnsupportedFieldError"]


class FieldKind(str, Enum):
    UDF = "udf"
    SDF = "sdf"
    ATTR = "attr"


class UnsupportedFieldError(ValueError):
    """Requested field kind cannot be derived from the source geometry."""


@dataclass(frozen=True)
class GroundTruthField:
    """Distance-to-surface oracle for a normalized mesh or point cloud.

    SDF values are negative inside; the sign comes from ray-crossing parity and
    is only meaningful for watertight meshes.
    """

    source: Union[TriMesh, PointCloud]
    kind: FieldKind = FieldKind.UDF
    d_star: float = 0.1
    index: Union[PointIndex, TriangleIndex, None] = field(default=None, repr=False)
    _ray_grids: Optional[list] = field(default=None, repr=False)

    def __post_init__(self):
        kind = FieldKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind == FieldKind.ATTR:
            raise UnsupportedFieldError("ATTR is not a distance field")
        if not self.d_star > 0:
            raise ValueError(f"d_star must be positive, got {self.d_star}")
        if kind == FieldKind.SDF and not isinstance(self.source, TriMesh):
            raise UnsupportedFieldError("signed distances need a (watertight) mesh source")
        if self.index is None:
            if isinstance(self.source, TriMesh):
                keep = self.source.areas() > 0
                idx = TriangleIndex(self.source.corners[keep])
            else:
                idx = PointIndex(self.source.points)
            object.__setattr__(self, "index", idx)
        if kind == FieldKind.SDF and self._ray_grids is None:
            object.__setattr__(self, "_ray_grids", build_ray_grids(self.index.corners))


def distance(field: GroundTruthField, x: np.ndarray, cap: float = np.inf) -> np.ndarray:
    """Distance (signed for SDF fields) from ``x`` to the surface.

    ``x`` may be a single point or an (n, 3) array. Past ``cap`` the magnitude
    is only guaranteed to exceed ``cap``; the sign stays exact.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("query points must be finite")
    single = x.ndim == 1
    q = x.reshape(-1, 3)
    if isinstance(field.index, PointIndex):
        d, _ = field.index.nearest(q)
    else:
        d, _ = field.index.nearest(q, cap=cap)
    if field.kind == FieldKind.SDF:
        inside = ray_parity(field.index.corners, q, grids=field._ray_grids)
        d = np.where(inside, -d, d)
    return d[0] if single else d


def truncate_target(d_s, d_star: float):
    """``sgn(d) * min(|d|, d_star)``."""
    if not d_star > 0:
        raise ValueError("d_star must be positive")
    return np.sign(d_s) * np.minimum(np.abs(d_s), d_star)
