"""Fixed training sets drawn from the uniform / surface / perturbed-surface mixture."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .field_oracle import GroundTruthField, distance, truncate_target
from .geometry_io import PointCloud, TriMesh, sample_surface

__all__ = ["TrainingSet", "build_training_set", "mixture_counts", "DEFAULT_SIGMA"]

DEFAULT_SIGMA = {"sdf": 0.01, "udf": 0.025}

# distances this many d_star beyond the band are only bounded, not exact
_CAP_FACTOR = 2.0
_LABEL_CHUNK = 1 << 15


@dataclass(frozen=True)
class TrainingSet:
    """Sample points with their ground-truth distances.

    ``distances`` keeps the untruncated values (exact inside the supervised
    band) because the loss mask needs to know whether ``|d_S|`` exceeds
    ``d_star``; ``targets`` is the truncated view.
    """

    points: np.ndarray
    distances: np.ndarray
    d_star: float
    seed: int = 0
    sigma: float = 0.0

    def __post_init__(self):
        if len(self.points) != len(self.distances):
            raise ValueError("points and distances differ in length")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def targets(self) -> np.ndarray:
        return truncate_target(self.distances, self.d_star)

    def dump(self, path: Union[str, Path]) -> None:
        """Write little-endian float32 ``x, y, z, target`` records."""
        rec = np.empty((len(self), 4), dtype="<f4")
        rec[:, :3] = self.points
        rec[:, 3] = self.targets
        Path(path).write_bytes(rec.tobytes())

    @classmethod
    def load(cls, path: Union[str, Path], d_star: float) -> "TrainingSet":
        """Read records written by :meth:`dump`.

        Only truncated targets are stored, so samples at exactly ``d_star``
        are read back as lying beyond the band.
        """
        rec = np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(-1, 4)
        t = rec[:, 3].astype(np.float64)
        beyond = np.abs(t) >= np.float32(d_star)
        dist = np.where(beyond, np.copysign(np.inf, t), t)
        return cls(rec[:, :3].astype(np.float64), dist, d_star)


def mixture_counts(m_total: int) -> tuple[int, int, int]:
    """(uniform, surface, perturbed) = floor(0.2M), ceil(0.4M), remainder."""
    n_uni = (2 * m_total) // 10
    n_surf = -((-4 * m_total) // 10)
    return n_uni, n_surf, m_total - n_uni - n_surf


def _surface_points(surface: Union[PointCloud, TriMesh], n: int,
                    rng: np.random.Generator) -> np.ndarray:
    if isinstance(surface, TriMesh):
        return sample_surface(surface, n, int(rng.integers(2**63 - 1))).points
    idx = rng.integers(0, len(surface.points), size=n)
    return surface.points[idx]


def mixture_points(surface: Union[PointCloud, TriMesh], m_total: int, sigma: float,
                   seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Unlabeled mixture points plus the clean surface sources of the perturbed bucket."""
    n_uni, n_surf, n_pert = mixture_counts(m_total)
    rng_uni, rng_surf, rng_pert = (np.random.default_rng(s)
                                   for s in np.random.SeedSequence(seed).spawn(3))
    uni = rng_uni.uniform(-1.0, 1.0, size=(n_uni, 3))
    surf = _surface_points(surface, n_surf, rng_surf)
    src = _surface_points(surface, n_pert, rng_pert)
    pert = src + rng_pert.normal(0.0, 1.0, size=(n_pert, 3)) * sigma
    return np.concatenate([uni, surf, pert]), src


def label(field: GroundTruthField, points: np.ndarray, threads: int = 1,
          exact: bool = False) -> np.ndarray:
    """Ground-truth distances, labeled in fixed chunks (order-independent result)."""
    cap = np.inf if exact else _CAP_FACTOR * field.d_star
    chunks = [points[s:s + _LABEL_CHUNK] for s in range(0, len(points), _LABEL_CHUNK)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda c: distance(field, c, cap=cap), chunks))
    else:
        parts = [distance(field, c, cap=cap) for c in chunks]
    return np.concatenate(parts) if parts else np.zeros(0)


def build_training_set(field: GroundTruthField, surface: Union[PointCloud, TriMesh],
                       m_total: int, sigma: Optional[float] = None, seed: int = 0,
                       threads: int = 1, exact: bool = False) -> TrainingSet:
    """Sample and label the fixed training set.

    ``exact=True`` computes exact distances everywhere, needed only when the
    truncation is switched off.
    """
    if m_total < 10:
        raise ValueError(f"m_total must be at least 10, got {m_total}")
    if sigma is None:
        sigma = DEFAULT_SIGMA[field.kind.value]
    if sigma < 0 or not math.isfinite(sigma):
        raise ValueError(f"sigma must be a finite non-negative number, got {sigma}")
    pts, _ = mixture_points(surface, m_total, sigma, seed)
    dist = label(field, pts, threads=threads, exact=exact)
    return TrainingSet(pts, dist, field.d_star, seed=seed, sigma=sigma)
