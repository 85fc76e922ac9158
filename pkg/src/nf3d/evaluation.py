"""Distortion metrics and rate-distortion sweeps."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .geometry_io import PointCloud, colors_to_8bit
from .spatial import PointIndex

__all__ = [
    "RDPoint",
    "chamfer",
    "attribute_psnr",
    "rd_sweep",
    "write_rd_csv",
    "write_rd_svg",
    "PSNR_CAP",
    "CSV_HEADER",
]

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
CSV_HEADER = ("width", "bytes", "cd", "psnr", "t_encode_s", "t_decode_s")


def _points(x: Union[PointCloud, np.ndarray]) -> np.ndarray:
    p = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)
    p = p.reshape(-1, 3)
    if len(p) == 0:
        raise ValueError("chamfer distance needs two nonempty point sets")
    return p


def _nn(query: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _, idx = cKDTree(ref).query(query, k=1)
    diff = query - ref[idx]
    return np.einsum("ij,ij->i", diff, diff), idx


def chamfer(a: Union[PointCloud, np.ndarray], b: Union[PointCloud, np.ndarray]) -> float:
    """Symmetric Chamfer distance on squared nearest-neighbour distances.

    ``0.5 * (mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2)``.
    """
    pa, pb = _points(a), _points(b)
    dab, _ = _nn(pa, pb)
    dba, _ = _nn(pb, pa)
    return 0.5 * (float(dab.mean()) + float(dba.mean()))


def _directional_psnr(src: PointCloud, dst: PointCloud) -> float:
    _, idx = PointIndex(dst.points).nearest(src.points)
    a = colors_to_8bit(src.colors).astype(np.float64)
    b = colors_to_8bit(dst.colors).astype(np.float64)[idx]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0 ** 2 / mse))


def attribute_psnr(gt: PointCloud, rec: PointCloud) -> float:
    """Mean of the two NN-matched color PSNRs, in 8-bit space, capped at 100 dB."""
    if not (gt.has_colors and rec.has_colors):
        raise ValueError("attribute PSNR needs colors on both clouds")
    if len(gt) == 0 or len(rec) == 0:
        raise ValueError("attribute PSNR needs two nonempty clouds")
    return 0.5 * (_directional_psnr(gt, rec) + _directional_psnr(rec, gt))


@dataclass
class RDPoint:
    """One operating point; ``error`` is set (and metrics are NaN) when the point failed."""

    width: int
    bytes: int
    cd: float
    psnr: Optional[float] = None
    wall_time_encode: float = 0.0
    wall_time_decode: float = 0.0
    error: Optional[str] = None
    bitwidth: Optional[int] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def row(self) -> list:
        psnr = "" if self.psnr is None else f"{self.psnr:.6f}"
        cd = "nan" if not self.ok else repr(float(self.cd))
        return [self.width, self.bytes, cd, psnr,
                f"{self.wall_time_encode:.3f}", f"{self.wall_time_decode:.3f}"]


def _sweep_point(shape, cfg) -> RDPoint:
    from .codec import roundtrip  # codec pulls in the whole pipeline

    try:
        res = roundtrip(shape, cfg)
        return RDPoint(cfg.width, res.bytes, res.cd, res.psnr, res.t_encode, res.t_decode,
                       bitwidth=cfg.bitwidth)
    except Exception as exc:  # recorded, sweep continues
        log.warning("width %d, b=%d failed: %s", cfg.width, cfg.bitwidth, exc)
        return RDPoint(cfg.width, 0, float("nan"), None, error=f"{type(exc).__name__}: {exc}",
                       bitwidth=cfg.bitwidth)


def rd_sweep(shape, widths: Sequence[int], kind, config, bitwidths: Optional[Sequence[int]] = None,
             log_fn=None, workers: int = 1) -> list:
    """Encode, decode and score ``shape`` once per width (or per bitwidth at a fixed width).

    A failure at one operating point is recorded in its :class:`RDPoint` and
    the sweep moves on. ``workers > 1`` runs points in separate processes;
    with fixed seeds the metrics match the sequential run.
    """
    from .codec import resolve_seeds

    config = resolve_seeds(config)  # every point shares the same seeds
    if bitwidths is None:
        grid = [(int(w), config.bitwidth) for w in widths]
    else:
        grid = [(int(widths[0]), int(b)) for b in bitwidths]
    cfgs = [config.replace(kind=kind, width=w, bitwidth=b) for w, b in grid]
    if workers > 1 and len(cfgs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_sweep_point, [shape] * len(cfgs), cfgs)
            points = []
            for pt in results:
                if log_fn is not None:
                    log_fn(pt)
                points.append(pt)
        return points
    points = []
    for cfg in cfgs:
        pt = _sweep_point(shape, cfg)
        if log_fn is not None:
            log_fn(pt)
        points.append(pt)
    return points


def write_rd_csv(points: Iterable[RDPoint], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for p in points:
            w.writerow(p.row())


def write_rd_svg(points: Sequence[RDPoint], path: Union[str, Path],
                 width: int = 480, height: int = 320) -> None:
    """Scatter of CD against file size (log-log) for the successful points."""
    ok = [p for p in points if p.ok and p.bytes > 0 and p.cd > 0]
    pad = 50
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad / 2}" y2="{height - pad}" '
             'stroke="black"/>',
             f'<line x1="{pad}" y1="{pad / 2}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle" '
             'font-size="12">bytes (log)</text>',
             f'<text x="12" y="{height / 2}" font-size="12" '
             f'transform="rotate(-90 12 {height / 2})" text-anchor="middle">CD (log)</text>']
    if ok:
        xs = np.log10([p.bytes for p in ok])
        ys = np.log10([p.cd for p in ok])

        def span(v):
            lo, hi = v.min(), v.max()
            return (lo - 0.5, hi + 0.5) if hi - lo < 1e-9 else (lo, hi)

        (x0, x1), (y0, y1) = span(xs), span(ys)
        sx = lambda v: pad + (v - x0) / (x1 - x0) * (width - 1.5 * pad)
        sy = lambda v: height - pad - (v - y0) / (y1 - y0) * (height - 1.5 * pad)
        order = np.argsort(xs)
        path_d = " ".join(f"{'M' if i == 0 else 'L'}{sx(xs[j]):.1f},{sy(ys[j]):.1f}"
                          for i, j in enumerate(order))
        parts.append(f'<path d="{path_d}" fill="none" stroke="steelblue"/>')
        for p, x, y in zip(ok, xs, ys):
            parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="steelblue">'
                         f'<title>width {p.width}: {p.bytes} B, CD {p.cd:.3g}</title></circle>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
