"""Turning distance fields back into meshes and point clouds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy import ndimage

from . import mc_tables
from .field_oracle import FieldKind
from .geometry_io import GeometryError, Normalization, PointCloud, TriMesh, sample_surface
from .neural_field import FieldModel, evaluate_lattice, forward

__all__ = [
    "FieldGrid",
    "EmptySurfaceError",
    "evaluate_grid",
    "marching_cubes_sdf",
    "marching_cubes_udf",
    "pseudo_signs",
    "decode_to_pointcloud",
]


class EmptySurfaceError(GeometryError):
    """The decoded field has no surface to sample from."""


@dataclass(frozen=True)
class FieldGrid:
    """Samples of a field on the lattice ``linspace(-1, 1, r)^3``, indexed [x, y, z]."""

    values: np.ndarray
    gradients: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or len(set(v.shape)) != 1:
            raise ValueError(f"values must be a cubic 3-D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid values must be finite")
        object.__setattr__(self, "values", v)
        if self.gradients is not None:
            g = np.asarray(self.gradients, dtype=np.float64)
            if g.shape != v.shape + (3,):
                raise ValueError("gradients must have shape values.shape + (3,)")
            object.__setattr__(self, "gradients", g)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> float:
        return 2.0 / (self.resolution - 1)

    @property
    def coords(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.resolution)


def lattice_points(r: int) -> np.ndarray:
    c = np.linspace(-1.0, 1.0, r)
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)


def evaluate_grid(field: Union[FieldModel, Callable], r_mc: int = 256,
                  with_gradients: bool = False,
                  gradient: Optional[Callable] = None) -> FieldGrid:
    """Sample a field model (or a plain callable) on an ``r_mc^3`` lattice.

    Gradients of a model are exact input gradients. For a callable field,
    pass ``gradient`` to supply them.
    """
    if r_mc < 8:
        raise ValueError(f"r_mc must be >= 8, got {r_mc}")
    if isinstance(field, FieldModel):
        if field.kind == FieldKind.ATTR:
            raise ValueError("cannot extract a surface from an attribute field")
        coords = np.linspace(-1.0, 1.0, r_mc)
        vals = np.empty((r_mc,) * 3)
        grads = np.empty((r_mc,) * 3 + (3,)) if with_gradients else None
        for i, v, g in evaluate_lattice(field, coords, with_gradients):
            vals[i] = v
            if with_gradients:
                grads[i] = g
        return FieldGrid(vals, grads)
    pts = lattice_points(r_mc)
    vals = np.asarray(field(pts), dtype=np.float64).reshape((r_mc,) * 3)
    grads = None
    if with_gradients:
        if gradient is None:
            raise ValueError("with_gradients on a callable field needs a gradient callable")
        grads = np.asarray(gradient(pts), dtype=np.float64).reshape((r_mc,) * 3 + (3,))
    return FieldGrid(vals, grads)


# cell-local edge -> (axis, corner offset of its lower end)
def _edge_layout():
    out = []
    for a, b in mc_tables.EDGES:
        ca, cb = np.array(mc_tables.CORNERS[a]), np.array(mc_tables.CORNERS[b])
        axis = int(np.flatnonzero(ca != cb)[0])
        out.append((axis, tuple(np.minimum(ca, cb))))
    return out


_EDGE_LAYOUT = _edge_layout()
_TRI_TABLE = np.full((256, 16), -1, dtype=np.int64)
for _case, _tris in enumerate(mc_tables.TRIANGLES):
    _TRI_TABLE[_case, :len(_tris)] = _tris


def marching_cubes(values: np.ndarray, iso: float = 0.0) -> TriMesh:
    """Marching cubes over ``values`` sampled on ``linspace(-1, 1, r)^3``.

    Vertices are shared between neighbouring cells (one per crossed lattice
    edge, ordered by edge id), so sign-consistent inputs give closed meshes.
    Triangles face toward increasing values.
    """
    v = np.asarray(values, dtype=np.float64)
    r = v.shape[0]
    h = 2.0 / (r - 1)
    below = v < iso
    case = np.zeros((r - 1,) * 3, dtype=np.int64)
    for bit, (dx, dy, dz) in enumerate(mc_tables.CORNERS):
        case |= below[dx:r - 1 + dx, dy:r - 1 + dy, dz:r - 1 + dz].astype(np.int64) << bit
    active = np.flatnonzero((case != 0) & (case != 255))
    if active.size == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    ci, cj, ck = np.unravel_index(active, case.shape)
    table = _TRI_TABLE[case.ravel()[active]]  # (n, 16)
    # global id of every cell-local edge: axis * r^3 + flat index of lower corner
    local = np.empty((active.size, 12), dtype=np.int64)
    for e, (axis, (ox, oy, oz)) in enumerate(_EDGE_LAYOUT):
        local[:, e] = axis * r ** 3 + ((ci + ox) * r + (cj + oy)) * r + (ck + oz)
    valid = table >= 0
    edge_ids = np.take_along_axis(local, np.where(valid, table, 0), axis=1)[valid]
    tri_edges = edge_ids.reshape(-1, 3)
    uniq, inv = np.unique(tri_edges, return_inverse=True)
    axis = uniq // r ** 3
    i, j, k = np.unravel_index(uniq % r ** 3, (r, r, r))
    start = np.stack([i, j, k], axis=1)
    end = start.copy()
    end[np.arange(len(uniq)), axis] += 1
    v0 = v[i, j, k]
    v1 = v[end[:, 0], end[:, 1], end[:, 2]]
    t = (iso - v0) / (v1 - v0)
    verts = -1.0 + start * h
    verts[np.arange(len(uniq)), axis] += t * h
    faces = inv.reshape(-1, 3)
    return TriMesh(verts, faces[:, ::-1])


def marching_cubes_sdf(grid: FieldGrid, iso: float = 0.0) -> TriMesh:
    """Marching cubes on signed values; no sign change gives an empty mesh."""
    return marching_cubes(grid.values, iso)


# tangent-line reach allowed for a crossing, in grid spacings
_REACH = 2.0


def _crossings(grid: FieldGrid, eps: float) -> list:
    """Per-axis flags for lattice edges the surface passes through.

    An edge counts when both ends lie in the ``eps`` band and each end's
    gradient points away from the other end (the unsigned distance grows
    outward on both sides of a sheet). Edges grazing a surface, or running
    past a point where it touches the lattice, also show opposing components
    along the edge. Two extra tests reject them: the full gradients must
    point into opposite half-spaces, and the first-order zeros predicted
    from both ends must fall within ``_REACH`` spacings of each other.
    """
    v, g = grid.values, grid.gradients
    h = grid.spacing
    near = v < eps
    out = []
    for a in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[a] = slice(0, -1)
        hi[a] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        gu, gv = g[lo][..., a], g[hi][..., a]
        opposed = near[lo] & near[hi] & (gu < 0) & (gv > 0)
        opposed &= np.einsum("...i,...i->...", g[lo], g[hi]) < 0
        with np.errstate(divide="ignore", invalid="ignore"):
            reach = v[lo] / np.abs(gu) + v[hi] / np.abs(gv)
        out.append(opposed & (reach <= _REACH * h))
    return out


def _neighbours(idx: np.ndarray, r: int):
    """Yield (axis, positions in idx, neighbour indices) for the six lattice directions."""
    coords = np.unravel_index(idx, (r, r, r))
    for a, (c, st) in enumerate(zip(coords, (r * r, r, 1))):
        for step in (-1, 1):
            pos = np.flatnonzero(c > 0 if step < 0 else c < r - 1)
            yield a, pos, idx[pos] + step * st


def pseudo_signs(grid: FieldGrid, eps: Optional[float] = None) -> np.ndarray:
    """Assign +-1 to lattice vertices by breadth-first propagation from corner (0,0,0).

    The corner is taken to be outside. Crossings only join vertices inside
    the ``eps`` band, so each connected region outside the band carries one
    sign. The BFS runs level by level through band vertices. A vertex takes
    the majority of votes from its already-labeled neighbours: a neighbour
    votes its own sign, flipped when the connecting edge is a crossing. Ties
    go to the vote of the lowest-index labeled neighbour. When the band
    frontier runs dry, every out-of-band region touching labeled vertices is
    labeled as a whole by the same vote over all of its boundary edges, and
    the BFS resumes from it. Deciding a region from its full boundary keeps a
    stray pocket or a mislabeled band vertex from flipping large areas.
    Finally the band is relabeled from all regions at once, so each band
    vertex takes its sign from the nearer side.
    """
    if grid.gradients is None:
        raise ValueError("pseudo-sign assignment needs field gradients")
    r = grid.resolution
    eps = 3.0 * grid.spacing if eps is None else eps
    cross = _crossings(grid, eps)
    n = r ** 3
    regions, n_regions = ndimage.label(grid.values >= eps)
    regions = regions.ravel()
    order = np.argsort(regions, kind="stable")
    bounds = np.searchsorted(regions[order], np.arange(n_regions + 2))
    sign = np.zeros(n, dtype=np.int8)
    band = regions == 0

    def vote(targets):
        votes = np.zeros(targets.size, dtype=np.int64)
        tie = np.zeros(targets.size, dtype=np.int8)
        tie_src = np.full(targets.size, n, dtype=np.int64)
        for a, pos, nb in _neighbours(targets, r):
            ok = sign[nb] != 0
            pos, nb = pos[ok], nb[ok]
            flip = cross[a][np.unravel_index(np.minimum(targets[pos], nb), (r, r, r))]
            v = np.where(flip, -sign[nb], sign[nb]).astype(np.int8)
            votes[pos] += v
            first = nb < tie_src[pos]
            tie[pos[first]] = v[first]
            tie_src[pos[first]] = nb[first]
        return np.where(votes > 0, 1, np.where(votes < 0, -1, tie))

    def spread(frontier):
        while frontier.size:
            cand = np.unique(np.concatenate([nb for *_, nb in _neighbours(frontier, r)]))
            new = cand[(sign[cand] == 0) & band[cand]]
            if new.size == 0:
                break
            sign[new] = vote(new)
            frontier = new

    if regions[0]:
        frontier = order[bounds[regions[0]]:bounds[regions[0] + 1]]
    else:
        frontier = np.array([0], dtype=np.int64)
    sign[frontier] = 1
    while True:
        spread(frontier)
        labeled = np.flatnonzero((sign != 0) & band)
        # band-to-region edges are never crossings, so each edge votes the band sign
        totals = np.zeros(n_regions + 1, dtype=np.int64)
        tie = np.zeros(n_regions + 1, dtype=np.int8)
        tie_src = np.full(n_regions + 1, n, dtype=np.int64)
        for _, pos, nb in _neighbours(labeled, r):
            ok = (sign[nb] == 0) & ~band[nb]
            src, reg = labeled[pos[ok]], regions[nb[ok]]
            np.add.at(totals, reg, sign[src])
            np.minimum.at(tie_src, reg, src)
        touched = np.flatnonzero(tie_src < n)
        if touched.size == 0:
            break
        tie[touched] = sign[tie_src[touched]]
        grown = []
        for k in touched:
            members = order[bounds[k]:bounds[k + 1]]
            sign[members] = np.sign(totals[k]) if totals[k] else tie[k]
            grown.append(members)
        frontier = np.concatenate(grown)
    if n_regions:
        # relabel the band from every region at once so each band vertex
        # takes its sign from the nearer side and the fronts meet at the surface
        first = sign.copy()
        sign[band] = 0
        spread(np.flatnonzero(~band))
        sign[sign == 0] = first[sign == 0]
    sign[sign == 0] = 1
    return sign.reshape(r, r, r)


def marching_cubes_udf(grid: FieldGrid, eps: Optional[float] = None) -> TriMesh:
    """Mesh an unsigned field: pseudo-sign the lattice, then run marching cubes."""
    if grid.gradients is None:
        raise ValueError("UDF meshing needs field gradients")
    signs = pseudo_signs(grid, eps)
    return marching_cubes(signs * grid.values, 0.0)


def drop_degenerate(mesh: TriMesh, min_area: float = 1e-12) -> TriMesh:
    keep = mesh.areas() >= min_area
    return TriMesh(mesh.vertices, mesh.triangles[keep])


def decode_to_pointcloud(mesh: TriMesh, n: int, norm: Optional[Normalization] = None,
                         attr_model: Optional[FieldModel] = None, seed: int = 0) -> PointCloud:
    """Sample ``n`` points on an extracted mesh, color them, map back to world frame."""
    mesh = drop_degenerate(mesh)
    if len(mesh.triangles) == 0:
        raise EmptySurfaceError("decoded field has no surface (shape lost at this rate)")
    pts = sample_surface(mesh, n, seed).points
    colors = None
    if attr_model is not None:
        c = forward(attr_model, pts).reshape(-1, attr_model.out_dim)
        colors = np.clip(c[:, -3:], -1.0, 1.0)
    if norm is not None:
        pts = norm.invert(pts)
    return PointCloud(pts, colors)
