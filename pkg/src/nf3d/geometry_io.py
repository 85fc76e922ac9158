"""Explicit geometry: point clouds, triangle meshes, file I/O and normalization."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

__all__ = [
    "GeometryError",
    "ShapeParseError",
    "DegenerateShapeError",
    "PointCloud",
    "TriMesh",
    "Normalization",
    "load_shape",
    "save_shape",
    "normalize",
    "sample_surface",
    "colors_to_unit",
    "colors_to_8bit",
]


class GeometryError(ValueError):
    """Base class for geometry input problems."""


class ShapeParseError(GeometryError):
    """A geometry file could not be parsed."""


class DegenerateShapeError(GeometryError):
    """The shape has no spatial extent."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        if self.colors is not None:
            cols = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(cols) != len(pts):
                raise GeometryError(
                    f"{len(cols)} colors for {len(pts)} points")
            object.__setattr__(self, "colors", _frozen(cols))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_colors(self) -> bool:
        return self.colors is not None


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise GeometryError("vertex coordinates must be finite")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise GeometryError(
                f"triangle index out of range for {len(v)} vertices")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "triangles", _frozen(f))

    @property
    def corners(self) -> np.ndarray:
        """(F, 3, 3) array of triangle corner coordinates."""
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        a, b, c = np.moveaxis(self.corners, 1, 0)
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


Shape = Union[PointCloud, TriMesh]


@dataclass(frozen=True)
class Normalization:
    """Similarity transform mapping a shape into the unit ball."""

    center: np.ndarray
    scale: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        object.__setattr__(self, "center", _frozen(c.copy()))
        object.__setattr__(self, "scale", float(self.scale))
        if not self.scale > 0:
            raise GeometryError(f"scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls) -> "Normalization":
        return cls(np.zeros(3), 1.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.center


def _positions(shape: Shape) -> np.ndarray:
    return shape.points if isinstance(shape, PointCloud) else shape.vertices


def _with_positions(shape: Shape, pts: np.ndarray) -> Shape:
    if isinstance(shape, PointCloud):
        return PointCloud(pts, shape.colors)
    return TriMesh(pts, shape.triangles)


def normalize(shape: Shape) -> tuple[Shape, Normalization]:
    """Center on the centroid and scale so the farthest point has norm 1."""
    pts = _positions(shape)
    if len(pts) == 0:
        raise DegenerateShapeError("cannot normalize an empty shape")
    center = pts.mean(axis=0)
    radius = float(np.linalg.norm(pts - center, axis=1).max())
    if radius <= 0.0:
        raise DegenerateShapeError("all points coincide; scale would be 0")
    norm = Normalization(center, radius)
    return _with_positions(shape, norm.apply(pts)), norm


def denormalize(shape: Shape, norm: Normalization) -> Shape:
    return _with_positions(shape, norm.invert(_positions(shape)))


def sample_surface(mesh: TriMesh, n: int, rng_seed: int) -> PointCloud:
    """Draw ``n`` points area-uniformly from the mesh surface.

    Zero-area triangles never receive samples. The result is a pure function
    of ``(mesh, n, rng_seed)``.
    """
    if n == 0:
        return PointCloud(np.zeros((0, 3)))
    areas = mesh.areas()
    live = np.flatnonzero(areas > 0.0)
    if live.size == 0:
        raise DegenerateShapeError("mesh has no triangle with positive area")
    rng = np.random.default_rng(rng_seed)
    cdf = np.cumsum(areas[live])
    pick = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    tri = live[np.minimum(pick, live.size - 1)]
    r1, r2 = rng.random((2, n))
    s1 = np.sqrt(r1)
    w = np.stack([1.0 - s1, s1 * (1.0 - r2), s1 * r2], axis=1)
    pts = np.einsum("nk,nkd->nd", w, mesh.vertices[mesh.triangles[tri]])
    return PointCloud(pts)


# -- colors -----------------------------------------------------------------

def colors_to_unit(c8: np.ndarray) -> np.ndarray:
    """8-bit RGB -> [-1, 1]."""
    return 2.0 * (np.asarray(c8, dtype=np.float64) / 255.0) - 1.0


def colors_to_8bit(c: np.ndarray) -> np.ndarray:
    """[-1, 1] RGB -> 8-bit, rounding half up and clamping."""
    v = np.floor(255.0 * (np.asarray(c, dtype=np.float64) + 1.0) / 2.0 + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


# -- readers ----------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _PlyElement:
    name: str
    count: int
    props: list  # (name, dtype) or (name, (count_dtype, item_dtype))


def _parse_ply_header(data: bytes) -> tuple[str, list[_PlyElement], int]:
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ShapeParseError("not a PLY file (missing 'ply' magic or end_header)")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    fmt = None
    elements: list[_PlyElement] = []
    for lineno, raw in enumerate(data[:end].decode("ascii", "replace").splitlines(), 1):
        tok = raw.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append(_PlyElement(tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ShapeParseError(f"PLY header line {lineno}: property before element")
            try:
                if tok[1] == "list":
                    elements[-1].props.append(
                        (tok[4], (_PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
                else:
                    elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
            except (KeyError, IndexError):
                raise ShapeParseError(
                    f"PLY header line {lineno}: bad property '{raw.strip()}'") from None
        else:
            raise ShapeParseError(f"PLY header line {lineno}: unknown keyword '{tok[0]}'")
    if fmt not in ("ascii", "binary_little_endian"):
        raise ShapeParseError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, body_start


def _vertex_arrays(rec: dict, name: str) -> tuple[np.ndarray, Optional[np.ndarray]]:
    if not all(k in rec for k in "xyz"):
        raise ShapeParseError(f"element '{name}' lacks x/y/z properties")
    pts = np.stack([np.asarray(rec[k], dtype=np.float64) for k in "xyz"], axis=1)
    colors = None
    if all(k in rec for k in ("red", "green", "blue")):
        colors = colors_to_unit(np.stack([rec[k] for k in ("red", "green", "blue")], axis=1))
    return pts, colors


def _faces_to_triangles(polys: list, n_vertices: int, where: str) -> np.ndarray:
    tris = []
    for i, poly in enumerate(polys):
        if len(poly) < 3:
            raise ShapeParseError(f"{where}: face {i} has {len(poly)} vertices")
        for k in range(1, len(poly) - 1):
            tris.append((poly[0], poly[k], poly[k + 1]))
    tris = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
    if tris.size and (tris.min() < 0 or tris.max() >= n_vertices):
        bad = int(tris.max() if tris.max() >= n_vertices else tris.min())
        raise ShapeParseError(f"{where}: vertex index {bad} out of range for {n_vertices} vertices")
    return tris


def _read_ply(data: bytes) -> Shape:
    fmt, elements, offset = _parse_ply_header(data)
    vertex_rec = None
    polys = None
    n_vertices = 0
    if fmt == "ascii":
        lines = data[offset:].decode("ascii", "replace").splitlines()
        lines = [ln for ln in lines if ln.strip()]
        cursor = 0
        for el in elements:
            chunk = lines[cursor:cursor + el.count]
            if len(chunk) < el.count:
                raise ShapeParseError(
                    f"PLY body: element '{el.name}' truncated at line {cursor + len(chunk)}")
            has_list = any(isinstance(t, tuple) for _, t in el.props)
            if el.name == "vertex":
                if has_list:
                    raise ShapeParseError("PLY vertex element with list property is unsupported")
                try:
                    table = np.array([ln.split() for ln in chunk], dtype=np.float64)
                except ValueError as exc:
                    raise ShapeParseError(f"PLY body near line {cursor}: {exc}") from None
                table = table.reshape(el.count, len(el.props))
                vertex_rec = {n: table[:, j] for j, (n, _) in enumerate(el.props)}
                n_vertices = el.count
            elif el.name == "face":
                polys = []
                for j, ln in enumerate(chunk):
                    vals = [int(v) for v in ln.split()]
                    polys.append(vals[1:1 + vals[0]])
            cursor += el.count
    else:
        pos = offset
        for el in elements:
            has_list = any(isinstance(t, tuple) for _, t in el.props)
            if not has_list:
                dt = np.dtype([(n, "<" + t) for n, t in el.props])
                need = dt.itemsize * el.count
                if pos + need > len(data):
                    raise ShapeParseError(
                        f"PLY body: element '{el.name}' truncated at byte {len(data)}")
                rec = np.frombuffer(data, dtype=dt, count=el.count, offset=pos)
                pos += need
                if el.name == "vertex":
                    vertex_rec = {n: rec[n] for n in rec.dtype.names}
                    n_vertices = el.count
                continue
            if el.name != "face" or len(el.props) != 1:
                raise ShapeParseError(f"unsupported PLY element '{el.name}' with list properties")
            cnt_t, item_t = el.props[0][1]
            cnt_dt, item_dt = np.dtype("<" + cnt_t), np.dtype("<" + item_t)
            # fast path: every face a triangle
            tri_dt = np.dtype([("n", cnt_dt), ("v", item_dt, (3,))])
            need = tri_dt.itemsize * el.count
            if pos + need <= len(data):
                rec = np.frombuffer(data, dtype=tri_dt, count=el.count, offset=pos)
                if np.all(rec["n"] == 3):
                    polys = rec["v"].astype(np.int64)
                    pos += need
                    continue
            polys = []
            for i in range(el.count):
                if pos + cnt_dt.itemsize > len(data):
                    raise ShapeParseError(f"PLY body: face {i} truncated at byte {pos}")
                k = int(np.frombuffer(data, cnt_dt, 1, pos)[0])
                pos += cnt_dt.itemsize
                if pos + k * item_dt.itemsize > len(data):
                    raise ShapeParseError(f"PLY body: face {i} truncated at byte {pos}")
                polys.append(np.frombuffer(data, item_dt, k, pos).tolist())
                pos += k * item_dt.itemsize
    if vertex_rec is None:
        raise ShapeParseError("PLY file has no vertex element")
    pts, colors = _vertex_arrays(vertex_rec, "vertex")
    if polys is not None and len(polys):
        if isinstance(polys, np.ndarray):
            tris = polys
            if tris.min() < 0 or tris.max() >= n_vertices:
                raise ShapeParseError(
                    f"PLY faces: vertex index out of range for {n_vertices} vertices")
        else:
            tris = _faces_to_triangles(polys, n_vertices, "PLY faces")
        return TriMesh(pts, tris)
    return PointCloud(pts, colors)


def _read_obj(text: str) -> TriMesh:
    verts: list = []
    tris: list = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        tok = raw.split()
        if not tok:
            continue
        if tok[0] == "v":
            try:
                verts.append([float(t) for t in tok[1:4]])
            except ValueError:
                raise ShapeParseError(f"OBJ line {lineno}: bad vertex '{raw.strip()}'") from None
            if len(verts[-1]) != 3:
                raise ShapeParseError(f"OBJ line {lineno}: vertex needs 3 coordinates")
        elif tok[0] == "f":
            idx = []
            for t in tok[1:]:
                try:
                    k = int(t.split("/")[0])
                except ValueError:
                    raise ShapeParseError(f"OBJ line {lineno}: bad face index '{t}'") from None
                k = k - 1 if k > 0 else len(verts) + k
                if not 0 <= k < len(verts):
                    raise ShapeParseError(
                        f"OBJ line {lineno}: vertex index {t} out of range "
                        f"for {len(verts)} vertices")
                idx.append(k)
            if len(idx) < 3:
                raise ShapeParseError(f"OBJ line {lineno}: face with {len(idx)} vertices")
            tris.extend((idx[0], idx[k], idx[k + 1]) for k in range(1, len(idx) - 1))
    return TriMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                   np.asarray(tris, dtype=np.int64).reshape(-1, 3))


def _read_xyz(text: str) -> PointCloud:
    rows = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        tok = raw.split()
        if not tok or tok[0].startswith("#"):
            continue
        if len(tok) not in (3, 6):
            raise ShapeParseError(f"XYZ line {lineno}: expected 3 or 6 columns, got {len(tok)}")
        if rows and len(tok) != len(rows[0]):
            raise ShapeParseError(f"XYZ line {lineno}: column count changed")
        try:
            rows.append([float(t) for t in tok])
        except ValueError:
            raise ShapeParseError(f"XYZ line {lineno}: non-numeric value") from None
    table = np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)
    if table.shape[1] == 6:
        return PointCloud(table[:, :3], colors_to_unit(table[:, 3:]))
    return PointCloud(table.reshape(-1, 3))


_EXT_FORMATS = {".obj": "obj", ".ply": "ply", ".xyz": "xyz", ".txt": "xyz"}


def detect_format(path: Union[str, Path]) -> str:
    ext = Path(path).suffix.lower()
    if ext not in _EXT_FORMATS:
        raise ShapeParseError(f"cannot infer geometry format from extension {ext!r}")
    return _EXT_FORMATS[ext]


def load_shape(path: Union[str, Path], format: Optional[str] = None) -> Shape:
    """Read OBJ, PLY (ascii or binary little-endian) or XYZ geometry.

    PLY 8-bit colors are mapped to [-1, 1]. OBJ polygons are fan-triangulated.
    """
    fmt = (format or detect_format(path)).lower()
    data = Path(path).read_bytes()
    if fmt == "ply":
        return _read_ply(data)
    text = data.decode("utf-8", "replace")
    if fmt == "obj":
        return _read_obj(text)
    if fmt == "xyz":
        return _read_xyz(text)
    raise ShapeParseError(f"unsupported format {fmt!r}")


# -- writers ----------------------------------------------------------------

def save_shape(path: Union[str, Path], shape: Shape, format: Optional[str] = None,
               binary: bool = True) -> None:
    fmt = (format or detect_format(path)).lower()
    path = Path(path)
    if fmt == "obj":
        if not isinstance(shape, TriMesh):
            raise GeometryError("OBJ export needs a mesh")
        with path.open("w") as fh:
            np.savetxt(fh, shape.vertices, fmt="v %.9g %.9g %.9g")
            np.savetxt(fh, shape.triangles + 1, fmt="f %d %d %d")
    elif fmt == "xyz":
        if not isinstance(shape, PointCloud):
            raise GeometryError("XYZ export needs a point cloud")
        with path.open("w") as fh:
            if shape.has_colors:
                c8 = colors_to_8bit(shape.colors)
                for p, c in zip(shape.points, c8):
                    fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n")
            else:
                np.savetxt(fh, shape.points, fmt="%.9g")
    elif fmt == "ply":
        _write_ply(path, shape, binary)
    else:
        raise GeometryError(f"unsupported format {fmt!r}")


def _write_ply(path: Path, shape: Shape, binary: bool) -> None:
    pts = _positions(shape)
    colors = shape.colors if isinstance(shape, PointCloud) else None
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    vert = np.empty(len(pts), dtype=fields)
    for j, k in enumerate("xyz"):
        vert[k] = pts[:, j]
    if colors is not None:
        c8 = colors_to_8bit(colors)
        for j, k in enumerate(("red", "green", "blue")):
            vert[k] = c8[:, j]
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(pts)}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    faces = shape.triangles if isinstance(shape, TriMesh) else None
    if faces is not None:
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    with path.open("wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(vert.tobytes())
            if faces is not None:
                frec = np.empty(len(faces), dtype=[("n", "u1"), ("v", "<i4", (3,))])
                frec["n"] = 3
                frec["v"] = faces
                fh.write(frec.tobytes())
        else:
            lines = []
            for row in vert:
                vals = [f"{float(row[k]):.9g}" for k in "xyz"]
                if colors is not None:
                    vals += [str(int(row[k])) for k in ("red", "green", "blue")]
                lines.append(" ".join(vals))
            if faces is not None:
                lines += [f"3 {a} {b} {c}" for a, b, c in faces]
            fh.write(("\n".join(lines) + "\n").encode("ascii"))

