"""Surface data types, file I/O, normalization, synthetic shapes and resampling."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_K_NEIGHBORS = 30


class ShapeFormatError(ValueError):
    """Raised when a shape file cannot be parsed."""


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    positions: np.ndarray
    faces: np.ndarray
    oriented: bool = True

    def __post_init__(self):
        pos = _frozen(self.positions, np.float64).reshape(-1, 3)
        faces = _frozen(self.faces, np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(pos)):
            raise ValueError("mesh positions contain NaN or Inf")
        if faces.size:
            if faces.min() < 0 or faces.max() >= len(pos):
                raise ValueError(f"face index out of range [0, {len(pos)})")
            a, b, c = faces.T
            if np.any((a == b) | (b == c) | (a == c)):
                raise ValueError("a face repeats a vertex")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "faces", faces)

    @property
    def n_vertices(self):
        return len(self.positions)

    @property
    def n_faces(self):
        return len(self.faces)

    def face_areas(self):
        p = self.positions
        f = self.faces
        cross = np.cross(p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def edges(self):
        """Unique undirected edges as a sorted (E, 2) array with i < j."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: np.ndarray
    normals: Optional[np.ndarray] = None
    k_neighbors: int = DEFAULT_K_NEIGHBORS

    def __post_init__(self):
        pos = _frozen(self.positions, np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pos)):
            raise ValueError("cloud positions contain NaN or Inf")
        if self.normals is not None:
            n = _frozen(self.normals, np.float64).reshape(-1, 3)
            if n.shape != pos.shape:
                raise ValueError(f"normals shape {n.shape} != positions shape {pos.shape}")
            if np.any(np.abs(np.linalg.norm(n, axis=1) - 1.0) > 1e-6):
                raise ValueError("point cloud normals must have unit length")
            object.__setattr__(self, "normals", n)
        if not (0 < self.k_neighbors < len(pos)):
            raise ValueError(f"k_neighbors={self.k_neighbors} must be in [1, V={len(pos)})")
        object.__setattr__(self, "positions", pos)

    @property
    def n_vertices(self):
        return len(self.positions)

    @property
    def oriented(self):
        return self.normals is not None


Geometry = Union[SurfaceMesh, PointCloud]


@dataclass(frozen=True, eq=False)
class Shape:
    """A mesh or point cloud with optional per-vertex labels or a class label."""

    geometry: Geometry
    labels: Optional[np.ndarray] = None
    class_label: Optional[int] = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.labels is not None:
            lab = _frozen(self.labels, np.int64).reshape(-1)
            if len(lab) != self.geometry.n_vertices:
                raise ValueError(f"{len(lab)} labels for {self.geometry.n_vertices} vertices")
            object.__setattr__(self, "labels", lab)
        if self.class_label is not None and self.class_label < 0:
            raise ValueError("class label must be non-negative")

    @property
    def positions(self):
        return self.geometry.positions

    @property
    def n_vertices(self):
        return self.geometry.n_vertices

    @property
    def is_mesh(self):
        return isinstance(self.geometry, SurfaceMesh)

    @property
    def oriented(self):
        return self.geometry.oriented

    def with_positions(self, positions):
        return replace(self, geometry=replace(self.geometry, positions=positions))


# --------------------------------------------------------------------------
# File I/O

def _infer_format(path, format):
    if format is not None:
        fmt = format.lower()
    else:
        fmt = Path(path).suffix.lower().lstrip(".")
    if fmt not in ("obj", "ply", "xyz"):
        raise ShapeFormatError(f"unsupported shape format {fmt!r} for {path}")
    return fmt


def load_shape(path, format=None, k_neighbors=DEFAULT_K_NEIGHBORS, labels=None):
    """Read an OBJ, PLY or XYZ file into a :class:`Shape`.

    Files without faces become point clouds. ``labels`` may be a path to a
    label file (one integer per line).
    """
    path = Path(path)
    fmt = _infer_format(path, format)
    if fmt == "obj":
        pos, faces, normals = _read_obj(path)
    elif fmt == "ply":
        pos, faces, normals = _read_ply(path)
    else:
        pos, faces, normals = _read_xyz(path)

    if faces is not None and len(faces):
        geom = SurfaceMesh(pos, faces)
    else:
        if len(pos) < 2:
            raise ShapeFormatError(f"{path}: a point cloud needs at least 2 points")
        if normals is not None:
            normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
        geom = PointCloud(pos, normals, k_neighbors=min(k_neighbors, len(pos) - 1))
    lab = load_labels(labels) if labels is not None else None
    return Shape(geom, labels=lab, name=path.stem)


def _read_obj(path):
    verts, faces = [], []
    n_quads = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            try:
                if tok[0] == "v":
                    verts.append([float(x) for x in tok[1:4]])
                    if len(verts[-1]) != 3:
                        raise ValueError("vertex needs 3 coordinates")
                elif tok[0] == "f":
                    idx = []
                    for t in tok[1:]:
                        i = int(t.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    if len(idx) == 3:
                        faces.append(idx)
                    elif len(idx) == 4:
                        n_quads += 1
                        faces.append([idx[0], idx[1], idx[2]])
                        faces.append([idx[0], idx[2], idx[3]])
                    else:
                        raise ValueError(f"unsupported polygon with {len(idx)} vertices")
            except ValueError as exc:
                raise ShapeFormatError(f"{path}:{lineno}: {exc}") from None
    if n_quads:
        warnings.warn(f"{path}: fan-triangulated {n_quads} quad(s)", stacklevel=3)
    pos = np.array(verts, dtype=np.float64).reshape(-1, 3)
    return pos, np.array(faces, dtype=np.int64).reshape(-1, 3), None


def _read_xyz(path):
    try:
        data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ShapeFormatError(f"{path}: {exc}") from None
    if data.shape[1] not in (3, 6):
        raise ShapeFormatError(f"{path}: expected 3 or 6 columns, got {data.shape[1]}")
    normals = data[:, 3:6].copy() if data.shape[1] == 6 else None
    return data[:, :3].copy(), None, normals


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ShapeFormatError(f"{path}:1: missing 'ply' magic")
        fmt = None
        elements = []  # (name, count, [(prop, dtype) | (prop, count_dtype, item_dtype)])
        lineno = 1
        while True:
            raw = fh.readline()
            lineno += 1
            if not raw:
                raise ShapeFormatError(f"{path}: unterminated header")
            tok = raw.decode("ascii", "replace").split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "format":
                fmt = tok[1]
                if fmt not in ("ascii", "binary_little_endian"):
                    raise ShapeFormatError(f"{path}:{lineno}: unsupported PLY format {fmt}")
            elif tok[0] == "element":
                elements.append((tok[1], int(tok[2]), []))
            elif tok[0] == "property":
                try:
                    if tok[1] == "list":
                        elements[-1][2].append((tok[4], _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
                    else:
                        elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
                except (KeyError, IndexError):
                    raise ShapeFormatError(f"{path}:{lineno}: bad property line") from None
            elif tok[0] == "end_header":
                break
            else:
                raise ShapeFormatError(f"{path}:{lineno}: unexpected header line {tok[0]!r}")
        body = fh.read()

    if fmt == "ascii":
        data = _parse_ply_ascii(path, body, elements, lineno)
    else:
        data = _parse_ply_binary(path, body, elements)

    if "vertex" not in data:
        raise ShapeFormatError(f"{path}: no vertex element")
    vert = data["vertex"]
    pos = np.stack([vert["x"], vert["y"], vert["z"]], axis=1).astype(np.float64)
    normals = None
    if all(k in vert for k in ("nx", "ny", "nz")):
        normals = np.stack([vert["nx"], vert["ny"], vert["nz"]], axis=1).astype(np.float64)
    faces = None
    if "face" in data:
        faces = _triangulate(path, data["face"])
    return pos, faces, normals


def _triangulate(path, polys):
    tris = []
    n_quads = 0
    for p in polys:
        if len(p) == 3:
            tris.append(p)
        elif len(p) == 4:
            n_quads += 1
            tris.append([p[0], p[1], p[2]])
            tris.append([p[0], p[2], p[3]])
        else:
            raise ShapeFormatError(f"{path}: unsupported polygon with {len(p)} vertices")
    if n_quads:
        warnings.warn(f"{path}: fan-triangulated {n_quads} quad(s)", stacklevel=4)
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


def _parse_ply_ascii(path, body, elements, header_lines):
    lines = body.decode("ascii", "replace").splitlines()
    out = {}
    i = 0
    for name, count, props in elements:
        is_list = any(len(p) == 3 for p in props)
        if is_list:
            rows = []
            for _ in range(count):
                if i >= len(lines):
                    raise ShapeFormatError(f"{path}: truncated {name} data")
                vals = lines[i].split()
                i += 1
                n = int(vals[0])
                rows.append([int(v) for v in vals[1:1 + n]])
            out[name] = rows
        else:
            cols = {p[0]: [] for p in props}
            for _ in range(count):
                if i >= len(lines):
                    raise ShapeFormatError(f"{path}: truncated {name} data")
                vals = lines[i].split()
                if len(vals) < len(props):
                    raise ShapeFormatError(f"{path}:{header_lines + i + 1}: too few values")
                try:
                    for p, v in zip(props, vals):
                        cols[p[0]].append(float(v))
                except ValueError:
                    raise ShapeFormatError(f"{path}:{header_lines + i + 1}: bad number") from None
                i += 1
            out[name] = {k: np.array(v) for k, v in cols.items()}
    return out


def _parse_ply_binary(path, body, elements):
    out = {}
    off = 0
    for name, count, props in elements:
        if any(len(p) == 3 for p in props):
            if len(props) != 1:
                raise ShapeFormatError(f"{path}: mixed list/scalar element {name} unsupported")
            _, cdt, idt = props[0]
            cdt, idt = np.dtype("<" + cdt), np.dtype("<" + idt)
            rows = []
            for _ in range(count):
                n = int(np.frombuffer(body, cdt, 1, off)[0])
                off += cdt.itemsize
                rows.append(np.frombuffer(body, idt, n, off).astype(np.int64).tolist())
                off += n * idt.itemsize
            out[name] = rows
        else:
            dt = np.dtype([(p[0], "<" + p[1]) for p in props])
            if off + dt.itemsize * count > len(body):
                raise ShapeFormatError(f"{path}: truncated {name} data")
            arr = np.frombuffer(body, dt, count, off)
            off += dt.itemsize * count
            out[name] = {p[0]: arr[p[0]].copy() for p in props}
    return out


def save_shape(shape, path, format=None, binary=True):
    """Write a shape. OBJ/XYZ use shortest round-trip float text; PLY is
    binary little-endian unless ``binary=False``."""
    path = Path(path)
    fmt = _infer_format(path, format)
    geom = shape.geometry if isinstance(shape, Shape) else shape
    pos = geom.positions
    faces = geom.faces if isinstance(geom, SurfaceMesh) else None
    normals = geom.normals if isinstance(geom, PointCloud) else None

    if fmt == "obj":
        with open(path, "w") as fh:
            for p in pos:
                fh.write("v " + " ".join(repr(float(x)) for x in p) + "\n")
            if faces is not None:
                for f in faces + 1:
                    fh.write(f"f {f[0]} {f[1]} {f[2]}\n")
    elif fmt == "xyz":
        with open(path, "w") as fh:
            for i, p in enumerate(pos):
                row = list(p) + (list(normals[i]) if normals is not None else [])
                fh.write(" ".join(repr(float(x)) for x in row) + "\n")
    else:
        props = ["x", "y", "z"] + (["nx", "ny", "nz"] if normals is not None else [])
        header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
                  f"element vertex {len(pos)}"]
        header += [f"property double {p}" for p in props]
        if faces is not None:
            header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
        header.append("end_header")
        vdata = pos if normals is None else np.hstack([pos, normals])
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            if binary:
                fh.write(np.ascontiguousarray(vdata, dtype="<f8").tobytes())
                if faces is not None:
                    rec = np.zeros(len(faces), dtype=[("n", "u1"), ("f", "<i4", 3)])
                    rec["n"] = 3
                    rec["f"] = faces
                    fh.write(rec.tobytes())
            else:
                for row in vdata:
                    fh.write((" ".join(repr(float(x)) for x in row) + "\n").encode())
                if faces is not None:
                    for f in faces:
                        fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode())


def load_labels(path):
    return np.loadtxt(path, dtype=np.int64, ndmin=1)


def save_labels(labels, path):
    with open(path, "w") as fh:
        fh.writelines(f"{int(x)}\n" for x in labels)


# --------------------------------------------------------------------------
# Normalization

def normalize_shape(positions):
    """Center on the vertex centroid and scale into the unit sphere.

    Returns ``(normalized, scale, center)`` with
    ``positions == normalized * scale + center``.
    """
    p = np.asarray(positions, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or len(p) == 0:
        raise ValueError(f"expected (V, 3) positions with V >= 1, got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("positions must be finite")
    center = p.mean(axis=0)
    q = p - center
    scale = np.sqrt((q * q).sum(axis=1).max())
    if scale == 0.0:
        raise ValueError("all points coincide; normalization scale is undefined")
    return q / scale, float(scale), center


def normalized(shape):
    """Return ``shape`` with positions passed through :func:`normalize_shape`."""
    pos, _, _ = normalize_shape(shape.positions)
    return shape.with_positions(pos)


# --------------------------------------------------------------------------
# Synthetic shapes

@dataclass
class BumpySphereConfig:
    subdiv: int = 3
    n_bumps: int = 3
    widths: tuple = (0.45, 0.38, 0.30)
    heights: tuple = (0.30, 0.40, 0.50)
    label_radius: float = 2.0  # in bump widths
    min_separation: float = 1.75  # radians between bump centers


@dataclass
class MirroredPairConfig:
    subdiv: int = 3
    # bumps centered on the symmetry plane x = 0: (y, z) direction, width, height
    bumps: tuple = (((1.0, 0.0), 0.35, 0.40), ((0.0, 1.0), 0.25, 0.30))
    jitter: float = 0.01
    angle_jitter: float = 0.15


def flat_grid(n):
    if n < 2:
        raise ValueError("flat_grid needs n >= 2")
    xs = np.linspace(0.0, 1.0, n)
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    pos = np.stack([X.ravel(), Y.ravel(), np.zeros(n * n)], axis=1)
    idx = np.arange(n * n).reshape(n, n)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return SurfaceMesh(pos, faces)


def icosphere(subdiv=0):
    if subdiv < 0:
        raise ValueError("subdiv must be >= 0")
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    mesh = SurfaceMesh(v / np.linalg.norm(v, axis=1, keepdims=True), f)
    for _ in range(subdiv):
        mesh = midpoint_refine(mesh)
        p = mesh.positions
        mesh = SurfaceMesh(p / np.linalg.norm(p, axis=1, keepdims=True), mesh.faces)
    return mesh


def _random_directions(rng, n, min_sep, attempts=2000):
    for _ in range(attempts):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        ang = np.arccos(np.clip(d @ d.T, -1.0, 1.0))
        if np.all(ang[np.triu_indices(n, 1)] >= min_sep):
            return d
    raise ValueError("could not place bumps with the requested separation")


def bumpy_sphere(config=None, seed=0):
    """Icosphere with Gaussian bumps at random positions.

    Bump ``i`` always has width ``widths[i]`` and height ``heights[i]`` so the
    bump id is recoverable from geometry; label ``i + 1`` marks vertices within
    ``label_radius`` widths of bump ``i``, 0 is background.
    """
    cfg = config or BumpySphereConfig()
    if cfg.n_bumps > len(cfg.widths) or cfg.n_bumps > len(cfg.heights):
        raise ValueError("need a width and height for every bump")
    rng = np.random.default_rng(seed)
    base = icosphere(cfg.subdiv)
    p = base.positions
    centers = _random_directions(rng, cfg.n_bumps, cfg.min_separation)
    ang = np.arccos(np.clip(p @ centers.T, -1.0, 1.0))  # (V, n_bumps)
    w = np.asarray(cfg.widths[:cfg.n_bumps])
    h = np.asarray(cfg.heights[:cfg.n_bumps])
    radius = 1.0 + (h * np.exp(-0.5 * (ang / w) ** 2)).sum(axis=1)
    scaled = ang / w
    nearest = scaled.argmin(axis=1)
    labels = np.where(scaled[np.arange(len(p)), nearest] <= cfg.label_radius, nearest + 1, 0)
    mesh = SurfaceMesh(p * radius[:, None], base.faces)
    return Shape(mesh, labels=labels, name=f"bumpy_sphere_{seed}",
                 meta={"bump_centers": centers})


def _reflect_x(shape):
    pos = shape.positions * np.array([-1.0, 1.0, 1.0])
    faces = shape.geometry.faces[:, [0, 2, 1]]
    return SurfaceMesh(pos, faces)


def mirrored_pair(config=None, seed=0):
    """A chiral, nearly bilaterally symmetric bumpy sphere and its mirror image.

    Labels mark the side of the plane x = 0 (1 for x > 0). The mirror image
    reflects x and reverses triangle winding so normals stay outward; vertex
    order is shared, hence every vertex swaps its label between the two.
    """
    cfg = config or MirroredPairConfig()
    rng = np.random.default_rng(seed)
    base = icosphere(cfg.subdiv)
    p = base.positions
    radius = np.ones(len(p))
    for (y, z), width, height in cfg.bumps:
        theta = np.arctan2(z, y) + rng.uniform(-cfg.angle_jitter, cfg.angle_jitter)
        c = np.array([0.0, np.cos(theta), np.sin(theta)])
        width = width * rng.uniform(0.9, 1.1)
        height = height * rng.uniform(0.9, 1.1)
        ang = np.arccos(np.clip(p @ c, -1.0, 1.0))
        radius += height * np.exp(-0.5 * (ang / width) ** 2)
    radius *= 1.0 + cfg.jitter * rng.uniform(-1.0, 1.0, size=len(p))
    pos = p * radius[:, None]
    mesh = SurfaceMesh(pos, base.faces)
    mirror = _reflect_x(Shape(mesh))
    left = Shape(mesh, labels=(pos[:, 0] > 0).astype(np.int64), name=f"chiral_{seed}")
    right = Shape(mirror, labels=(mirror.positions[:, 0] > 0).astype(np.int64),
                  name=f"chiral_{seed}_mirror")
    return left, right


def generate_synthetic(kind, seed=0, **params):
    """Build a synthetic shape: ``flat_grid``, ``sphere``, ``bumpy_sphere`` or
    ``mirrored_pair`` (the last returns a tuple of two shapes)."""
    if kind == "flat_grid":
        return Shape(flat_grid(params.get("n", 10)), name="flat_grid")
    if kind == "sphere":
        return Shape(icosphere(params.get("subdiv", 2)), name="icosphere")
    if kind == "bumpy_sphere":
        return bumpy_sphere(BumpySphereConfig(**params), seed=seed)
    if kind == "mirrored_pair":
        return mirrored_pair(MirroredPairConfig(**params), seed=seed)
    raise ValueError(f"unknown synthetic kind {kind!r}")


# --------------------------------------------------------------------------
# Resampling

def sample_surface(mesh, n, seed=0):
    """Draw ``n`` area-uniform points from a triangle mesh.

    Uses numpy's PCG64 generator: a face is picked by inverse CDF of the
    cumulative face areas, then a point inside it via the square-root
    barycentric map. Returns ``(points, face_normals, face_ids)``.
    """
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("cannot sample a mesh with zero total area")
    rng = np.random.Generator(np.random.PCG64(seed))
    cdf = np.cumsum(areas) / total
    fid = np.minimum(np.searchsorted(cdf, rng.random(n), side="right"), len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    p, f = mesh.positions, mesh.faces[fid]
    a, b, c = p[f[:, 0]], p[f[:, 1]], p[f[:, 2]]
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    normals = np.cross(b - a, c - a)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return pts, normals, fid


def sample_point_cloud(mesh, n, seed=0, k_neighbors=DEFAULT_K_NEIGHBORS):
    """Sample a point cloud with face normals from a mesh (see :func:`sample_surface`).

    Given a :class:`Shape`, labels move to each sample from the nearest
    vertex of its source face and a Shape is returned; given a bare
    :class:`SurfaceMesh`, a :class:`PointCloud` is returned.
    """
    shape = mesh if isinstance(mesh, Shape) else None
    geom = shape.geometry if shape is not None else mesh
    if not isinstance(geom, SurfaceMesh):
        raise TypeError("sample_point_cloud needs a triangle mesh")
    if n < 2:
        raise ValueError("a point cloud needs at least 2 points")
    pts, normals, fid = sample_surface(geom, n, seed)
    cloud = PointCloud(pts, normals, k_neighbors=min(k_neighbors, n - 1))
    if shape is None:
        return cloud
    labels = None
    if shape.labels is not None:
        f = geom.faces[fid]
        d = np.stack([np.linalg.norm(pts - geom.positions[f[:, j]], axis=1) for j in range(3)], 1)
        labels = shape.labels[f[np.arange(n), d.argmin(axis=1)]]
    return Shape(cloud, labels=labels, class_label=shape.class_label,
                 name=f"{shape.name}_cloud{n}", meta={"source_faces": fid})


def midpoint_refine(mesh):
    """Split every triangle into four at its edge midpoints.

    New vertices are appended after the originals in sorted-edge order. For a
    labeled :class:`Shape`, a midpoint takes the label of its lower-index
    endpoint.
    """
    shape = mesh if isinstance(mesh, Shape) else None
    geom = shape.geometry if shape is not None else mesh
    V = geom.n_vertices
    edges = geom.edges()
    f = geom.faces
    key = edges[:, 0] * V + edges[:, 1]

    def mid(i, j):
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        return V + np.searchsorted(key, lo * V + hi)

    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
    faces = np.concatenate([
        np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
        np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
    ])
    p = geom.positions
    pos = np.vstack([p, 0.5 * (p[edges[:, 0]] + p[edges[:, 1]])])
    refined = SurfaceMesh(pos, faces, oriented=geom.oriented)
    if shape is None:
        return refined
    labels = None
    if shape.labels is not None:
        labels = np.concatenate([shape.labels, shape.labels[edges[:, 0]]])
    return Shape(refined, labels=labels, class_label=shape.class_label,
                 name=f"{shape.name}_refined")
