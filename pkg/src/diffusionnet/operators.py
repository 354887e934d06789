"""Discrete operators on meshes and point clouds, plus their on-disk cache.

All matrices are scipy CSR. ``L`` is the positive semi-definite weak
Laplacian (``M^{-1} L`` approximates minus the Laplace-Beltrami operator),
``mass`` is the lumped diagonal of ``M`` and ``G`` is the complex gradient
matrix whose rows map vertex values to tangent vectors ``a + ib`` expressed
in the per-vertex frame ``(e1, e2)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay, QhullError, cKDTree

from .autodiff import SplitSparse
from .geometry import Shape, SurfaceMesh
from .spectral import EigenBasis, solve_eigenbasis

log = logging.getLogger(__name__)

COT_CLAMP = 1e6
DEGENERATE_AREA = 1e-14  # relative to the squared bounding-box diagonal
CACHE_SCHEMA_VERSION = 1


class CacheError(ValueError):
    pass


class StaleCacheError(CacheError):
    pass


@dataclass(frozen=True, eq=False)
class TangentFrames:
    normals: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    def as_array(self):
        """(V, 9) rows ``[e1, e2, n]``."""
        return np.hstack([self.e1, self.e2, self.normals])

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64).reshape(-1, 9)
        return cls(normals=a[:, 6:9], e1=a[:, 0:3], e2=a[:, 3:6])


@dataclass(frozen=True, eq=False)
class GeometryOperators:
    L: sp.csr_matrix
    mass: np.ndarray
    frames: TangentFrames
    G: sp.csr_matrix
    evals: np.ndarray
    evecs: np.ndarray
    oriented: bool
    shape_hash: str
    k_neighbors: int = 0
    n_faces: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def k(self):
        return len(self.evals)

    @property
    def n_vertices(self):
        return len(self.mass)

    @property
    def basis(self):
        return EigenBasis(self.evals, self.evecs)

    @property
    def normals(self):
        return self.frames.normals

    @cached_property
    def G_split(self):
        return SplitSparse(self.G)

    def permuted(self, perm):
        """Operators for the shape whose vertex ``i`` is old vertex ``perm[i]``."""
        perm = np.asarray(perm)
        P = sp.eye(len(perm), format="csr")[perm]
        fr = self.frames
        return GeometryOperators(
            L=_canonical(P @ self.L @ P.T), mass=self.mass[perm],
            frames=TangentFrames(fr.normals[perm], fr.e1[perm], fr.e2[perm]),
            G=_canonical(P @ self.G @ P.T), evals=self.evals, evecs=self.evecs[perm],
            oriented=self.oriented, shape_hash=self.shape_hash + ":perm",
            k_neighbors=self.k_neighbors, n_faces=self.n_faces, stats=dict(self.stats))


def _canonical(A):
    A = sp.csr_matrix(A)
    A.sum_duplicates()
    A.sort_indices()
    A.indptr = A.indptr.astype(np.int64)
    A.indices = A.indices.astype(np.int64)
    return A


# --------------------------------------------------------------------------
# Mesh Laplacian and mass

def _corner_cotans(pos, faces):
    """Cotangent at each corner and face areas; corner c is opposite edge (c+1, c+2)."""
    p0, p1, p2 = pos[faces[:, 0]], pos[faces[:, 1]], pos[faces[:, 2]]
    area2 = np.linalg.norm(np.cross(p1 - p0, p2 - p0), axis=1)
    cots = np.empty((len(faces), 3))
    for c, (a, b, o) in enumerate(((p1, p2, p0), (p2, p0, p1), (p0, p1, p2))):
        u, v = a - o, b - o
        with np.errstate(divide="ignore", invalid="ignore"):
            cots[:, c] = np.einsum("ij,ij->i", u, v) / area2
    return np.clip(cots, -COT_CLAMP, COT_CLAMP), 0.5 * area2


def _degenerate_mask(pos, areas):
    diag2 = float(np.sum((pos.max(axis=0) - pos.min(axis=0)) ** 2)) if len(pos) else 0.0
    return areas < DEGENERATE_AREA * diag2


def _assemble_cotan(pos, faces, V, weight=1.0):
    cots, areas = _corner_cotans(pos, faces)
    bad = _degenerate_mask(pos, areas)
    keep = ~bad
    f, cots = faces[keep], cots[keep]
    w = np.broadcast_to(np.asarray(weight, dtype=np.float64), (len(faces),))[keep]
    rows, cols, vals = [], [], []
    for c in range(3):
        i, j = f[:, (c + 1) % 3], f[:, (c + 2) % 3]
        half = -0.5 * w * cots[:, c]
        rows += [i, j]
        cols += [j, i]
        vals += [half, half]
    rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    off = sp.coo_matrix((vals, (rows, cols)), shape=(V, V)).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return _canonical(off + sp.diags(diag)), int(bad.sum())


def build_cotan_laplacian(mesh, return_stats=False):
    """Cotan weak Laplacian; degenerate faces are skipped and counted."""
    L, n_bad = _assemble_cotan(mesh.positions, mesh.faces, mesh.n_vertices)
    if n_bad:
        log.warning("skipped %d degenerate face(s) in Laplacian assembly", n_bad)
    return (L, {"degenerate_faces": n_bad}) if return_stats else L


def _lump_mass(V, faces, areas, weight=1.0):
    mass = np.zeros(V)
    w = np.broadcast_to(np.asarray(weight, dtype=np.float64), (len(faces),))
    for c in range(3):
        np.add.at(mass, faces[:, c], w * areas / 3.0)
    return mass


def _fix_isolated(mass):
    zero = mass <= 0
    n = int(zero.sum())
    if n:
        warnings.warn(f"{n} vertex/vertices with zero incident area; assigning tiny mass",
                      stacklevel=3)
        mass = mass.copy()
        mass[zero] = 1e-12 * mass[~zero].mean() if np.any(~zero) else 1e-12
    return mass, n


def build_mass_matrix(mesh):
    """Lumped mass: a third of every incident face area. Returns a (V,) array."""
    areas = mesh.face_areas()
    if not areas.sum() > 0:
        raise ValueError("mesh has zero total area")
    mass, _ = _fix_isolated(_lump_mass(mesh.n_vertices, mesh.faces, areas))
    return mass


# --------------------------------------------------------------------------
# Normals and frames

def _mesh_vertex_normals(mesh):
    pos, f = mesh.positions, mesh.faces
    fn = np.cross(pos[f[:, 1]] - pos[f[:, 0]], pos[f[:, 2]] - pos[f[:, 0]])
    fn_len = np.linalg.norm(fn, axis=1, keepdims=True)
    fn = np.divide(fn, fn_len, out=np.zeros_like(fn), where=fn_len > 0)
    normals = np.zeros_like(pos)
    for c in range(3):
        a, b = pos[f[:, (c + 1) % 3]] - pos[f[:, c]], pos[f[:, (c + 2) % 3]] - pos[f[:, c]]
        cosang = np.einsum("ij,ij->i", a, b) / np.maximum(
            np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-300)
        ang = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(normals, f[:, c], ang[:, None] * fn)
    return normals


def _pca_normals(pos, k):
    k = min(k, len(pos) - 1)
    _, nbr = cKDTree(pos).query(pos, k + 1)
    d = pos[nbr] - pos[nbr].mean(axis=1, keepdims=True)
    cov = np.einsum("vki,vkj->vij", d, d)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def frames_from_normals(normals):
    """Deterministic frames: e1 is the projected x-axis (y-axis when the normal
    is within ~8 degrees of x), e2 = n x e1."""
    n = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    ref = np.zeros_like(n)
    use_y = np.abs(n[:, 0]) > 0.99
    ref[~use_y, 0] = 1.0
    ref[use_y, 1] = 1.0
    e1 = ref - np.einsum("ij,ij->i", ref, n)[:, None] * n
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(n, e1)
    return TangentFrames(normals=n, e1=e1, e2=e2)


def compute_normals_and_frames(shape):
    """Angle-weighted vertex normals for meshes; given or PCA normals for clouds."""
    geom = shape.geometry if isinstance(shape, Shape) else shape
    if isinstance(geom, SurfaceMesh):
        normals = _mesh_vertex_normals(geom)
        bad = np.linalg.norm(normals, axis=1) < 1e-12
        if np.any(bad):
            log.warning("%d vertex normal(s) degenerate; using covariance fallback", bad.sum())
            normals[bad] = _pca_normals(geom.positions, 10)[bad]
    elif geom.normals is not None:
        normals = np.array(geom.normals)
    else:
        normals = _pca_normals(geom.positions, geom.k_neighbors)
    return frames_from_normals(normals)


# --------------------------------------------------------------------------
# Point-cloud Laplacian

def _knn(pos, k):
    _, nbr = cKDTree(pos).query(pos, k + 1)
    out = np.empty((len(pos), k), dtype=np.int64)
    for i, row in enumerate(nbr):
        row = row[row != i]
        out[i] = row[:k]
    return out


def build_point_cloud_operators(cloud, frames=None, return_stats=False):
    """Weak Laplacian and lumped mass from local tangent-plane triangulations.

    Every point's k nearest neighbors are projected onto its tangent plane and
    Delaunay-triangulated; the triangles touching the point contribute their
    cotan weights and one-third areas (from true 3D positions). Each triangle
    would ideally be found from all three of its corners, so contributions are
    divided by three. Degenerate neighborhoods fall back to uniform graph
    weights.
    """
    pos = cloud.positions
    V, k = len(pos), cloud.k_neighbors
    if not 3 <= k < V:
        raise ValueError(f"need 3 <= k_neighbors < V, got k={k}, V={V}")
    frames = frames if frames is not None else compute_normals_and_frames(cloud)
    nbr = _knn(pos, k)
    tris = []
    fallback = []
    for i in range(V):
        idx = np.concatenate([[i], nbr[i]])
        d = pos[idx] - pos[i]
        uv = np.stack([d @ frames.e1[i], d @ frames.e2[i]], axis=1)
        try:
            simp = Delaunay(uv).simplices
        except (QhullError, ValueError):
            fallback.append(i)
            continue
        ring = simp[np.any(simp == 0, axis=1)]
        if len(ring) == 0:
            fallback.append(i)
            continue
        # orient consistently with the normal so the triangle list is reusable
        a, b, c = uv[ring[:, 0]], uv[ring[:, 1]], uv[ring[:, 2]]
        flip = ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])) < 0
        ring[flip] = ring[flip][:, [0, 2, 1]]
        tris.append(idx[ring])
    faces = np.concatenate(tris) if tris else np.zeros((0, 3), dtype=np.int64)
    L, n_bad = _assemble_cotan(pos, faces, V, weight=1.0 / 3.0)
    _, areas = _corner_cotans(pos, faces)
    areas = np.where(_degenerate_mask(pos, areas), 0.0, areas)
    mass = _lump_mass(V, faces, areas, weight=1.0 / 3.0)

    if fallback:
        log.warning("%d degenerate neighborhood(s) use uniform graph weights", len(fallback))
        fb = np.array(fallback)
        rows = np.repeat(fb, k)
        cols = nbr[fb].ravel()
        w = np.full(len(rows), 0.5 / k)
        W = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([rows, cols]),
                                                    np.concatenate([cols, rows]))), shape=(V, V))
        W = W.tocsr()
        L = _canonical(L - W + sp.diags(np.asarray(W.sum(axis=1)).ravel()))
        r2 = np.sum((pos[nbr[fb, -1]] - pos[fb]) ** 2, axis=1)
        mass[fb] += np.pi * r2 / (k + 1)
    L = _canonical(0.5 * (L + L.T))
    # exact zero row sums after symmetrization
    L = _canonical(L - sp.diags(np.asarray(L.sum(axis=1)).ravel()))
    mass, n_iso = _fix_isolated(mass)
    stats = {"degenerate_faces": n_bad, "fallback_neighborhoods": len(fallback),
             "isolated_vertices": n_iso}
    return (L, mass, stats) if return_stats else (L, mass)


# --------------------------------------------------------------------------
# Gradient matrix

def _mesh_neighbors(mesh):
    e = mesh.edges()
    V = mesh.n_vertices
    A = sp.coo_matrix((np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                      shape=(V, V)).tocsr()
    A.sort_indices()
    return [A.indices[A.indptr[v]:A.indptr[v + 1]] for v in range(V)]


def build_gradient_matrix(shape, frames, return_stats=False):
    """Least-squares tangent gradients assembled into a complex (V, V) matrix.

    Row ``v`` fits ``g = (D^T D)^{-1} D^T (f_j - f_v)`` over the projected
    neighbor displacements ``D`` (1-ring on meshes, kNN on clouds); the weight
    on neighbor ``j`` is ``g_1 + i g_2`` and the center weight makes the row
    sum vanish.
    """
    geom = shape.geometry if isinstance(shape, Shape) else shape
    pos = geom.positions
    V = len(pos)
    if isinstance(geom, SurfaceMesh):
        neighbors = _mesh_neighbors(geom)
    else:
        neighbors = list(_knn(pos, geom.k_neighbors))
    deg = np.array([len(n) for n in neighbors])
    rows, cols, vals = [], [], []
    n_reg = 0
    for d in np.unique(deg):
        verts = np.flatnonzero(deg == d)
        if d == 0:
            n_reg += len(verts)
            continue
        nb = np.stack([neighbors[v] for v in verts])
        disp = pos[nb] - pos[verts][:, None, :]
        D = np.stack([np.einsum("vjk,vk->vj", disp, frames.e1[verts]),
                      np.einsum("vjk,vk->vj", disp, frames.e2[verts])], axis=2)
        DtD = np.einsum("vji,vjk->vik", D, D)
        tr = np.trace(DtD, axis1=1, axis2=2)
        lam_min = np.linalg.eigvalsh(DtD)[:, 0]
        bad = lam_min <= 1e-12 * tr
        if np.any(bad):
            n_reg += int(bad.sum())
            eps = 1e-8 * np.mean(np.sum(D[bad] ** 2, axis=2), axis=1)
            eps = np.where(eps > 0, eps, 1e-30)
            DtD[bad] += eps[:, None, None] * np.eye(2)
        W = np.linalg.solve(DtD, np.transpose(D, (0, 2, 1)))  # (n, 2, d)
        w = W[:, 0, :] + 1j * W[:, 1, :]
        rows += [np.repeat(verts, d), verts]
        cols += [nb.ravel(), verts]
        vals += [w.ravel(), -w.sum(axis=1)]
    if n_reg:
        warnings.warn(f"{n_reg} rank-deficient gradient stencil(s) regularized", stacklevel=2)
    G = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(V, V)).tocsr()
    G = _canonical(G)
    return (G, {"regularized_stencils": n_reg}) if return_stats else G


# --------------------------------------------------------------------------
# Full bundle and cache

def shape_hash(shape):
    geom = shape.geometry if isinstance(shape, Shape) else shape
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(geom.positions, dtype="<f8").tobytes())
    if isinstance(geom, SurfaceMesh):
        h.update(b"faces")
        h.update(np.ascontiguousarray(geom.faces, dtype="<i8").tobytes())
    elif geom.normals is not None:
        h.update(b"normals")
        h.update(np.ascontiguousarray(geom.normals, dtype="<f8").tobytes())
    return h.hexdigest()


def compute_operators(shape, k=128, frames=None):
    """Assemble L, M, frames, G and the first ``k`` eigenpairs for a shape."""
    geom = shape.geometry if isinstance(shape, Shape) else shape
    frames = frames if frames is not None else compute_normals_and_frames(geom)
    if isinstance(geom, SurfaceMesh):
        L, stats = build_cotan_laplacian(geom, return_stats=True)
        mass = build_mass_matrix(geom)
        knn, n_faces = 0, geom.n_faces
    else:
        L, mass, stats = build_point_cloud_operators(geom, frames, return_stats=True)
        knn, n_faces = geom.k_neighbors, 0
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        G, gstats = build_gradient_matrix(geom, frames, return_stats=True)
    for w in caught:
        log.warning("%s", w.message)
    stats.update(gstats)
    basis = solve_eigenbasis(L, mass, k)
    return GeometryOperators(L=L, mass=mass, frames=frames, G=G, evals=basis.evals,
                             evecs=basis.evecs, oriented=bool(geom.oriented),
                             shape_hash=shape_hash(geom), k_neighbors=knn,
                             n_faces=n_faces, stats=stats)


def _write_csr(path, A, complex_values=False):
    vals = A.data.astype(np.complex128 if complex_values else np.float64)
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(A.indptr, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(A.indices, dtype="<i8").tobytes())
        if complex_values:
            fh.write(np.ascontiguousarray(vals.view(np.float64), dtype="<f8").tobytes())
        else:
            fh.write(np.ascontiguousarray(vals, dtype="<f8").tobytes())
    return {"rows": A.shape[0], "cols": A.shape[1], "nnz": int(A.nnz),
            "indptr": "<i8", "indices": "<i8",
            "values": "complex-interleaved <f8" if complex_values else "<f8"}


def _read_csr(path, desc, complex_values=False):
    raw = Path(path).read_bytes()
    n, nnz = desc["rows"], desc["nnz"]
    expected = 8 * (n + 1) + 8 * nnz + 8 * nnz * (2 if complex_values else 1)
    if len(raw) != expected:
        raise CacheError(f"{path}: size {len(raw)} bytes, expected {expected}")
    indptr = np.frombuffer(raw, "<i8", n + 1, 0).astype(np.int64)
    indices = np.frombuffer(raw, "<i8", nnz, 8 * (n + 1)).astype(np.int64)
    vals = np.frombuffer(raw, "<f8", -1, 8 * (n + 1 + nnz)).astype(np.float64)
    if complex_values:
        vals = vals.view(np.complex128)
    return sp.csr_matrix((vals, indices, indptr), shape=(n, desc["cols"]))


def _write_array(path, a):
    a = np.ascontiguousarray(a, dtype="<f8")
    Path(path).write_bytes(a.tobytes())
    return {"shape": list(a.shape), "dtype": "<f8"}


def _read_array(path, desc):
    raw = Path(path).read_bytes()
    shape = tuple(desc["shape"])
    if len(raw) != 8 * int(np.prod(shape)):
        raise CacheError(f"{path}: size {len(raw)} bytes does not match shape {shape}")
    return np.frombuffer(raw, "<f8").astype(np.float64).reshape(shape)


def save_operators(ops, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {
        "L.csr": _write_csr(d / "L.csr", ops.L),
        "mass.f64": _write_array(d / "mass.f64", ops.mass),
        "evals.f64": _write_array(d / "evals.f64", ops.evals),
        "evecs.f64": _write_array(d / "evecs.f64", ops.evecs),
        "grad.csr": _write_csr(d / "grad.csr", ops.G, complex_values=True),
        "frames.f64": _write_array(d / "frames.f64", ops.frames.as_array()),
        "normals.f64": _write_array(d / "normals.f64", ops.frames.normals),
    }
    manifest = {
        "schema_version": CACHE_SCHEMA_VERSION, "shape_hash": ops.shape_hash,
        "V": ops.n_vertices, "F": ops.n_faces, "k": ops.k, "k_neighbors": ops.k_neighbors,
        "oriented": ops.oriented, "arrays": arrays,
        "stats": {k: int(v) for k, v in sorted(ops.stats.items())},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_operators(directory, shape=None, k=None, k_neighbors=None):
    """Load a cache; raises :class:`StaleCacheError` if it does not match the
    requested shape or parameters."""
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError:
        raise CacheError(f"no operator cache at {d} (run `diffusionnet precompute`)") from None
    except json.JSONDecodeError as exc:
        raise CacheError(f"{d / 'manifest.json'}: corrupt manifest ({exc})") from None
    if manifest.get("schema_version") != CACHE_SCHEMA_VERSION:
        raise CacheError(f"{d}: cache schema {manifest.get('schema_version')} "
                         f"!= supported {CACHE_SCHEMA_VERSION}")
    if k is not None and manifest["k"] != k:
        raise StaleCacheError(f"{d}: cache has k={manifest['k']}, requested k={k}")
    if k_neighbors is not None and manifest["F"] == 0 and manifest["k_neighbors"] != k_neighbors:
        raise StaleCacheError(f"{d}: cache has k_neighbors={manifest['k_neighbors']}, "
                              f"requested {k_neighbors}")
    if shape is not None and shape_hash(shape) != manifest["shape_hash"]:
        raise StaleCacheError(f"{d}: cache was built for a different shape (hash mismatch)")
    arr = manifest["arrays"]
    L = _read_csr(d / "L.csr", arr["L.csr"])
    G = _read_csr(d / "grad.csr", arr["grad.csr"], complex_values=True)
    mass = _read_array(d / "mass.f64", arr["mass.f64"])
    evals = _read_array(d / "evals.f64", arr["evals.f64"])
    evecs = _read_array(d / "evecs.f64", arr["evecs.f64"])
    frames = TangentFrames.from_array(_read_array(d / "frames.f64", arr["frames.f64"]))
    V = manifest["V"]
    if L.shape != (V, V) or G.shape != (V, V) or len(mass) != V or evecs.shape != (V, manifest["k"]):
        raise CacheError(f"{d}: array dimensions disagree with manifest V={V}")
    return GeometryOperators(L=L, mass=mass, frames=frames, G=G, evals=evals, evecs=evecs,
                             oriented=bool(manifest["oriented"]),
                             shape_hash=manifest["shape_hash"],
                             k_neighbors=manifest["k_neighbors"], n_faces=manifest["F"],
                             stats=dict(manifest.get("stats", {})))
