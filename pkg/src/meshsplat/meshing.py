"""Differentiable marching tetrahedra and triangle-mesh utilities.

Every extracted vertex sits on a tet edge ``(a, b)`` whose SDF values change
sign, at ``v = (f_a p_b - f_b p_a) / (f_a - f_b)``. The edge and both values are
kept as provenance so gradients can be routed back to sites and SDF values.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

ZERO_NUDGE = 1e-12
COINCIDENT_TOL = 1e-12

#: local tet edges, indexed 0..5
TET_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])


@dataclass
class ExtractedMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int64
    site_a: np.ndarray | None = None  # (V,) smaller site index of the crossing edge
    site_b: np.ndarray | None = None
    f_a: np.ndarray | None = None
    f_b: np.ndarray | None = None

    @property
    def has_provenance(self) -> bool:
        return self.site_a is not None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def weights(self) -> np.ndarray:
        """Interpolation weight ``w`` with ``v = (1 - w) p_a + w p_b``."""
        return self.f_a / (self.f_a - self.f_b)

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        p = self.vertices[self.faces]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        if normalize:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def copy(self) -> "ExtractedMesh":
        def c(x):
            return None if x is None else x.copy()

        return ExtractedMesh(self.vertices.copy(), self.faces.copy(), c(self.site_a), c(self.site_b), c(self.f_a), c(self.f_b))


def empty_mesh() -> ExtractedMesh:
    z = np.empty(0)
    zi = np.empty(0, dtype=np.int64)
    return ExtractedMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64), zi, zi.copy(), z, z.copy())


# ---------------------------------------------------------------- case table


def _reference_case_table():
    """Triangles (as local edge ids) per 4-bit negative mask, wound negative -> positive.

    Windings are fixed on the reference tet (origin + unit axes, positive
    orientation) with values +-1, so the table is correct for every positively
    oriented tet by affine invariance.
    """
    ref = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    tri = np.full((16, 3), -1, dtype=np.int64)
    quad = np.full((16, 4), -1, dtype=np.int64)
    for mask in range(16):
        neg = [(mask >> i) & 1 == 1 for i in range(4)]
        k = sum(neg)
        if k in (0, 4):
            continue
        cross = [e for e, (i, j) in enumerate(TET_EDGES) if neg[i] != neg[j]]
        mid = {e: ref[TET_EDGES[e]].mean(axis=0) for e in cross}
        inside = ref[[i for i in range(4) if neg[i]]].mean(axis=0)
        outside = ref[[i for i in range(4) if not neg[i]]].mean(axis=0)
        if len(cross) == 3:
            order = list(cross)
        else:
            # walk the 4-cycle: consecutive crossing edges share a tet vertex
            order = [cross[0]]
            rest = cross[1:]
            while rest:
                last = set(TET_EDGES[order[-1]])
                nxt = next(e for e in rest if last & set(TET_EDGES[e]))
                order.append(nxt)
                rest.remove(nxt)
        pts = np.array([mid[e] for e in order])
        nrm = np.cross(pts[1] - pts[0], pts[2] - pts[0])
        if nrm @ (outside - inside) < 0:
            order = order[::-1]
        if len(order) == 3:
            tri[mask] = order
        else:
            quad[mask] = order
    return tri, quad


TRI_TABLE, QUAD_TABLE = _reference_case_table()


# ---------------------------------------------------------------- extraction


def marching_tetrahedra(tets, sites, sdf) -> ExtractedMesh:
    """Zero level set of per-site values over a positively oriented tetrahedralization."""
    tets = np.asarray(tets, dtype=np.int64).reshape(-1, 4)
    sites = np.asarray(sites, dtype=np.float64)
    f = np.asarray(sdf, dtype=np.float64)
    if f.shape != (len(sites),):
        raise ValueError(f"sdf has shape {f.shape}, expected ({len(sites)},)")
    if np.isnan(f).any() or np.isnan(sites).any():
        raise ValueError("NaN in sites or sdf")
    if len(tets) == 0:
        return empty_mesh()
    f = np.where(np.abs(f) < ZERO_NUDGE, -ZERO_NUDGE, f)
    neg = f < 0
    mask = (neg[tets] * np.array([1, 2, 4, 8])).sum(axis=1)
    active = (mask != 0) & (mask != 15)
    t_act = np.nonzero(active)[0]
    if len(t_act) == 0:
        return empty_mesh()
    tv = tets[t_act]
    m = mask[t_act]

    ea = tv[:, TET_EDGES[:, 0]]
    eb = tv[:, TET_EDGES[:, 1]]
    lo = np.minimum(ea, eb)
    hi = np.maximum(ea, eb)
    crossing = neg[lo] != neg[hi]
    n_sites = len(sites)
    key = lo * n_sites + hi
    uniq, inv = np.unique(key[crossing], return_inverse=True)
    vid = np.full(key.shape, -1, dtype=np.int64)
    vid[crossing] = inv
    sa = uniq // n_sites
    sb = uniq % n_sites
    fa, fb = f[sa], f[sb]
    verts = (fa[:, None] * sites[sb] - fb[:, None] * sites[sa]) / (fa - fb)[:, None]

    rows = np.arange(len(tv))
    is_tri = TRI_TABLE[m, 0] >= 0
    tri_faces = vid[rows[is_tri, None], TRI_TABLE[m[is_tri]]]
    q = ~is_tri
    cyc = vid[rows[q, None], QUAD_TABLE[m[q]]]  # (Q, 4)
    first = np.argmin(cyc, axis=1) % 2  # diagonal through the smallest vertex id
    c = np.take_along_axis(cyc, (np.arange(4)[None, :] + first[:, None]) % 4, axis=1)
    quad_faces = np.stack([c[:, [0, 1, 2]], c[:, [0, 2, 3]]], axis=1)  # (Q, 2, 3)

    # keep faces in (tet, slot) order
    faces = np.empty((is_tri.sum() + 2 * q.sum(), 3), dtype=np.int64)
    owner = np.concatenate([rows[is_tri], np.repeat(rows[q], 2)])
    slot = np.concatenate([np.zeros(is_tri.sum(), dtype=np.int64), np.tile([0, 1], q.sum())])
    faces[:] = np.concatenate([tri_faces, quad_faces.reshape(-1, 3)])
    order = np.lexsort((slot, owner))
    faces = faces[order]

    p = verts[faces]
    d01 = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    d12 = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    d20 = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    keep = (d01 > COINCIDENT_TOL) & (d12 > COINCIDENT_TOL) & (d20 > COINCIDENT_TOL)
    return ExtractedMesh(verts, faces[keep], sa, sb, fa, fb)


# ---------------------------------------------------------------- gradients


@dataclass
class MeshGradients:
    d_pa: np.ndarray  # (V, 3, 3)
    d_pb: np.ndarray  # (V, 3, 3)
    d_fa: np.ndarray  # (V, 3)
    d_fb: np.ndarray  # (V, 3)


def _require_provenance(mesh: ExtractedMesh) -> None:
    if not mesh.has_provenance:
        raise ValueError("mesh has no provenance; gradients need marching_tetrahedra output")


def mt_gradients(mesh: ExtractedMesh, sites) -> MeshGradients:
    """Jacobian blocks of every vertex w.r.t. its two sites and two SDF values."""
    _require_provenance(mesh)
    sites = np.asarray(sites, dtype=np.float64)
    w = mesh.weights
    denom = (mesh.f_a - mesh.f_b)[:, None]
    eye = np.eye(3)
    return MeshGradients(
        d_pa=(1.0 - w)[:, None, None] * eye,
        d_pb=w[:, None, None] * eye,
        d_fa=(sites[mesh.site_b] - mesh.vertices) / denom,
        d_fb=(mesh.vertices - sites[mesh.site_a]) / denom,
    )


def mt_backward(mesh: ExtractedMesh, sites, grad_vertices) -> tuple[np.ndarray, np.ndarray]:
    """Pull dL/dvertices back to (dL/dsites, dL/dsdf) over all sites."""
    _require_provenance(mesh)
    sites = np.asarray(sites, dtype=np.float64)
    g = np.asarray(grad_vertices, dtype=np.float64)
    n = len(sites)
    w = mesh.weights
    denom = mesh.f_a - mesh.f_b
    ga = (1.0 - w)[:, None] * g
    gb = w[:, None] * g
    gfa = np.einsum("ij,ij->i", g, sites[mesh.site_b] - mesh.vertices) / denom
    gfb = np.einsum("ij,ij->i", g, mesh.vertices - sites[mesh.site_a]) / denom
    gs = np.zeros((n, 3))
    for c in range(3):
        gs[:, c] = np.bincount(mesh.site_a, ga[:, c], minlength=n) + np.bincount(mesh.site_b, gb[:, c], minlength=n)
    gf = np.bincount(mesh.site_a, gfa, minlength=n) + np.bincount(mesh.site_b, gfb, minlength=n)
    return gs, gf


# ---------------------------------------------------------------- topology


def edge_face_counts(faces) -> np.ndarray:
    """Number of faces bordering each distinct undirected edge."""
    f = np.asarray(faces, dtype=np.int64)
    if len(f) == 0:
        return np.empty(0, dtype=np.int64)
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


@dataclass
class ComponentReport:
    n_components: int
    n_interior: int
    interior_area_fraction: float
    face_component: np.ndarray  # (F,) component label per face
    interior: np.ndarray  # (n_components,) bool


def _face_components(mesh: ExtractedMesh) -> tuple[int, np.ndarray]:
    f = mesh.faces
    nv = mesh.n_vertices
    rows = np.concatenate([f[:, 0], f[:, 1]])
    cols = np.concatenate([f[:, 1], f[:, 2]])
    g = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(nv, nv))
    _, vlabel = connected_components(g, directed=False)
    # relabel by first appearance in face order so labels are deterministic
    flabel = vlabel[f[:, 0]]
    _, first, dense = np.unique(flabel, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return len(first), rank[dense]


def ray_crossings(origin, direction, tris) -> int:
    """Number of triangles hit by the ray ``origin + t * direction`` with t > 0 (Moller-Trumbore)."""
    if len(tris) == 0:
        return 0
    v0, v1, v2 = tris[:, 0], tris[:, 1], tris[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    pv = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pv)
    ok = np.abs(det) > 1e-300
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tv = origin - v0
    u = np.einsum("ij,ij->i", tv, pv) * inv
    qv = np.cross(tv, e1)
    v = (qv @ direction) * inv
    t = np.einsum("ij,ij->i", e2, qv) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    return int(hit.sum())


# slightly skewed axis so rays do not run along mesh edges of axis-aligned inputs
_RAY_DIR = np.array([1.0, 1.3e-3, 0.7e-3])
_RAY_DIR = _RAY_DIR / np.linalg.norm(_RAY_DIR)


def interior_components(mesh: ExtractedMesh) -> ComponentReport:
    """Split into connected components and flag those enclosed by the others.

    A component is interior when a ray from a point on it crosses the union of
    the other components an odd number of times both along +x and along -x.
    The point is the centroid of the component's largest face, which lies on
    the component itself rather than inside it.
    """
    if mesh.n_faces == 0:
        return ComponentReport(0, 0, 0.0, np.empty(0, dtype=np.int64), np.empty(0, dtype=bool))
    n, label = _face_components(mesh)
    tris = mesh.vertices[mesh.faces]
    area = mesh.face_areas()
    interior = np.zeros(n, dtype=bool)
    if n > 1:
        for c in range(n):
            own = np.nonzero(label == c)[0]
            origin = tris[own[np.argmax(area[own])]].mean(axis=0)
            others = tris[label != c]
            fwd = ray_crossings(origin, _RAY_DIR, others)
            bwd = ray_crossings(origin, -_RAY_DIR, others)
            interior[c] = fwd % 2 == 1 and bwd % 2 == 1
    total = area.sum()
    frac = float(area[interior[label]].sum() / total) if total > 0 else 0.0
    return ComponentReport(n, int(interior.sum()), frac, label, interior)


def midpoint_subdivide(mesh: ExtractedMesh) -> ExtractedMesh:
    """Split every face into four through its edge midpoints (surface unchanged)."""
    f = mesh.faces
    nv = mesh.n_vertices
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    es = np.sort(e, axis=1)
    uniq, inv = np.unique(es, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    mids = 0.5 * (mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]])
    nf = len(f)
    m01 = nv + inv[:nf]
    m12 = nv + inv[nf : 2 * nf]
    m20 = nv + inv[2 * nf :]
    faces = np.concatenate(
        [
            np.stack([f[:, 0], m01, m20], axis=1),
            np.stack([m01, f[:, 1], m12], axis=1),
            np.stack([m20, m12, f[:, 2]], axis=1),
            np.stack([m01, m12, m20], axis=1),
        ]
    )
    return ExtractedMesh(np.concatenate([mesh.vertices, mids]), faces)


def sample_surface(mesh: ExtractedMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the triangles."""
    area = mesh.face_areas()
    if mesh.n_faces == 0 or area.sum() <= 0:
        raise ValueError("cannot sample an empty mesh")
    face = rng.choice(mesh.n_faces, size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    p = mesh.vertices[mesh.faces[face]]
    return (1 - r1)[:, None] * p[:, 0] + (r1 * (1 - r2))[:, None] * p[:, 1] + (r1 * r2)[:, None] * p[:, 2]


# ---------------------------------------------------------------- file I/O


def export_mesh(mesh: ExtractedMesh, path, format: str | None = None) -> None:
    """Write ASCII OBJ or binary little-endian PLY (float32 positions, int32 indices)."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt not in ("obj", "ply"):
        raise ValueError(f"unknown mesh format {fmt!r}")
    try:
        if fmt == "obj":
            with open(path, "w") as fh:
                for v in mesh.vertices:
                    fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
                for tri in mesh.faces + 1:
                    fh.write(f"f {tri[0]} {tri[1]} {tri[2]}\n")
        else:
            header = (
                "ply\nformat binary_little_endian 1.0\n"
                f"element vertex {mesh.n_vertices}\n"
                "property float x\nproperty float y\nproperty float z\n"
                f"element face {mesh.n_faces}\n"
                "property list uchar int vertex_indices\nend_header\n"
            )
            face_dt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
            rec = np.empty(mesh.n_faces, dtype=face_dt)
            rec["n"] = 3
            rec["idx"] = mesh.faces
            with open(path, "wb") as fh:
                fh.write(header.encode("ascii"))
                fh.write(mesh.vertices.astype("<f4").tobytes())
                fh.write(rec.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write mesh to {path}: {exc.strerror or exc}") from exc


def load_mesh(path) -> ExtractedMesh:
    """Read a mesh written by :func:`export_mesh` (OBJ or binary PLY)."""
    path = Path(path)
    fmt = path.suffix.lstrip(".").lower()
    if fmt == "obj":
        verts, faces = [], []
        for line in path.read_text().splitlines():
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
        return ExtractedMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    if fmt == "ply":
        raw = path.read_bytes()
        end = raw.index(b"end_header\n") + len(b"end_header\n")
        header = raw[:end].decode("ascii").splitlines()
        if "format binary_little_endian 1.0" not in header:
            raise ValueError(f"{path}: only binary little-endian PLY is supported")
        nv = int(next(h for h in header if h.startswith("element vertex")).split()[-1])
        nf = int(next(h for h in header if h.startswith("element face")).split()[-1])
        verts = np.frombuffer(raw, dtype="<f4", count=3 * nv, offset=end).reshape(nv, 3)
        face_dt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
        rec = np.frombuffer(raw, dtype=face_dt, count=nf, offset=end + 12 * nv)
        return ExtractedMesh(verts.astype(np.float64), rec["idx"].astype(np.int64))
    raise ValueError(f"unknown mesh format {fmt!r}")


def sphere_mesh(radius: float = 1.0, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> ExtractedMesh:
    """Icosphere with outward winding (handy for tests and evaluation baselines)."""
    t = (1 + 5**0.5) / 2
    v = np.array(
        [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]],
        dtype=np.float64,
    )
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    )
    mesh = ExtractedMesh(v / np.linalg.norm(v, axis=1, keepdims=True), f)
    for _ in range(subdivisions):
        mesh = midpoint_subdivide(mesh)
        mesh.vertices /= np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    mesh.vertices = mesh.vertices * radius + np.asarray(center, dtype=np.float64)
    return mesh


__all__ = [
    "ExtractedMesh",
    "MeshGradients",
    "ComponentReport",
    "marching_tetrahedra",
    "mt_gradients",
    "mt_backward",
    "interior_components",
    "edge_face_counts",
    "midpoint_subdivide",
    "sample_surface",
    "export_mesh",
    "load_mesh",
    "sphere_mesh",
    "empty_mesh",
]
