"""3D Delaunay tetrahedralization by incremental insertion (Bowyer-Watson).

Points are inserted in Morton order into a large bootstrap tetrahedron. Each
insertion walks to a tetrahedron containing the point, grows the conflict
cavity by breadth-first search over face neighbours, and re-stars the cavity
boundary from the new point. All geometric decisions go through the exact
predicates in :mod:`meshsplat.predicates`, and cospherical ties are broken by a
symbolic perturbation whose priorities come from ``(seed, site index)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from ._jit import njit
from .predicates import in_circumsphere_perturbed, orient3d

DUPLICATE_TOL = 1e-9  # relative to the bounding-box diagonal
COPLANAR_TOL = 1e-12
SUPER_SCALE = 1e6


class DelaunayError(ValueError):
    pass


@dataclass
class Tetrahedralization:
    tets: np.ndarray  # (T, 4) int64, positively oriented, canonical order
    n_sites: int
    remap: np.ndarray = field(default=None)  # (n_sites,) representative of each site

    def __len__(self) -> int:
        return len(self.tets)


# ---------------------------------------------------------------- kernel


@njit
def _grow_1d(a, need):
    if need <= a.shape[0]:
        return a
    b = np.empty(max(need, 2 * a.shape[0]), a.dtype)
    b[: a.shape[0]] = a
    return b


@njit
def _grow_2d(a, need, fill):
    if need <= a.shape[0]:
        return a
    b = np.full((max(need, 2 * a.shape[0]), a.shape[1]), fill, a.dtype)
    b[: a.shape[0]] = a
    return b


@njit
def _contains(pts, tv, t, p):
    for i in range(4):
        a = tv[t, 0] if i != 0 else p
        b = tv[t, 1] if i != 1 else p
        c = tv[t, 2] if i != 2 else p
        d = tv[t, 3] if i != 3 else p
        if orient3d(pts[a], pts[b], pts[c], pts[d]) < 0:
            return False
    return True


@njit
def _bowyer_watson(pts, order, prio, seed):
    n_all = pts.shape[0]
    n = n_all - 4
    cap = 8 * n + 64
    tv = np.empty((cap, 4), np.int64)
    tn = np.full((cap, 4), -1, np.int64)
    alive = np.zeros(cap, np.bool_)
    stamp = np.zeros(cap, np.int64)
    tested = np.zeros(cap, np.int64)
    free = np.empty(cap, np.int64)
    n_free = 0
    tv[0, 0] = n
    tv[0, 1] = n + 1
    tv[0, 2] = n + 2
    tv[0, 3] = n + 3
    alive[0] = True
    ntet = 1
    last = 0
    state = np.uint64(seed) * np.uint64(6364136223846793005) + np.uint64(1442695040888963407)

    cav = np.empty(64, np.int64)
    bc = np.empty(64, np.int64)
    bi = np.empty(64, np.int64)
    bnb = np.empty(64, np.int64)
    bj = np.empty(64, np.int64)
    newt = np.empty(64, np.int64)
    pend_a = np.empty(192, np.int64)
    pend_b = np.empty(192, np.int64)
    pend_t = np.empty(192, np.int64)
    pend_j = np.empty(192, np.int64)

    for it in range(n):
        p = order[it]
        mark = it + 1

        # -- locate: visibility walk with randomized face order
        t = last
        steps = 0
        while True:
            state = state * np.uint64(6364136223846793005) + np.uint64(1442695040888963407)
            r = np.int64((state >> np.uint64(33)) % np.uint64(4))
            moved = False
            for kk in range(4):
                i = (kk + r) % 4
                a = tv[t, 0] if i != 0 else p
                b = tv[t, 1] if i != 1 else p
                c = tv[t, 2] if i != 2 else p
                d = tv[t, 3] if i != 3 else p
                if orient3d(pts[a], pts[b], pts[c], pts[d]) < 0:
                    t = tn[t, i]
                    moved = True
                    break
            if not moved:
                break
            steps += 1
            if steps > 4 * ntet + 100:
                # fall back to exhaustive search (never expected)
                for s in range(ntet):
                    if alive[s] and _contains(pts, tv, s, p):
                        t = s
                        break
                break

        # -- conflict cavity
        ncav = 1
        cav[0] = t
        stamp[t] = mark
        nbnd = 0
        head = 0
        while head < ncav:
            c = cav[head]
            head += 1
            for i in range(4):
                nb = tn[c, i]
                if nb >= 0:
                    if stamp[nb] == mark:
                        continue
                    if tested[nb] != mark:
                        if in_circumsphere_perturbed(pts, prio, tv[nb, 0], tv[nb, 1], tv[nb, 2], tv[nb, 3], p):
                            stamp[nb] = mark
                            cav = _grow_1d(cav, ncav + 1)
                            cav[ncav] = nb
                            ncav += 1
                            continue
                        tested[nb] = mark
                bc = _grow_1d(bc, nbnd + 1)
                bi = _grow_1d(bi, nbnd + 1)
                bnb = _grow_1d(bnb, nbnd + 1)
                bj = _grow_1d(bj, nbnd + 1)
                bc[nbnd] = c
                bi[nbnd] = i
                bnb[nbnd] = nb
                bj[nbnd] = -1
                if nb >= 0:
                    for j in range(4):
                        v = tv[nb, j]
                        if v != tv[c, 0] and v != tv[c, 1] and v != tv[c, 2] and v != tv[c, 3]:
                            bj[nbnd] = j
                nbnd += 1

        # -- release the cavity
        for k in range(ncav):
            alive[cav[k]] = False
            free = _grow_1d(free, n_free + 1)
            free[n_free] = cav[k]
            n_free += 1

        # -- star the boundary from p
        newt = _grow_1d(newt, nbnd)
        nverts = np.empty((nbnd, 4), np.int64)
        for k in range(nbnd):
            c = bc[k]
            for m in range(4):
                nverts[k, m] = tv[c, m]
            nverts[k, bi[k]] = p
        for k in range(nbnd):
            if n_free > 0:
                n_free -= 1
                s = free[n_free]
            else:
                s = ntet
                ntet += 1
                if ntet > tv.shape[0]:
                    newcap = 2 * tv.shape[0]
                    tv = _grow_2d(tv, newcap, 0)
                    tn = _grow_2d(tn, newcap, -1)
                    alive = _grow_1d(alive, newcap)
                    alive[s:] = False
                    st2 = np.zeros(newcap, np.int64)
                    st2[: stamp.shape[0]] = stamp
                    stamp = st2
                    te2 = np.zeros(newcap, np.int64)
                    te2[: tested.shape[0]] = tested
                    tested = te2
            newt[k] = s
            alive[s] = True
            stamp[s] = 0
            tested[s] = 0
            for m in range(4):
                tv[s, m] = nverts[k, m]
                tn[s, m] = -1
            tn[s, bi[k]] = bnb[k]
            if bnb[k] >= 0:
                tn[bnb[k], bj[k]] = s

        npend = 0
        need = 3 * nbnd
        pend_a = _grow_1d(pend_a, need)
        pend_b = _grow_1d(pend_b, need)
        pend_t = _grow_1d(pend_t, need)
        pend_j = _grow_1d(pend_j, need)
        for k in range(nbnd):
            s = newt[k]
            ip = bi[k]
            for j in range(4):
                if j == ip:
                    continue
                e1 = -1
                e2 = -1
                for m in range(4):
                    if m != ip and m != j:
                        if e1 < 0:
                            e1 = tv[s, m]
                        else:
                            e2 = tv[s, m]
                if e1 > e2:
                    e1, e2 = e2, e1
                found = -1
                for q in range(npend):
                    if pend_a[q] == e1 and pend_b[q] == e2:
                        found = q
                        break
                if found >= 0:
                    o = pend_t[found]
                    tn[s, j] = o
                    tn[o, pend_j[found]] = s
                    npend -= 1
                    pend_a[found] = pend_a[npend]
                    pend_b[found] = pend_b[npend]
                    pend_t[found] = pend_t[npend]
                    pend_j[found] = pend_j[npend]
                else:
                    pend_a[npend] = e1
                    pend_b[npend] = e2
                    pend_t[npend] = s
                    pend_j[npend] = j
                    npend += 1
        last = newt[0]

    count = 0
    for s in range(ntet):
        if alive[s] and tv[s, 0] < n and tv[s, 1] < n and tv[s, 2] < n and tv[s, 3] < n:
            count += 1
    out = np.empty((count, 4), np.int64)
    m = 0
    for s in range(ntet):
        if alive[s] and tv[s, 0] < n and tv[s, 1] < n and tv[s, 2] < n and tv[s, 3] < n:
            out[m] = tv[s]
            m += 1
    return out


# ---------------------------------------------------------------- driver


def _morton_order(pts: np.ndarray) -> np.ndarray:
    lo = pts.min(axis=0)
    ext = np.max(pts.max(axis=0) - lo)
    q = np.floor((pts - lo) / (ext if ext > 0 else 1.0) * 1023.0).astype(np.uint64)
    code = np.zeros(len(pts), dtype=np.uint64)
    for bit in range(10):
        for axis in range(3):
            code |= ((q[:, axis] >> np.uint64(bit)) & np.uint64(1)) << np.uint64(3 * bit + axis)
    return np.argsort(code, kind="stable")


def merge_duplicates(sites: np.ndarray, tol: float) -> np.ndarray:
    """Map each site to the smallest index of its cluster of near-coincident sites."""
    n = len(sites)
    if tol <= 0:
        _, label = np.unique(sites, axis=0, return_inverse=True)
        rep = np.full(label.max() + 1, n)
        np.minimum.at(rep, label.reshape(-1), np.arange(n))
        return rep[label.reshape(-1)]
    pairs = cKDTree(sites).query_pairs(tol, output_type="ndarray")
    if len(pairs) == 0:
        return np.arange(n)
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, label = connected_components(g, directed=False)
    rep = np.full(label.max() + 1, n)
    np.minimum.at(rep, label, np.arange(n))
    return rep[label]


def canonicalize_tets(tets: np.ndarray) -> np.ndarray:
    """Even-permute each tet so the smallest index leads, then sort rows."""
    t = np.asarray(tets, dtype=np.int64).copy()
    if len(t) == 0:
        return t.reshape(0, 4)
    # rotations that keep orientation: (0123) -> bring argmin to front
    even = np.array(
        [[0, 1, 2, 3], [1, 0, 3, 2], [2, 3, 0, 1], [3, 2, 1, 0]]
    )
    first = np.argmin(t, axis=1)
    t = np.take_along_axis(t, even[first], axis=1)
    # cyclically rotate the last three so the smaller of them comes first
    rest = t[:, 1:]
    k = np.argmin(rest, axis=1)
    idx = (np.arange(3)[None, :] + k[:, None]) % 3
    t[:, 1:] = np.take_along_axis(rest, idx, axis=1)
    order = np.lexsort(t.T[::-1])
    return t[order]


def triangulate(sites, seed: int = 0) -> Tetrahedralization:
    """Delaunay tetrahedralization of the convex hull of ``sites``."""
    sites = np.ascontiguousarray(sites, dtype=np.float64)
    if sites.ndim != 2 or sites.shape[1] != 3:
        raise DelaunayError("sites must be an (n, 3) array")
    if not np.all(np.isfinite(sites)):
        raise DelaunayError("sites contain non-finite coordinates")
    n = len(sites)
    if n < 4:
        raise DelaunayError("need at least 4 sites")
    lo, hi = sites.min(axis=0), sites.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    remap = merge_duplicates(sites, DUPLICATE_TOL * diag)
    uniq = np.unique(remap)
    if len(uniq) < 4:
        raise DelaunayError("fewer than 4 distinct sites")
    pts = sites[uniq]
    _check_not_coplanar(pts, diag)

    center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    L = SUPER_SCALE * max(diag, 1e-300)
    sup = center + L * np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    if orient3d(sup[0], sup[1], sup[2], sup[3]) < 0:
        sup[[2, 3]] = sup[[3, 2]]
    allp = np.ascontiguousarray(np.concatenate([pts, sup]))
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x5EED])
    prio = np.empty(len(allp), dtype=np.int64)
    # priorities are keyed on the original site index so duplicates do not shift them
    site_prio = rng.permutation(n).astype(np.int64)
    prio[: len(pts)] = site_prio[uniq]
    prio[len(pts) :] = -np.arange(1, 5)
    order = _morton_order(pts).astype(np.int64)
    tets = _bowyer_watson(allp, order, prio, np.int64(seed) & 0x7FFFFFFF)
    return Tetrahedralization(tets=canonicalize_tets(uniq[tets]), n_sites=n, remap=remap)


def _check_not_coplanar(pts: np.ndarray, diag: float) -> None:
    p0 = pts[0]
    d1 = np.linalg.norm(pts - p0, axis=1)
    p1 = pts[np.argmax(d1)]
    u = (p1 - p0) / np.linalg.norm(p1 - p0)
    off = (pts - p0) - np.outer((pts - p0) @ u, u)
    d2 = np.linalg.norm(off, axis=1)
    if d2.max() <= COPLANAR_TOL * diag:
        raise DelaunayError("all sites are collinear")
    p2 = pts[np.argmax(d2)]
    nrm = np.cross(p1 - p0, p2 - p0)
    nrm /= np.linalg.norm(nrm)
    d3 = np.abs((pts - p0) @ nrm)
    if d3.max() <= COPLANAR_TOL * diag:
        raise DelaunayError("all sites are coplanar")


# ---------------------------------------------------------------- checks


def tet_volumes(sites: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p = np.asarray(sites)[np.asarray(tets)]
    return np.einsum("ij,ij->i", p[:, 1] - p[:, 0], np.cross(p[:, 2] - p[:, 0], p[:, 3] - p[:, 0])) / 6.0


def circumspheres(sites: np.ndarray, tets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(sites, dtype=np.float64)[np.asarray(tets)]
    a = p[:, 0]
    A = p[:, 1:] - a[:, None, :]
    rhs = 0.5 * np.sum(A * A, axis=2)
    with np.errstate(all="ignore"):
        x = np.linalg.solve(A, rhs[..., None])[..., 0]
    return a + x, np.linalg.norm(x, axis=1)


@njit
def _violations(sites, tets, centers, radii, rel_tol):
    out_t = []
    out_s = []
    out_d = []
    n = sites.shape[0]
    for t in range(tets.shape[0]):
        c = centers[t]
        r = radii[t]
        if not np.isfinite(r):
            continue
        for s in range(n):
            if s == tets[t, 0] or s == tets[t, 1] or s == tets[t, 2] or s == tets[t, 3]:
                continue
            dx = sites[s, 0] - c[0]
            dy = sites[s, 1] - c[1]
            dz = sites[s, 2] - c[2]
            depth = r - np.sqrt(dx * dx + dy * dy + dz * dz)
            if depth > rel_tol * r:
                out_t.append(t)
                out_s.append(s)
                out_d.append(depth)
    return out_t, out_s, out_d


@dataclass
class ViolationReport:
    tet: np.ndarray
    site: np.ndarray
    depth: np.ndarray  # how far inside the circumsphere the site is

    def __len__(self) -> int:
        return len(self.tet)

    def __bool__(self) -> bool:
        return len(self.tet) > 0


def verify_delaunay(sites, tets, rel_tol: float = 1e-7, ignore=None) -> ViolationReport:
    """Brute-force empty-circumsphere check of every tet against every site.

    ``ignore`` lists site indices that are not Delaunay vertices (for example
    merged duplicates) and should not be tested.
    """
    sites = np.ascontiguousarray(sites, dtype=np.float64)
    tets = np.ascontiguousarray(tets, dtype=np.int64).reshape(-1, 4)
    if len(tets) == 0:
        return ViolationReport(np.empty(0, int), np.empty(0, int), np.empty(0))
    centers, radii = circumspheres(sites, tets)
    test_sites = sites
    if ignore is not None and len(ignore):
        test_sites = sites.copy()
        test_sites[np.asarray(ignore)] = np.inf
    t, s, d = _violations(test_sites, tets, centers, radii, rel_tol)
    return ViolationReport(np.asarray(list(t), dtype=np.int64), np.asarray(list(s), dtype=np.int64), np.asarray(list(d), dtype=np.float64))


def face_incidence(tets: np.ndarray) -> np.ndarray:
    """Count of tets incident to every distinct triangular face."""
    t = np.asarray(tets)
    faces = np.concatenate([t[:, [1, 2, 3]], t[:, [0, 2, 3]], t[:, [0, 1, 3]], t[:, [0, 1, 2]]])
    faces = np.sort(faces, axis=1)
    _, counts = np.unique(faces, axis=0, return_counts=True)
    return counts
