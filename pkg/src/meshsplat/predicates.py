"""Robust orientation and in-sphere predicates.

Each predicate first evaluates the determinant in floating point together with
a forward error bound; only when the result is not certified does it fall back
to exact evaluation with floating-point expansion arithmetic (sums of
non-overlapping doubles, Shewchuk 1997). Inputs are plain doubles, so every
intermediate difference is representable exactly as a two-term expansion.
Exactness assumes no intermediate product underflows, which holds for
coordinates that are zero or larger than about 1e-60 in magnitude.

Sign conventions
----------------
``orient3d(a, b, c, d)`` is ``det[b - a; c - a; d - a]``: positive for a
right-handed tetrahedron.

``insphere(a, b, c, d, e)`` is ``det`` of the rows ``[p - e, |p - e|^2]`` for
``p = a, b, c, d``. For a positively oriented ``abcd`` it is negative when
``e`` lies strictly inside the circumsphere.
"""
from __future__ import annotations

import numpy as np

from ._jit import njit

EPS = np.finfo(np.float64).eps / 2  # 2^-53
SPLITTER = 134217729.0  # 2^27 + 1
O3D_BOUND = (8.0 + 64.0 * EPS) * EPS
ISP_BOUND = (18.0 + 256.0 * EPS) * EPS


# ---------------------------------------------------------------- error-free transforms


@njit(inline="always")
def _two_sum(a, b):
    x = a + b
    bv = x - a
    av = x - bv
    return x, (a - av) + (b - bv)


@njit(inline="always")
def _fast_two_sum(a, b):
    x = a + b
    return x, b - (x - a)


@njit(inline="always")
def _two_diff(a, b):
    x = a - b
    bv = a - x
    av = x + bv
    return x, (a - av) + (bv - b)


@njit(inline="always")
def _split(a):
    c = SPLITTER * a
    abig = c - a
    ahi = c - abig
    return ahi, a - ahi


@njit(inline="always")
def _two_prod_presplit(a, b, bhi, blo):
    x = a * b
    ahi, alo = _split(a)
    err1 = x - ahi * bhi
    err2 = err1 - alo * bhi
    err3 = err2 - ahi * blo
    return x, alo * blo - err3


# ---------------------------------------------------------------- expansions


@njit
def exp_from_diff(a, b):
    x, y = _two_diff(a, b)
    if y == 0.0:
        out = np.empty(1)
        out[0] = x
    else:
        out = np.empty(2)
        out[0] = y
        out[1] = x
    return out


@njit
def exp_sum(e, f):
    """Exact sum of two expansions (fast expansion sum with zero elimination)."""
    elen = e.shape[0]
    flen = f.shape[0]
    h = np.empty(elen + flen)
    ei = 0
    fi = 0
    enow = e[0]
    fnow = f[0]
    if (fnow > enow) == (fnow > -enow):
        q = enow
        ei += 1
    else:
        q = fnow
        fi += 1
    hi = 0
    if ei < elen and fi < flen:
        enow = e[ei]
        fnow = f[fi]
        if (fnow > enow) == (fnow > -enow):
            q, hh = _fast_two_sum(enow, q)
            ei += 1
        else:
            q, hh = _fast_two_sum(fnow, q)
            fi += 1
        if hh != 0.0:
            h[hi] = hh
            hi += 1
        while ei < elen and fi < flen:
            enow = e[ei]
            fnow = f[fi]
            if (fnow > enow) == (fnow > -enow):
                q, hh = _two_sum(q, enow)
                ei += 1
            else:
                q, hh = _two_sum(q, fnow)
                fi += 1
            if hh != 0.0:
                h[hi] = hh
                hi += 1
    while ei < elen:
        q, hh = _two_sum(q, e[ei])
        ei += 1
        if hh != 0.0:
            h[hi] = hh
            hi += 1
    while fi < flen:
        q, hh = _two_sum(q, f[fi])
        fi += 1
        if hh != 0.0:
            h[hi] = hh
            hi += 1
    if q != 0.0 or hi == 0:
        h[hi] = q
        hi += 1
    return h[:hi].copy()


@njit
def exp_scale(e, b):
    """Exact product of an expansion and a double."""
    elen = e.shape[0]
    h = np.empty(2 * elen)
    bhi, blo = _split(b)
    q, hh = _two_prod_presplit(e[0], b, bhi, blo)
    hi = 0
    if hh != 0.0:
        h[hi] = hh
        hi += 1
    for i in range(1, elen):
        p1, p0 = _two_prod_presplit(e[i], b, bhi, blo)
        s, hh = _two_sum(q, p0)
        if hh != 0.0:
            h[hi] = hh
            hi += 1
        q, hh = _fast_two_sum(p1, s)
        if hh != 0.0:
            h[hi] = hh
            hi += 1
    if q != 0.0 or hi == 0:
        h[hi] = q
        hi += 1
    return h[:hi].copy()


@njit
def exp_mul(e, f):
    acc = exp_scale(e, f[0])
    for i in range(1, f.shape[0]):
        acc = exp_sum(acc, exp_scale(e, f[i]))
    return acc


@njit
def exp_neg(e):
    return -e


@njit
def exp_sign(e):
    v = e[e.shape[0] - 1]
    if v > 0.0:
        return 1
    if v < 0.0:
        return -1
    return 0


@njit
def _det3_exact(ax, ay, az, bx, by, bz, cx, cy, cz):
    """Exact det of rows a, b, c (each entry an expansion)."""
    t1 = exp_sum(exp_mul(by, cz), exp_neg(exp_mul(bz, cy)))
    t2 = exp_sum(exp_mul(bz, cx), exp_neg(exp_mul(bx, cz)))
    t3 = exp_sum(exp_mul(bx, cy), exp_neg(exp_mul(by, cx)))
    return exp_sum(exp_sum(exp_mul(ax, t1), exp_mul(ay, t2)), exp_mul(az, t3))


# ---------------------------------------------------------------- orientation


@njit
def orient3d_exact(a, b, c, d):
    bx = exp_from_diff(b[0], a[0])
    by = exp_from_diff(b[1], a[1])
    bz = exp_from_diff(b[2], a[2])
    cx = exp_from_diff(c[0], a[0])
    cy = exp_from_diff(c[1], a[1])
    cz = exp_from_diff(c[2], a[2])
    dx = exp_from_diff(d[0], a[0])
    dy = exp_from_diff(d[1], a[1])
    dz = exp_from_diff(d[2], a[2])
    return exp_sign(_det3_exact(bx, by, bz, cx, cy, cz, dx, dy, dz))


@njit
def orient3d(a, b, c, d):
    """Sign of det[b - a; c - a; d - a] (exact)."""
    bx = b[0] - a[0]
    by = b[1] - a[1]
    bz = b[2] - a[2]
    cx = c[0] - a[0]
    cy = c[1] - a[1]
    cz = c[2] - a[2]
    dx = d[0] - a[0]
    dy = d[1] - a[1]
    dz = d[2] - a[2]
    m1 = cy * dz
    m2 = cz * dy
    m3 = cz * dx
    m4 = cx * dz
    m5 = cx * dy
    m6 = cy * dx
    det = bx * (m1 - m2) + by * (m3 - m4) + bz * (m5 - m6)
    perm = (
        abs(bx) * (abs(m1) + abs(m2))
        + abs(by) * (abs(m3) + abs(m4))
        + abs(bz) * (abs(m5) + abs(m6))
    )
    bound = O3D_BOUND * perm
    if det > bound:
        return 1
    if -det > bound:
        return -1
    return orient3d_exact(a, b, c, d)


@njit
def orient3d_value(a, b, c, d):
    """Floating-point signed volume times six (not robust)."""
    bx = b[0] - a[0]
    by = b[1] - a[1]
    bz = b[2] - a[2]
    cx = c[0] - a[0]
    cy = c[1] - a[1]
    cz = c[2] - a[2]
    dx = d[0] - a[0]
    dy = d[1] - a[1]
    dz = d[2] - a[2]
    return bx * (cy * dz - cz * dy) + by * (cz * dx - cx * dz) + bz * (cx * dy - cy * dx)


# ---------------------------------------------------------------- in-sphere


@njit
def _lift_exact(x, y, z):
    return exp_sum(exp_sum(exp_mul(x, x), exp_mul(y, y)), exp_mul(z, z))


@njit
def insphere_exact(a, b, c, d, e):
    ax = exp_from_diff(a[0], e[0])
    ay = exp_from_diff(a[1], e[1])
    az = exp_from_diff(a[2], e[2])
    bx = exp_from_diff(b[0], e[0])
    by = exp_from_diff(b[1], e[1])
    bz = exp_from_diff(b[2], e[2])
    cx = exp_from_diff(c[0], e[0])
    cy = exp_from_diff(c[1], e[1])
    cz = exp_from_diff(c[2], e[2])
    dx = exp_from_diff(d[0], e[0])
    dy = exp_from_diff(d[1], e[1])
    dz = exp_from_diff(d[2], e[2])
    bcd = _det3_exact(bx, by, bz, cx, cy, cz, dx, dy, dz)
    acd = _det3_exact(ax, ay, az, cx, cy, cz, dx, dy, dz)
    abd = _det3_exact(ax, ay, az, bx, by, bz, dx, dy, dz)
    abc = _det3_exact(ax, ay, az, bx, by, bz, cx, cy, cz)
    t = exp_sum(
        exp_sum(exp_mul(_lift_exact(dx, dy, dz), abc), exp_neg(exp_mul(_lift_exact(cx, cy, cz), abd))),
        exp_sum(exp_mul(_lift_exact(bx, by, bz), acd), exp_neg(exp_mul(_lift_exact(ax, ay, az), bcd))),
    )
    return exp_sign(t)


@njit(inline="always")
def _det3_float(ax, ay, az, bx, by, bz, cx, cy, cz):
    det = ax * (by * cz - bz * cy) + ay * (bz * cx - bx * cz) + az * (bx * cy - by * cx)
    perm = (
        abs(ax) * (abs(by * cz) + abs(bz * cy))
        + abs(ay) * (abs(bz * cx) + abs(bx * cz))
        + abs(az) * (abs(bx * cy) + abs(by * cx))
    )
    return det, perm


@njit
def insphere(a, b, c, d, e):
    """Sign of the in-sphere determinant (exact); see module docstring."""
    ax = a[0] - e[0]
    ay = a[1] - e[1]
    az = a[2] - e[2]
    bx = b[0] - e[0]
    by = b[1] - e[1]
    bz = b[2] - e[2]
    cx = c[0] - e[0]
    cy = c[1] - e[1]
    cz = c[2] - e[2]
    dx = d[0] - e[0]
    dy = d[1] - e[1]
    dz = d[2] - e[2]
    al = ax * ax + ay * ay + az * az
    bl = bx * bx + by * by + bz * bz
    cl = cx * cx + cy * cy + cz * cz
    dl = dx * dx + dy * dy + dz * dz
    bcd, pbcd = _det3_float(bx, by, bz, cx, cy, cz, dx, dy, dz)
    acd, pacd = _det3_float(ax, ay, az, cx, cy, cz, dx, dy, dz)
    abd, pabd = _det3_float(ax, ay, az, bx, by, bz, dx, dy, dz)
    abc, pabc = _det3_float(ax, ay, az, bx, by, bz, cx, cy, cz)
    det = (dl * abc - cl * abd) + (bl * acd - al * bcd)
    perm = dl * pabc + cl * pabd + bl * pacd + al * pbcd
    bound = ISP_BOUND * perm
    if det > bound:
        return 1
    if -det > bound:
        return -1
    return insphere_exact(a, b, c, d, e)


@njit
def in_circumsphere_perturbed(pts, prio, a, b, c, d, e):
    """True if site ``e`` conflicts with the positively oriented tet ``abcd``.

    Exact ties (cospherical sites) are broken by symbolically lifting each site
    by an infinitesimal that decreases with its priority rank.
    """
    s = insphere(pts[a], pts[b], pts[c], pts[d], pts[e])
    if s != 0:
        return s < 0
    ids = np.empty(5, dtype=np.int64)
    ids[0] = a
    ids[1] = b
    ids[2] = c
    ids[3] = d
    ids[4] = e
    used = np.zeros(5, dtype=np.bool_)
    for _ in range(5):
        best = -1
        for k in range(5):
            if not used[k] and (best < 0 or prio[ids[k]] > prio[ids[best]]):
                best = k
        used[best] = True
        if best == 4:
            term = orient3d(pts[a], pts[b], pts[c], pts[d])
        else:
            o = np.empty(3, dtype=np.int64)
            m = 0
            for k in range(4):
                if k != best:
                    o[m] = ids[k]
                    m += 1
            term = orient3d(pts[e], pts[o[0]], pts[o[1]], pts[o[2]])
            if (best + 3) % 2 == 1:
                term = -term
        if term != 0:
            return term < 0
    return False
