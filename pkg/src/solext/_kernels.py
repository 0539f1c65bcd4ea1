"""Hot numeric kernels: closest-point queries against packed polyline sets.

Every distance-like quantity in the package bottoms out here, so these
loops dominate runtime.  When numba is importable (and SOLEXT_NO_NUMBA is
unset) the kernels are jit-compiled; otherwise a vectorized numpy path is
used.  Both paths produce bit-identical results for the same inputs.
"""

import os

import numpy as np

USE_NUMBA = os.environ.get("SOLEXT_NO_NUMBA", "0").lower() not in ("1", "true", "yes")
if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a soft dependency
        USE_NUMBA = False

__all__ = ["USE_NUMBA", "pack_polylines", "closest_point_packed", "soft_segment_distance"]


def pack_polylines(polylines):
    """Pack a list of (m_i, 2) vertex arrays into (verts, seg_start, seg_end).

    Segments never bridge two polylines.  Returns contiguous float64 arrays
    ready for the kernels.
    """
    if not polylines:
        raise ValueError("empty polyline set")
    starts = []
    ends = []
    for p in polylines:
        p = np.asarray(p, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 2:
            raise ValueError("each polyline must be an (m>=2, 2) array")
        starts.append(p[:-1])
        ends.append(p[1:])
    return np.ascontiguousarray(np.vstack(starts)), np.ascontiguousarray(np.vstack(ends))


def _closest_point_np(px, py, ax, ay, bx, by):
    ex = bx - ax
    ey = by - ay
    ee = ex * ex + ey * ey
    ee[ee == 0.0] = 1.0
    # (n, M) projection parameter, clamped to the segment
    t = ((px[:, None] - ax) * ex + (py[:, None] - ay) * ey) / ee
    np.clip(t, 0.0, 1.0, out=t)
    cx = ax + t * ex
    cy = ay + t * ey
    d2 = (px[:, None] - cx) ** 2 + (py[:, None] - cy) ** 2
    j = np.argmin(d2, axis=1)
    i = np.arange(px.shape[0])
    return np.sqrt(d2[i, j]), cx[i, j], cy[i, j], j


if USE_NUMBA:

    @njit(cache=True)
    def _closest_point_nb(px, py, ax, ay, bx, by):  # pragma: no cover - jit
        n = px.shape[0]
        m = ax.shape[0]
        dist = np.empty(n)
        cx = np.empty(n)
        cy = np.empty(n)
        seg = np.empty(n, dtype=np.int64)
        for i in range(n):
            best = np.inf
            bx_i = 0.0
            by_i = 0.0
            bj = -1
            for j in range(m):
                ex = bx[j] - ax[j]
                ey = by[j] - ay[j]
                ee = ex * ex + ey * ey
                if ee == 0.0:
                    t = 0.0
                else:
                    t = ((px[i] - ax[j]) * ex + (py[i] - ay[j]) * ey) / ee
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                qx = ax[j] + t * ex
                qy = ay[j] + t * ey
                d2 = (px[i] - qx) ** 2 + (py[i] - qy) ** 2
                if d2 < best:
                    best = d2
                    bx_i = qx
                    by_i = qy
                    bj = j
            dist[i] = np.sqrt(best)
            cx[i] = bx_i
            cy[i] = by_i
            seg[i] = bj
        return dist, cx, cy, seg


def closest_point_packed(pts, seg_a, seg_b):
    """Distance and closest point from each query point to a packed segment set.

    pts: (n, 2); seg_a, seg_b: (M, 2) segment endpoints.
    Returns (dist (n,), closest (n, 2), seg_index (n,)).
    """
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    px = np.ascontiguousarray(pts[:, 0])
    py = np.ascontiguousarray(pts[:, 1])
    ax = np.ascontiguousarray(seg_a[:, 0])
    ay = np.ascontiguousarray(seg_a[:, 1])
    bx = np.ascontiguousarray(seg_b[:, 0])
    by = np.ascontiguousarray(seg_b[:, 1])
    if USE_NUMBA:
        d, cx, cy, j = _closest_point_nb(px, py, ax, ay, bx, by)
    else:
        d, cx, cy, j = _closest_point_np(px, py, ax, ay, bx, by)
    return d, np.column_stack((cx, cy)), j

def _soft_pieces_np(px, py, ax, ay, bx, by, sigma, p):
    ex = bx - ax
    ey = by - ay
    L = np.sqrt(ex * ex + ey * ey)
    tx = ex / L
    ty = ey / L
    relx = px[:, None] - ax
    rely = py[:, None] - ay
    s = relx * tx + rely * ty
    t = relx * ty - rely * tx  # right-normal offset
    # smoothly capped overshoot beyond either endpoint
    ulo = -s
    uhi = s - L
    mlo, dlo = _soft_ramp_np(ulo, sigma)
    mhi, dhi = _soft_ramp_np(uhi, sigma)
    phi = np.sqrt(t * t + mlo * mlo + mhi * mhi)
    safe = np.where(phi > 0.0, phi, 1.0)
    cs = (mhi * dhi - mlo * dlo) / safe
    ct = t / safe
    gx = cs * tx + ct * ty
    gy = cs * ty - ct * tx
    return phi, gx, gy


def _soft_ramp_np(u, sigma):
    """C^2 ramp m(u) ~ max(u, 0): 0 below 0, u above sigma, m <= u; and m'."""
    v = u / sigma
    vc = np.clip(v, 0.0, 1.0)
    q = vc * vc * vc * (10.0 + vc * (-15.0 + 6.0 * vc))
    dq = 30.0 * vc * vc * (1.0 - vc) ** 2
    m = np.where(v <= 0.0, 0.0, np.where(v >= 1.0, u, u * q))
    d = np.where(v <= 0.0, 0.0, np.where(v >= 1.0, 1.0, q + vc * dq))
    return m, d


def _ipow(r, ip):
    """r**ip by squaring, matching the jit path bit for bit."""
    w = np.ones_like(r)
    base = r.copy()
    k = ip
    while k > 0:
        if k & 1:
            w *= base
        base *= base
        k >>= 1
    return w


def _soft_combine_np(phi, gx, gy, p):
    ref = np.min(phi, axis=1)
    safe_ref = np.where(ref > 0.0, ref, 1.0)
    r = safe_ref[:, None] / np.where(phi > 0.0, phi, 1.0)
    w = _ipow(r, int(p)) if p == int(p) else r**p
    w[phi == 0.0] = 1.0
    S = np.sum(w, axis=1)
    Gx = np.sum(w * gx / np.where(phi > 0.0, phi, 1.0), axis=1)
    Gy = np.sum(w * gy / np.where(phi > 0.0, phi, 1.0), axis=1)
    return S, Gx, Gy, ref


if USE_NUMBA:

    @njit(cache=True)
    def _soft_segment_nb(px, py, ax, ay, bx, by, sigma, p):  # pragma: no cover - jit
        n = px.shape[0]
        M = ax.shape[0]
        S = np.empty(n)
        Gx = np.empty(n)
        Gy = np.empty(n)
        ref = np.empty(n)
        ip = int(p)
        int_p = p == ip
        phi_s = np.empty(M)
        gx_s = np.empty(M)
        gy_s = np.empty(M)
        for i in range(n):
            best = np.inf
            for j in range(M):
                ex = bx[j] - ax[j]
                ey = by[j] - ay[j]
                L = np.sqrt(ex * ex + ey * ey)
                tx = ex / L
                ty = ey / L
                rx = px[i] - ax[j]
                ry = py[i] - ay[j]
                s = rx * tx + ry * ty
                t = rx * ty - ry * tx
                mlo = _ramp_val(-s, sigma)
                mhi = _ramp_val(s - L, sigma)
                phi = np.sqrt(t * t + mlo * mlo + mhi * mhi)
                if phi < best:
                    best = phi
                phi_s[j] = phi
                if phi > 0.0:
                    dlo = _ramp_der(-s, sigma)
                    dhi = _ramp_der(s - L, sigma)
                    cs = (mhi * dhi - mlo * dlo) / phi
                    ct = t / phi
                    gx_s[j] = cs * tx + ct * ty
                    gy_s[j] = cs * ty - ct * tx
                else:
                    gx_s[j] = 0.0
                    gy_s[j] = 0.0
            ref[i] = best
            if best == 0.0:
                S[i] = 1.0
                Gx[i] = 0.0
                Gy[i] = 0.0
                continue
            acc = 0.0
            accx = 0.0
            accy = 0.0
            for j in range(M):
                phi = phi_s[j]
                # integer p: exponentiation by squaring beats libm pow
                r = best / phi
                if int_p:
                    w = 1.0
                    base = r
                    k = ip
                    while k > 0:
                        if k & 1:
                            w *= base
                        base *= base
                        k >>= 1
                else:
                    w = r**p
                acc += w
                accx += w * gx_s[j] / phi
                accy += w * gy_s[j] / phi
            S[i] = acc
            Gx[i] = accx
            Gy[i] = accy
        return S, Gx, Gy, ref

    @njit(cache=True)
    def _ramp_val(u, sigma):  # pragma: no cover - jit
        v = u / sigma
        if v <= 0.0:
            return 0.0
        if v >= 1.0:
            return u
        return u * (v * v * v * (10.0 + v * (-15.0 + 6.0 * v)))

    @njit(cache=True)
    def _ramp_der(u, sigma):  # pragma: no cover - jit
        v = u / sigma
        if v <= 0.0:
            return 0.0
        if v >= 1.0:
            return 1.0
        q = v * v * v * (10.0 + v * (-15.0 + 6.0 * v))
        dq = 30.0 * v * v * (1.0 - v) ** 2
        return q + v * dq


def soft_segment_distance(pts, seg_a, seg_b, sigma, p):
    """Power-softmin accumulators of smooth capped distances to segments.

    Returns (S, G (n,2), ref (n,)) with S = sum (ref/phi_j)^p and
    G = sum (ref/phi_j)^p * grad(phi_j)/phi_j, where ref is the per-point
    minimum of the smooth per-segment distances phi_j.  Groups computed
    against different segment sets combine by rescaling to a common ref.
    """
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    px = np.ascontiguousarray(pts[:, 0])
    py = np.ascontiguousarray(pts[:, 1])
    ax = np.ascontiguousarray(seg_a[:, 0])
    ay = np.ascontiguousarray(seg_a[:, 1])
    bx = np.ascontiguousarray(seg_b[:, 0])
    by = np.ascontiguousarray(seg_b[:, 1])
    if USE_NUMBA:
        S, Gx, Gy, ref = _soft_segment_nb(px, py, ax, ay, bx, by, sigma, p)
    else:
        phi, gx, gy = _soft_pieces_np(px, py, ax, ay, bx, by, sigma, p)
        S, Gx, Gy, ref = _soft_combine_np(phi, gx, gy, p)
    return S, np.column_stack((Gx, Gy)), ref
