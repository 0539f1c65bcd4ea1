"""Gauss-Legendre quadrature helpers for line and cell integrals."""

import numpy as np
from numpy.polynomial.legendre import leggauss

_CACHE = {}


def gauss_nodes(n):
    """Nodes and weights on [-1, 1], cached."""
    if n not in _CACHE:
        _CACHE[n] = leggauss(n)
    return _CACHE[n]


def line_integral(f, a, b, npts=32):
    """Integrate the scalar field f along the straight segment a -> b.

    f takes an (m, 2) array of points and returns (m,) values.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    x, w = gauss_nodes(npts)
    t = 0.5 * (x + 1.0)
    pts = a[None, :] + t[:, None] * (b - a)[None, :]
    jac = 0.5 * np.hypot(*(b - a))
    return jac * float(np.dot(w, f(pts)))


def graded_panels(length, scale, ratio=np.e, max_panels=80):
    """Panel breakpoints on [0, length] geometrically refined toward both ends.

    Panel edges accumulate at 0 and length at rate 1/ratio starting from
    ``scale`` (clipped to length/4).  Used for integrands with logarithmic
    interior layers near the endpoints.
    """
    scale = min(scale, length / 4.0)
    edges = [length / 2.0]
    d = scale
    while d > 1e-14 * length and len(edges) < max_panels:
        edges.append(d)
        d /= ratio
    left = np.sort(np.array(edges))
    pts = np.concatenate(([0.0], left, length - left[::-1], [length]))
    return np.unique(pts)


def line_integral_graded(f, a, b, scale, npts=8):
    """Segment integral with panels graded toward both endpoints.

    Accurate for integrands that are smooth in log-distance from the
    endpoints (Hopf cut-off profiles).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    length = float(np.hypot(*(b - a)))
    edges = graded_panels(length, scale)
    x, w = gauss_nodes(npts)
    t01 = 0.5 * (x + 1.0)
    h = np.diff(edges)
    # (panel, node) arclength positions
    s = edges[:-1, None] + h[:, None] * t01[None, :]
    dirv = (b - a) / length
    pts = a[None, :] + s.reshape(-1)[:, None] * dirv[None, :]
    vals = f(pts).reshape(s.shape)
    return float(np.sum(vals * w[None, :] * (0.5 * h)[:, None]))


def cell_grid(x0, x1, y0, y1, nx, ny, npts=4):
    """Tensor Gauss rule over [x0,x1]x[y0,y1] split into nx*ny cells.

    Returns (points (m, 2), weights (m,)).
    """
    xg, xw = gauss_nodes(npts)
    ex = np.linspace(x0, x1, nx + 1)
    ey = np.linspace(y0, y1, ny + 1)
    hx = np.diff(ex)
    hy = np.diff(ey)
    xs = (ex[:-1, None] + hx[:, None] * 0.5 * (xg[None, :] + 1.0)).reshape(-1)
    ys = (ey[:-1, None] + hy[:, None] * 0.5 * (xg[None, :] + 1.0)).reshape(-1)
    wx = (0.5 * hx[:, None] * xw[None, :]).reshape(-1)
    wy = (0.5 * hy[:, None] * xw[None, :]).reshape(-1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    W = np.outer(wx, wy)
    return np.column_stack((X.reshape(-1), Y.reshape(-1))), W.reshape(-1)
