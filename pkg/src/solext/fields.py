"""Stream-function velocity fields, boundary traces, and the collar extension.

Every velocity field in the package is the perpendicular gradient
(dE/dx2, -dE/dx1) of a scalar stream E, so it is divergence-free by
construction and its flux across any curve is the difference of E at the
endpoints.  Curve-frame conventions: project() returns (s, t, tau, nu,
kappa) with nu the *right* normal of tau, so the flux of a field across a
curve traversed from p to q with respect to nu equals E(q) - E(p).
"""

import numpy as np
from scipy.interpolate import CubicSpline, PPoly
from scipy.optimize import brentq

from .quadrature import gauss_nodes, graded_panels


class MethodDisagreement(RuntimeError):
    pass


class NonzeroFlux(ValueError):
    pass


class EmptySampleSet(ValueError):
    pass


MIRROR = np.array([[1.0, 0.0], [0.0, -1.0]])


def _mirror(pts):
    out = np.atleast_2d(pts).copy()
    out[:, 1] = -out[:, 1]
    return out


class VerticalCut:
    """Branch discontinuity of a stream across the line x1 = x.

    Fields with net flux around a hole have no single-valued stream; the
    chosen branch jumps across cut lines whose velocity-relevant part lies
    outside the flow domain.  jump(y) = E(x^+, y) - E(x^-, y); it must
    vanish outside (y_lo, y_hi).  Flux computations add the signed jumps
    collected along the integration path.
    """

    def __init__(self, x, jump, y_lo=-np.inf, y_hi=np.inf):
        self.x = float(x)
        self.jump = jump
        self.y_lo = float(y_lo)
        self.y_hi = float(y_hi)

    def segment_correction(self, p, q):
        """Signed jump met along the straight path p -> q (0 if not crossed)."""
        a, b = p[0] - self.x, q[0] - self.x
        if a * b >= 0.0:
            return 0.0
        t = a / (a - b)
        y = p[1] + t * (q[1] - p[1])
        if not (self.y_lo < y < self.y_hi):
            return 0.0
        sign = 1.0 if b > a else -1.0
        return sign * float(self.jump(y))

    def scaled(self, c):
        return VerticalCut(self.x, lambda y, J=self.jump: c * J(y), self.y_lo, self.y_hi)

    def mirrored(self):
        """Cut of the reflected stream term E(x1, -x2)."""
        return VerticalCut(self.x, lambda y, J=self.jump: -J(-y), -self.y_hi, -self.y_lo)


# ---------------------------------------------------------------------------
# field algebra


class StreamField:
    symmetric_flag = False
    cuts = ()

    def stream(self, pts):
        raise NotImplementedError

    def velocity(self, pts):
        raise NotImplementedError

    def segment_jump(self, p, q):
        """Total signed branch jump along the straight path p -> q."""
        return sum(cut.segment_correction(p, q) for cut in self.cuts)

    def __add__(self, other):
        return SumField([self, other])

    def __rmul__(self, c):
        return ScaledField(float(c), self)

    def __neg__(self):
        return ScaledField(-1.0, self)

    def divergence_fd(self, pts, h):
        """Centered-difference divergence; O(h^2) -> 0 for exact fields."""
        pts = np.atleast_2d(pts)
        ex = np.array([h, 0.0])
        ey = np.array([0.0, h])
        du = self.velocity(pts + ex)[:, 0] - self.velocity(pts - ex)[:, 0]
        dv = self.velocity(pts + ey)[:, 1] - self.velocity(pts - ey)[:, 1]
        return (du + dv) / (2.0 * h)


class ZeroField(StreamField):
    symmetric_flag = True

    def stream(self, pts):
        return np.zeros(np.atleast_2d(pts).shape[0])

    def velocity(self, pts):
        return np.zeros_like(np.atleast_2d(pts))


class SumField(StreamField):
    def __init__(self, parts):
        flat = []
        for p in parts:
            if isinstance(p, SumField):
                flat.extend(p.parts)
            elif not isinstance(p, ZeroField):
                flat.append(p)
        self.parts = flat
        self.symmetric_flag = all(p.symmetric_flag for p in flat)

    @property
    def cuts(self):
        return tuple(c for p in self.parts for c in p.cuts)

    def stream(self, pts):
        pts = np.atleast_2d(pts)
        out = np.zeros(pts.shape[0])
        for p in self.parts:
            out += p.stream(pts)
        return out

    def velocity(self, pts):
        pts = np.atleast_2d(pts)
        out = np.zeros_like(pts)
        for p in self.parts:
            out += p.velocity(pts)
        return out


class ScaledField(StreamField):
    def __init__(self, c, base):
        self.c = c
        self.base = base
        self.symmetric_flag = base.symmetric_flag

    def stream(self, pts):
        return self.c * self.base.stream(pts)

    def velocity(self, pts):
        return self.c * self.base.velocity(pts)

    @property
    def cuts(self):
        return tuple(cut.scaled(self.c) for cut in self.base.cuts)


class FuncStream(StreamField):
    """Closed-form stream with closed-form velocity (e.g. exact profiles)."""

    def __init__(self, stream_fn, velocity_fn, symmetric=False):
        self._s = stream_fn
        self._v = velocity_fn
        self.symmetric_flag = symmetric

    def stream(self, pts):
        return self._s(np.atleast_2d(pts))

    def velocity(self, pts):
        return self._v(np.atleast_2d(pts))


class CutoffStream(StreamField):
    """E = coef * xi for a Hopf cut-off xi; velocity from the analytic grad."""

    def __init__(self, coef, cutoff):
        self.coef = float(coef)
        self.cutoff = cutoff

    def stream(self, pts):
        return self.coef * self.cutoff.value(pts)

    def velocity(self, pts):
        g = self.cutoff.gradient(pts)
        return self.coef * np.column_stack((g[:, 1], -g[:, 0]))


class SymmetrizedField(StreamField):
    """Component-wise mirror average; equals the input if already symmetric."""

    symmetric_flag = True

    def __init__(self, base):
        self.base = base

    def stream(self, pts):
        pts = np.atleast_2d(pts)
        return 0.5 * (self.base.stream(pts) - self.base.stream(_mirror(pts)))

    def velocity(self, pts):
        pts = np.atleast_2d(pts)
        u = self.base.velocity(pts)
        um = self.base.velocity(_mirror(pts))
        return 0.5 * (u + um @ MIRROR)

    @property
    def cuts(self):
        half = [cut.scaled(0.5) for cut in self.base.cuts]
        return tuple(half) + tuple(c.mirrored() for c in half)


def symmetrize(field):
    if isinstance(field, (ZeroField, SymmetrizedField)):
        return field
    return SymmetrizedField(field)


class MirrorExtended(StreamField):
    """Odd-in-stream extension of a field given on the upper half-plane.

    The input must vanish (constant zero stream) near the axis; then the
    extension is smooth, symmetric, and doubles fluxes across full
    axis-crossing sections.
    """

    symmetric_flag = True

    def __init__(self, upper):
        self.upper = upper

    def stream(self, pts):
        pts = np.atleast_2d(pts)
        sgn = np.where(pts[:, 1] >= 0.0, 1.0, -1.0)
        folded = pts.copy()
        folded[:, 1] = np.abs(folded[:, 1])
        return sgn * self.upper.stream(folded)

    def velocity(self, pts):
        pts = np.atleast_2d(pts)
        folded = pts.copy()
        folded[:, 1] = np.abs(folded[:, 1])
        u = self.upper.velocity(folded)
        lower = pts[:, 1] < 0.0
        u[lower, 1] = -u[lower, 1]
        return u

    @property
    def cuts(self):
        ups = [VerticalCut(c.x, c.jump, max(c.y_lo, 0.0), c.y_hi) for c in self.upper.cuts]
        return tuple(ups) + tuple(c.mirrored() for c in ups)


def mirror_extend(field_on_upper_half):
    return MirrorExtended(field_on_upper_half)


# ---------------------------------------------------------------------------
# fluxes


def flux_across(field, section, rel_tol=1e-6, npts=16, scale=None, breaks=()):
    """Flux by stream endpoint difference, cross-checked by Gauss quadrature.

    section: a geometry.Section, or a (p, q) pair of endpoints of a straight
    cut traversed p -> q with the right normal.  Raises MethodDisagreement
    if the two values differ by more than rel_tol relatively.
    """
    if hasattr(section, "p0"):
        p, q = section.p0, section.p1
    else:
        p, q = (np.asarray(e, dtype=float) for e in section)
    ends = field.stream(np.vstack((q, p)))
    by_stream = float(ends[0] - ends[1]) - field.segment_jump(p, q)
    d = q - p
    length = float(np.hypot(*d))
    tau = d / length
    nu = np.array([tau[1], -tau[0]])
    if scale is None:
        scale = length / 8.0
    # graded toward the endpoints for cut-off log layers, plus a uniform
    # floor so interior features of the collar profiles are resolved too
    edges = np.union1d(graded_panels(length, scale), np.linspace(0.0, length, 97))
    if len(breaks):
        # caller-supplied panel edges (arclengths), e.g. thin strip layers
        edges = np.union1d(edges, np.clip(np.asarray(breaks, dtype=float), 0.0, length))
    xg, wg = gauss_nodes(npts)
    h = np.diff(edges)
    s = (edges[:-1, None] + h[:, None] * 0.5 * (xg[None, :] + 1.0)).reshape(-1)
    pts = p[None, :] + s[:, None] * tau[None, :]
    un = field.velocity(pts) @ nu
    by_quad = float(np.sum(un.reshape(h.shape[0], npts) * wg[None, :] * (0.5 * h)[:, None]))
    denom = max(abs(by_stream), abs(by_quad), 1e-12)
    if abs(by_stream - by_quad) > rel_tol * denom:
        raise MethodDisagreement(
            f"flux mismatch: stream {by_stream:.12e} vs quadrature {by_quad:.12e}"
        )
    return by_stream, by_quad


def flux_along_curve(field, curve, s0, s1):
    """Stream endpoint difference along a general curve piece."""
    p = curve.point(np.array([s0, s1]))
    e = field.stream(p)
    return float(e[1] - e[0])


# ---------------------------------------------------------------------------
# boundary traces


class PiecewisePolyProfile:
    """Compactly supported piecewise polynomial of arclength."""

    def __init__(self, breaks, coeffs):
        # coeffs: (k, m) highest-degree-first per interval, scipy PPoly layout
        self.pp = PPoly(np.asarray(coeffs, dtype=float), np.asarray(breaks, dtype=float), extrapolate=False)

    @classmethod
    def bump(cls, s0, s1, amplitude=1.0):
        """C^2 cubic-cubed bump on [s0, s1]: a * 64 (t(1-t))^3, peak a."""
        h = s1 - s0
        # 64 (t(1-t))^3 = 64(t^3 - 3t^4 + 3t^5 - t^6), t = (s - s0)/h
        c = amplitude * 64.0 * np.array(
            [-1.0 / h**6, 3.0 / h**5, -3.0 / h**4, 1.0 / h**3, 0.0, 0.0, 0.0]
        )
        return cls([s0, s1], c[:, None])

    def __call__(self, s):
        v = self.pp(np.asarray(s, dtype=float))
        return np.where(np.isnan(v), 0.0, v)

    def antiderivative(self, s):
        ad = self.pp.antiderivative()
        lo, hi = self.pp.x[0], self.pp.x[-1]
        s = np.asarray(s, dtype=float)
        total = float(ad(hi))
        v = ad(np.clip(s, lo, hi))
        return np.where(s < lo, 0.0, np.where(s > hi, total, v))

    def derivative(self, s):
        d = self.pp.derivative()(np.asarray(s, dtype=float))
        return np.where(np.isnan(d), 0.0, d)

    @property
    def support(self):
        return float(self.pp.x[0]), float(self.pp.x[-1])


class ZeroProfile:
    support = (0.0, 0.0)

    def __call__(self, s):
        return np.zeros_like(np.asarray(s, dtype=float))

    antiderivative = __call__
    derivative = __call__


class BoundaryTrace:
    """Velocity data h on an arc of a curve, in the curve frame (nu, tau).

    normal/tangent profiles are piecewise polynomials of arclength;
    ``subtract`` lists stream fields whose own trace on the curve is
    removed from h (their cumulative flux is exact via stream values).
    """

    def __init__(self, curve, normal_profile=None, tangent_profile=None, subtract=(), s_ref=0.0):
        self.curve = curve
        self.hn = normal_profile or ZeroProfile()
        self.ht = tangent_profile or ZeroProfile()
        self.subtract = list(subtract)
        self.s_ref = float(s_ref)
        self._ref_pt = curve.point(np.array([self.s_ref]))
        self._corrections = [self._curve_cut_events(f) for f in self.subtract]

    def _curve_cut_events(self, f):
        # branch jumps of a subtracted field met while walking the curve:
        # restores continuity of its cumulative flux in arclength
        cuts = getattr(f, "cuts", ())
        if not cuts:
            return None
        L = self.curve.length
        sg = np.linspace(0.0, L, 4097)
        xs = self.curve.point(sg)[:, 0]
        events = []
        for cut in cuts:
            g = xs - cut.x
            for i in np.nonzero(g[:-1] * g[1:] < 0.0)[0]:
                s_star = brentq(
                    lambda s: float(self.curve.point(np.array([s]))[0, 0]) - cut.x,
                    sg[i],
                    sg[i + 1],
                    xtol=1e-13 * max(L, 1.0),
                )
                y = float(self.curve.point(np.array([s_star]))[0, 1])
                if cut.y_lo < y < cut.y_hi:
                    sign = 1.0 if g[i + 1] > g[i] else -1.0
                    events.append((s_star, sign * float(cut.jump(y))))
        if not events:
            return None
        events.sort()
        return np.array([e[0] for e in events]), np.cumsum([e[1] for e in events])

    def _correction(self, k, s):
        ev = self._corrections[k]
        s = np.asarray(s, dtype=float)
        if ev is None:
            return np.zeros_like(s)
        s_ev, cum = ev
        idx = np.searchsorted(s_ev, s, side="right")
        return np.where(idx > 0, cum[np.maximum(idx - 1, 0)], 0.0)

    def _frames(self, s):
        pts = self.curve.point(np.asarray(s, dtype=float))
        _, _, tau, nu, kappa = self.curve.project(pts)
        return pts, tau, nu, kappa

    def h_components(self, s):
        """(h.nu, h.tau) at arclengths s."""
        s = np.asarray(s, dtype=float)
        hn = self.hn(s)
        ht = self.ht(s)
        if self.subtract:
            pts, tau, nu, _ = self._frames(s)
            for f in self.subtract:
                u = f.velocity(pts)
                hn = hn - np.sum(u * nu, axis=1)
                ht = ht - np.sum(u * tau, axis=1)
        return hn, ht

    def flux(self):
        """Total flux of h over its full support (exact)."""
        lo, hi = 0.0, self.curve.length
        total = float(self.hn.antiderivative(hi) - self.hn.antiderivative(lo))
        if self.subtract:
            p = self.curve.point(np.array([lo, hi]))
            for k, f in enumerate(self.subtract):
                e = f.stream(p)
                total -= float(e[1] - e[0]) - float(self._correction(k, hi))
        return total

    def E0(self, s):
        """Cumulative flux of h from s_ref: the wall value of the stream."""
        s = np.asarray(s, dtype=float)
        out = self.hn.antiderivative(s) - self.hn.antiderivative(self.s_ref)
        if self.subtract:
            pts = self.curve.point(s)
            ref_corr = [float(self._correction(k, self.s_ref)) for k in range(len(self.subtract))]
            for k, f in enumerate(self.subtract):
                out = out - (
                    f.stream(pts)
                    - f.stream(self._ref_pt)[0]
                    - (self._correction(k, s) - ref_corr[k])
                )
        return out

    def E0_d1(self, s):
        return self.h_components(s)[0]

    def E1(self, s):
        """Normal derivative of the stream on the wall: -h.tau."""
        return -self.h_components(s)[1]

    def E1_d1(self, s, h=1e-6):
        return (self.E1(np.asarray(s) + h) - self.E1(np.asarray(s) - h)) / (2.0 * h)


class CollarField(StreamField):
    """Solenoidal extension of boundary data: E = chi * (E0(s) + t*E1(s)).

    chi is a Hopf cut-off equal to 1 on the data-carrying arc and 0 near
    the rest of the boundary, so the boundary trace is exact and the field
    is supported in the collar.
    """

    def __init__(self, trace, chi):
        self.trace = trace
        self.chi = chi

    def _local(self, pts):
        s, t, tau, nu, kappa = self.trace.curve.project(np.atleast_2d(pts))
        return s, t, tau, nu, kappa

    def stream(self, pts):
        pts = np.atleast_2d(pts)
        s, t, _, _, _ = self._local(pts)
        e = self.trace.E0(s) + t * self.trace.E1(s)
        c = self.chi.value(pts)
        return np.where(c > 0.0, c * e, 0.0)

    def velocity(self, pts):
        pts = np.atleast_2d(pts)
        s, t, tau, nu, kappa = self._local(pts)
        c, gc = self.chi.value_grad(pts)
        live = c > 0.0
        e0 = self.trace.E0(s)
        e1 = self.trace.E1(s)
        e = e0 + t * e1
        de_ds = self.trace.E0_d1(s) + t * self.trace.E1_d1(s)
        grad_s = tau / (1.0 + t * kappa)[:, None]
        grad_e = de_ds[:, None] * grad_s + e1[:, None] * nu
        g = c[:, None] * grad_e + e[:, None] * gc
        g = np.where(live[:, None], g, 0.0)
        return np.column_stack((g[:, 1], -g[:, 0]))


class DampedCollarField(StreamField):
    """Collar extension for traces with boundary-layer spikes at known spots.

    A residual trace left after subtracting a carrier has Hopf-layer spikes
    at the carrier's window edges: their sup grows like exp(1/epsilon) while
    their width shrinks at the same rate.  The plain collar propagates trace
    values unattenuated along the whole normal ray, which smears a spike of
    height H across a region of diameter ~1 instead of ~1/H and destroys
    the epsilon/distance envelope the extension has to satisfy.

    Here the trace profiles split into a fixed-scale smoothing (extended
    like CollarField) plus the sharp remainder, which is damped along the
    normal by exp(-t^2/(2*l(s)^2)) with l(s) the distance to the nearest
    spike location.  A spike then influences only a neighbourhood of its
    own width, restoring the envelope, while the wall trace stays exact:
    the damping factor and its t-derivative are 1 and 0 at t = 0.
    """

    def __init__(self, trace, chi, edges, n_grid=4096, kernel_cells=8):
        self.trace = trace
        self.chi = chi
        self.edges = np.atleast_1d(np.asarray(edges, dtype=float))
        L = trace.curve.length
        sg = np.linspace(0.0, L, n_grid + 1)
        # grid nodes can land arbitrarily close to a spike and sample huge
        # values; bridge a band around each spike linearly so the smooth
        # part stays bounded regardless of where the nodes fall
        band = 2.0 * kernel_cells * (L / n_grid)
        free = np.ones(sg.shape, dtype=bool)
        for e in self.edges:
            free &= np.abs(sg - e) > band
        free[0] = free[-1] = True
        v = np.linspace(-1.0, 1.0, 2 * kernel_cells + 1)
        k = (1.0 - v * v) ** 4
        k /= k.sum()
        pad = kernel_cells
        sm = []
        for prof in (trace.E0(sg), trace.E1(sg)):
            prof = np.interp(sg, sg[free], prof[free])
            ext = np.pad(prof, pad, mode="edge")
            sm.append(np.convolve(ext, k, mode="same")[pad:-pad])
        self._s0 = CubicSpline(sg, sm[0])
        self._s1 = CubicSpline(sg, sm[1])
        self._ds0 = self._s0.derivative()
        self._ds1 = self._s1.derivative()
        # cap keeps the damping length bounded where the trace is smooth
        self._qcap = (0.05 * L) ** -2

    def _q(self, s):
        """1/l(s)^2 and its s-derivative; inf exactly at a spike location."""
        d = s[:, None] - self.edges[None, :]
        with np.errstate(divide="ignore"):
            q = np.sum(d**-2.0, axis=1) + self._qcap
            dq = -2.0 * np.sum(d**-3.0, axis=1)
        return q, dq

    def _damp(self, s, t):
        q, dq = self._q(s)
        with np.errstate(invalid="ignore", over="ignore"):
            arg = np.where(t == 0.0, 0.0, -0.5 * t * t * q)
        D = np.where(arg > -709.0, np.exp(np.maximum(arg, -745.0)), 0.0)
        live = (D > 0.0) & (t != 0.0)
        # products q*D, dq*D vanish in the limit wherever D underflows; at
        # t = 0 both derivatives are exactly 0 even on a spike (q = inf)
        qs = np.where(live, q, 0.0)
        dqs = np.where(live, dq, 0.0)
        dD_dt = np.where(live, -t * qs * D, 0.0)
        dD_ds = np.where(live, -0.5 * t * t * dqs * D, 0.0)
        return D, dD_dt, dD_ds

    def stream(self, pts):
        pts = np.atleast_2d(pts)
        s, t, _, _, _ = self.trace.curve.project(pts)
        c = self.chi.value(pts)
        live = c > 0.0
        h0 = self.trace.E0(s) - self._s0(s)
        h1 = self.trace.E1(s) - self._s1(s)
        D, _, _ = self._damp(s, t)
        e = self._s0(s) + t * self._s1(s) + (h0 + t * h1) * D
        return np.where(live, c * e, 0.0)

    def velocity(self, pts):
        pts = np.atleast_2d(pts)
        s, t, tau, nu, kappa = self.trace.curve.project(pts)
        c, gc = self.chi.value_grad(pts)
        live = c > 0.0
        h0 = self.trace.E0(s) - self._s0(s)
        h1 = self.trace.E1(s) - self._s1(s)
        dh0 = self.trace.E0_d1(s) - self._ds0(s)
        dh1 = self.trace.E1_d1(s) - self._ds1(s)
        D, dD_dt, dD_ds = self._damp(s, t)
        e_hi = h0 + t * h1
        e = self._s0(s) + t * self._s1(s) + e_hi * D
        de_dt = self._s1(s) + h1 * D + e_hi * dD_dt
        de_ds = self._ds0(s) + t * self._ds1(s) + (dh0 + t * dh1) * D + e_hi * dD_ds
        grad_s = tau / (1.0 + t * kappa)[:, None]
        grad_e = de_ds[:, None] * grad_s + de_dt[:, None] * nu
        g = c[:, None] * grad_e + e[:, None] * gc
        g = np.where(live[:, None], g, 0.0)
        return np.column_stack((g[:, 1], -g[:, 0]))


def hopf_extension(trace, chi, flux_tol=1e-12):
    """Extend zero-flux boundary data into the collar where chi is active.

    chi must be a cut-off equal to 1 on the trace's curve (its excluded
    set) and 0 near the rest of the boundary (its guide set).
    """
    total = trace.flux()
    hn, ht = trace.h_components(np.linspace(0.0, trace.curve.length, 257))
    norm = max(float(np.max(np.hypot(hn, ht))), 1.0)
    if abs(total) > flux_tol * norm:
        raise NonzeroFlux(f"trace flux {total:.3e} must vanish before extension")
    return CollarField(trace, chi)


def leray_hopf_certificate(field, test_fields, region_quadrature=None):
    """max over test fields of |int (w.grad)w . field| / int |grad w|^2."""
    if not test_fields:
        raise EmptySampleSet("no test fields supplied")
    from .verify import convective_integral

    best = 0.0
    for w in test_fields:
        quad = region_quadrature(w) if region_quadrature is not None else None
        val, _ = convective_integral(w, field, quad)
        best = max(best, abs(val) / w.dirichlet())
    return best
