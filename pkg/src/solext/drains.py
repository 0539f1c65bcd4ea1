"""Virtual drains: thin axis strips moving hole fluxes to another boundary.

A drain is a horizontal strip field (amplitude * s(x2), 0) supported in
x_lo < x1 < x_hi, |x2| < delta.  Its stream is amplitude * S(x2) inside
the x-range and 0 outside; the jump sheets at the two ends are placed
outside the flow domain (beyond the outer boundary / inside a hole), so
the restriction to the domain is smooth and divergence-free while still
carrying net flux into the terminal hole.  Because of that nonzero
circulation-flux around holes, hole fluxes are measured by quadrature,
not stream differences.
"""

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from . import distfield
from .distfield import HopfCutoff, RegularizedDistance, psi, psi_d1
from .fields import StreamField, VerticalCut, symmetrize
from .quadrature import gauss_nodes


class BadKappa(ValueError):
    pass


class BadDelta(ValueError):
    pass


class StripMisaligned(ValueError):
    pass


# ---------------------------------------------------------------------------
# profiles


def beta_kappa(v, kappa):
    """Even C^2 profile: 1/|v| on [kappa, 1/2], 0 beyond 1, always <= 1/|v|."""
    if not (0.0 < kappa < 0.5):
        raise BadKappa(f"kappa must lie in (0, 1/2), got {kappa}")
    v = np.abs(np.asarray(v, dtype=float))
    safe = np.where(v > 0.0, v, 1.0)
    ramp_in = psi((v - 0.5 * kappa) / (0.5 * kappa))
    ramp_out = 1.0 - psi((v - 0.5) / 0.5)
    window = np.where(v < kappa, ramp_in, np.where(v > 0.5, ramp_out, 1.0))
    return np.where(v > 0.0, window / safe, 0.0)


def _y_kappa(kappa):
    val, err = quad(lambda v: beta_kappa(v, kappa), 0.0, 1.0, epsabs=1e-12, epsrel=1e-12, limit=200, points=[0.5 * kappa, kappa, 0.5])
    if err > 1e-10:
        raise BadKappa(f"quadrature for y_kappa did not reach 1e-10 (err {err:.2e})")
    return 2.0 * val


class DrainProfile:
    """s(t) = beta_kappa(t/delta) / (y_kappa * delta), with exact unit mass."""

    def __init__(self, kappa, delta):
        if not (0.0 < kappa < 0.5):
            raise BadKappa(f"kappa must lie in (0, 1/2), got {kappa}")
        if delta <= 0.0:
            raise BadDelta(f"delta must be positive, got {delta}")
        self.kappa = float(kappa)
        self.delta = float(delta)
        self.y_kappa = _y_kappa(kappa)
        # |t| s(t) = v beta(v) / y_kappa equals 1/y_kappa exactly on the flat part
        self.sup_t_s = 1.0 / self.y_kappa
        self._build_cumulative()

    def _build_cumulative(self):
        # cumulative of s on a grid graded into the inner 1/t layer
        k = self.kappa
        inner = np.geomspace(0.25 * k, 1.0, 600)
        v = np.unique(np.concatenate(([0.0], inner, np.linspace(0.0, 1.0, 400))))
        xg, wg = gauss_nodes(8)
        h = np.diff(v)
        mids = v[:-1, None] + h[:, None] * 0.5 * (xg[None, :] + 1.0)
        inc = np.sum(beta_kappa(mids, k) * wg[None, :], axis=1) * 0.5 * h
        cum = np.concatenate(([0.0], np.cumsum(inc))) / self.y_kappa
        cum *= 0.5 / cum[-1]  # S(+-delta) exactly 0/1 so off-strip jumps vanish
        # S over [-delta, delta] from evenness: S(t) = 1/2 + sign(t) * cum(|t|/delta)
        self._half = CubicSpline(v, cum)

    def s(self, t):
        t = np.asarray(t, dtype=float)
        return beta_kappa(t / self.delta, self.kappa) / (self.y_kappa * self.delta)

    def S(self, t):
        """Cumulative integral of s from -delta; 0 below, 1 above."""
        t = np.asarray(t, dtype=float)
        v = np.clip(np.abs(t) / self.delta, 0.0, 1.0)
        return 0.5 + np.sign(t) * self._half(v)

    def breakpoints(self):
        """|x2| heights where s is only C^2 (quadrature panels align here)."""
        k, d = self.kappa, self.delta
        body = np.geomspace(k, 0.5, 40)
        return np.unique(np.concatenate(([0.5 * k, 1.0], body))) * d


class XiDeltaProfile:
    """Strip profile from the axis cut-off xi_delta (unit mass, exact S).

    xi_delta(y) = psi(eps * ln(rho(delta - |y|) / |y|)) equals 1 on the
    axis and 0 near |y| = delta; the drain density is -d(xi_delta)/d|y| / 2
    and its cumulative is closed-form in xi_delta itself.
    """

    def __init__(self, epsilon, delta):
        if delta <= 0.0:
            raise BadDelta(f"delta must be positive, got {delta}")
        if epsilon <= 0.0:
            raise distfield.NonPositiveScale(f"epsilon must be positive, got {epsilon}")
        self.eps = float(epsilon)
        self.delta = float(delta)
        grid = np.linspace(1e-9, delta, 20001)
        self.sup_t_s = float(np.max(np.abs(grid) * self.s(grid)))

    def _xi(self, a):
        # a = |y| in [0, delta]
        r = distfield.rho(self.delta - a, self.delta, 1.0, 1.0)
        with np.errstate(divide="ignore"):
            t = self.eps * (np.log(r) - np.log(a))
        return np.where(a == 0.0, 1.0, psi(np.where(np.isfinite(t), t, 1.0)))

    def _xi_d(self, a):
        r = distfield.rho(self.delta - a, self.delta, 1.0, 1.0)
        rp = -distfield.rho_d1(self.delta - a, self.delta, 1.0, 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = self.eps * (np.log(r) - np.log(a))
            dt = self.eps * (rp / r - 1.0 / a)
            d = psi_d1(np.where(np.isfinite(t), t, 1.0)) * dt
        return np.where(np.isfinite(d), d, 0.0)

    def s(self, t):
        t = np.asarray(t, dtype=float)
        a = np.clip(np.abs(t), 0.0, self.delta)
        out = -0.5 * self._xi_d(a)
        return np.where(np.abs(t) >= self.delta, 0.0, out)

    def S(self, t):
        t = np.asarray(t, dtype=float)
        a = np.clip(np.abs(t), 0.0, self.delta)
        return 0.5 + 0.5 * np.sign(t) * (1.0 - self._xi(a))

    def breakpoints(self):
        d = self.delta
        arg = lambda a: self.eps * (np.log(distfield.rho(d - a, d, 1.0, 1.0)) - np.log(a))
        edges = [0.5 * d, d]
        for lvl in (0.0, 1.0):
            if (arg(1e-12 * d) - lvl) * (arg((1.0 - 1e-12) * d) - lvl) < 0.0:
                edges.append(brentq(lambda a: arg(a) - lvl, 1e-12 * d, (1.0 - 1e-12) * d))
        lo = min(edges)
        body = np.geomspace(max(lo, 1e-6 * d), d, 40)
        return np.unique(np.concatenate((edges, body)))


def drain_profile(kappa, delta):
    return DrainProfile(kappa, delta)


def choose_kappa(epsilon, hi=0.49):
    """Largest kappa with sup_t |t| s(t) = 1/y_kappa <= epsilon / (2 sqrt 2)."""
    target = 2.0 * np.sqrt(2.0) / epsilon  # need y_kappa >= target
    f = lambda lk: _y_kappa(np.exp(lk)) - target
    lo = np.log(1e-30)
    if f(np.log(hi)) >= 0.0:
        return hi
    if f(lo) < 0.0:
        raise BadKappa(f"epsilon {epsilon} too small for the kappa rule")
    return float(np.exp(brentq(f, lo, np.log(hi), xtol=1e-12)))


# ---------------------------------------------------------------------------
# strips


@dataclass
class StripSpec:
    x_lo: float
    x_hi: float
    delta: float
    eta: float
    connects: tuple  # (source id, target id), e.g. (("hole", 1), ("outer", 2))
    hole_end: str = "hi"  # which end terminates inside a hole: "lo" | "hi"


class StripDrain(StreamField):
    """amplitude * (s(x2), 0) inside the strip; flux amplitude rightward.

    The stream branch is 0 left of the strip and ``amplitude`` right of
    it; the two branch cuts are vertical rays through the strip ends,
    declared so flux and trace computations stay exact.
    """

    symmetric_flag = True

    def __init__(self, amplitude, spec, profile):
        self.amplitude = float(amplitude)
        self.spec = spec
        self.profile = profile
        a = self.amplitude
        S = profile.S
        self.cuts = (
            VerticalCut(spec.x_lo, lambda y: a * float(S(y)), -profile.delta, np.inf),
            VerticalCut(spec.x_hi, lambda y: a * (1.0 - float(S(y))), -np.inf, profile.delta),
        )

    def _inside(self, pts):
        return (pts[:, 0] > self.spec.x_lo) & (pts[:, 0] < self.spec.x_hi)

    def stream(self, pts):
        pts = np.atleast_2d(pts)
        x = pts[:, 0]
        out = np.where(x >= self.spec.x_hi, self.amplitude, 0.0)
        return np.where(self._inside(pts), self.amplitude * self.profile.S(pts[:, 1]), out)

    def velocity(self, pts):
        pts = np.atleast_2d(pts)
        u1 = np.where(self._inside(pts), self.amplitude * self.profile.s(pts[:, 1]), 0.0)
        return np.column_stack((u1, np.zeros_like(u1)))


def hole_flux(field, hole, feature_scale=None, npts=10, y_levels=()):
    """Outward-of-domain flux of a field through a hole boundary, by quadrature.

    Outward of the flow domain means *into* the hole: the integral of
    u . (-nu) over the hole curve, nu being the curve's own (into-domain)
    normal.  Panels are refined near the two axis crossings where strip
    profiles concentrate.
    """
    L = hole.length
    s_centers = [0.0, float(hole.arclength(np.pi)), L]
    if feature_scale is None:
        feature_scale = 0.02 * L
    edges = set(np.linspace(0.0, L, 129))
    d = 0.1 * L
    floor = max(1e-3 * feature_scale, 1e-12 * L)
    while d > floor:
        for c in s_centers:
            for sgn in (-1.0, 1.0):
                e = c + sgn * d
                if 0.0 <= e <= L:
                    edges.add(e)
        d /= np.e
    # panel edges aligned with profile smoothness breakpoints |x2| = level
    for y in np.atleast_1d(np.asarray(y_levels, dtype=float)):
        if not (0.0 < y < hole.sy):
            continue
        th = float(np.arcsin(y / hole.sy))
        for t in (th, np.pi - th, np.pi + th, 2.0 * np.pi - th):
            edges.add(float(hole.arclength(t)))
    edges = np.array(sorted(edges))
    xg, wg = gauss_nodes(npts)
    h = np.diff(edges)
    s = (edges[:-1, None] + h[:, None] * 0.5 * (xg[None, :] + 1.0)).reshape(-1)
    pts = hole.point(s)
    _, _, _, nu, _ = hole.project(pts)
    un = np.sum(field.velocity(pts) * nu, axis=1)
    return -float(np.sum(un.reshape(h.shape[0], npts) * wg[None, :] * (0.5 * h)[:, None]))


# ---------------------------------------------------------------------------
# strip construction against a domain


def _axis_clearance(domain, x_lo, x_hi, exclude=()):
    """Smallest |x2| of the boundary over the strip's x-range, holes excluded.

    exclude: (center point, radius) disks around intended wall piercings,
    where the strip legitimately crosses the outer boundary.
    """
    best = np.inf
    for tag, poly in domain.boundary_polylines(extent=max(abs(x_lo), abs(x_hi)) + domain.R0):
        if tag[0] == "hole":
            continue
        m = (poly[:, 0] >= x_lo) & (poly[:, 0] <= x_hi)
        for c, r in exclude:
            m &= np.hypot(poly[:, 0] - c[0], poly[:, 1] - c[1]) > r
        if np.any(m):
            best = min(best, float(np.min(np.abs(poly[m, 1]))))
    if not np.isfinite(best):
        best = domain.R0
    return best


def drain_target_component(domain, override=None):
    """Outer component receiving the drains: axis-crossing, leftmost first."""
    if override is not None:
        for c in domain.outer_components:
            if c.id == override:
                if not c.crosses_axis:
                    raise StripMisaligned(f"component {override} does not cross the x1-axis")
                return c
        raise StripMisaligned(f"no outer component {override}")
    crossing = [c for c in domain.outer_components if c.crosses_axis]
    if not crossing:
        raise StripMisaligned("no outer component crosses the x1-axis")
    # prefer the component whose axis crossing is on the negative side
    def keyfn(c):
        mid = c.lam.point(np.array([0.5 * c.lam.length]))[0]
        return mid[0]

    return min(crossing, key=keyfn)


def build_drain_strips(domain, hole_fluxes, delta=None, target=None):
    """One strip per hole from the target outer component, stacked on the axis.

    hole_fluxes[i] is the prescribed outward flux through hole i (paper
    orientation: out of the flow domain, into the hole).  Returns
    [(spec, amplitude)] with amplitudes signed so each hole receives its
    flux; strips for far holes pass through nearer ones (their in/out
    contributions cancel there).
    """
    comp = drain_target_component(domain, target)
    mid = comp.lam.point(np.array([0.5 * comp.lam.length]))[0]
    left_side = mid[0] < 0.0
    holes = domain.hole_axis_order()
    if len(hole_fluxes) != len(holes):
        raise StripMisaligned(f"{len(hole_fluxes)} fluxes for {len(holes)} holes")
    out = []
    for i, (h, Fh) in enumerate(zip(holes, hole_fluxes)):
        if left_side:
            x_lo = mid[0] - 0.5 * domain.R0
            x_hi = h.cx
            hole_end = "hi"
            amplitude = Fh
        else:
            x_lo = h.cx
            x_hi = mid[0] + 0.5 * domain.R0
            hole_end = "lo"
            amplitude = -Fh
        gap = abs(x_hi - x_lo)
        eta = 0.1 * gap
        if delta is None:
            crossed = holes[: i + 1] if left_side else holes[i:]
            feature = min(hh.sy for hh in crossed)
            pierce = [(mid, 0.75 * domain.R0)]  # strip crosses the wall there
            clear = _axis_clearance(domain, min(x_lo, mid[0]), max(x_hi, mid[0]), exclude=pierce)
            d = 0.4 * min(feature, clear)
        else:
            d = delta
        for hh in holes:
            if min(x_lo, x_hi) < hh.cx < max(x_lo, x_hi) or hh is h:
                if d >= hh.sy:
                    raise StripMisaligned(f"strip half-height {d} does not fit inside hole at x={hh.cx}")
        spec = StripSpec(x_lo, x_hi, d, eta, (("hole", i + 1), ("outer", comp.id)), hole_end)
        out.append((spec, amplitude))
    return out


def inner_drain(flux_outward, strip, profile):
    """Strip field whose outward flux through the terminal hole is flux_outward."""
    if abs(profile.delta - strip.delta) > 1e-12:
        raise StripMisaligned("profile delta does not match the strip")
    amplitude = flux_outward if strip.hole_end == "hi" else -flux_outward
    return StripDrain(amplitude, strip, profile)


def multi_drain(domain, hole_fluxes, epsilon=None, kappa=None, delta=None, target=None):
    """b_inn: sum of per-hole strips; returns (field, info dict)."""
    if kappa is None:
        if epsilon is None:
            raise BadKappa("need kappa or epsilon for the kappa rule")
        kappa = choose_kappa(epsilon)
    strips = build_drain_strips(domain, hole_fluxes, delta=delta, target=target)
    parts = []
    info = {"kappa": kappa, "strips": [], "target": strips[0][0].connects[1] if strips else None}
    for spec, amp in strips:
        profile = DrainProfile(kappa, spec.delta)
        f = StripDrain(amp, spec, profile)
        parts.append(f)
        info["strips"].append({"spec": spec, "amplitude": amp, "sup_t_s": profile.sup_t_s})
    info["sup_t_s"] = max((s["sup_t_s"] for s in info["strips"]), default=0.0)
    if not parts:
        from .fields import ZeroField

        return ZeroField(), info
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total, info


def i_type_strip_drains(domain, hole_fluxes, epsilon, delta=None):
    """b_i strips routing every hole's flux into the last hole (I-type)."""
    holes = domain.hole_axis_order()
    if len(holes) < 2:
        return None, {"strips": []}
    if len(hole_fluxes) != len(holes):
        raise StripMisaligned(f"{len(hole_fluxes)} fluxes for {len(holes)} holes")
    target = holes[-1]
    parts = []
    info = {"strips": []}
    for i, (h, Fh) in enumerate(zip(holes[:-1], hole_fluxes[:-1])):
        x_lo, x_hi = h.cx, target.cx
        if delta is None:
            feature = min(hh.sy for hh in holes[i:])
            d = 0.4 * min(feature, _axis_clearance(domain, x_lo, x_hi))
        else:
            d = delta
        spec = StripSpec(x_lo, x_hi, d, 0.1 * (x_hi - x_lo), (("hole", i + 1), ("hole", len(holes))), "lo")
        profile = XiDeltaProfile(epsilon, d)
        f = inner_drain(Fh, spec, profile)
        parts.append(f)
        info["strips"].append({"spec": spec, "amplitude": f.amplitude, "sup_t_s": profile.sup_t_s})
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total, info


# ---------------------------------------------------------------------------
# collar cut-offs and B_inn assembly


def hole_collar(domain, hole_index, epsilon, extent):
    """Hopf cut-off equal to 1 on hole ``hole_index`` and 0 near the rest of
    the boundary."""
    holes = domain.hole_axis_order()
    target = holes[hole_index]
    others = [h for h in holes if h is not target]
    polylines = [poly for tag, poly in domain.boundary_polylines(extent) if tag[0] == "outer"]
    guide = RegularizedDistance(polylines=polylines, curves=others, cap_scale=0.05 * domain.R0)
    excl = RegularizedDistance(curves=[target])
    return HopfCutoff(epsilon, guide, excl)


def assemble_B_inn(domain, hole_traces, epsilon, kappa=None, delta=None, target=None, extent=None):
    """B_inn = b_inn + symmetrize(collar extension of (a - b_inn) on the holes).

    hole_traces: per hole, (normal_profile, tangent_profile) of the data a
    in the hole curve's frame.  Returns (field, info).
    """
    from .fields import BoundaryTrace, CollarField, ZeroField

    holes = domain.hole_axis_order()
    if extent is None:
        extent = 1.5 * float(np.max(domain.truncation_radii(4)))
    fluxes_curve = []
    for (pn, pt), h in zip(hole_traces, holes):
        tr = BoundaryTrace(h, pn, pt)
        fluxes_curve.append(tr.flux())
    # paper orientation: outward of the flow domain = -curve normal
    hole_fluxes = [-f for f in fluxes_curve]
    b_inn, info = multi_drain(domain, hole_fluxes, epsilon=epsilon, kappa=kappa, delta=delta, target=target)
    collars = []
    for i, ((pn, pt), h) in enumerate(zip(hole_traces, holes)):
        tr = BoundaryTrace(h, pn, pt, subtract=[b_inn], s_ref=0.0)
        if abs(tr.flux()) > 1e-8 * max(1.0, abs(fluxes_curve[i])):
            raise StripMisaligned(
                f"drain bookkeeping failed on hole {i + 1}: residual flux {tr.flux():.3e}"
            )
        chi = hole_collar(domain, i, epsilon, extent)
        collars.append(CollarField(tr, chi))
    info["hole_fluxes"] = hole_fluxes
    if not collars:
        return b_inn, info
    collar_sum = collars[0]
    for c in collars[1:]:
        collar_sum = collar_sum + c
    return b_inn + symmetrize(collar_sum), info
