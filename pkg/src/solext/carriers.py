"""Flux carriers along guide curves and the final extension assembly.

Boundary components that keep nonzero flux after the drains are handled by
carrier fields b = coef * perp-grad(xi~), where xi~ is a Hopf cut-off built
between a guide curve (running from an anchor on the component's arc out to
infinity through an outlet) and an excluded boundary set.  The cut-off is
identically 1 near the excluded set and 0 near the guide, so the carrier has
exactly zero trace there while moving a prescribed flux through the arc.

Two deliberate choices keep the numerics clean:

* the excluded set is the whole upper boundary minus a compact *window*
  around the anchor (instead of minus the whole arc), so the carrier's
  boundary trace is compactly supported well inside the arc and the
  remaining data can be extended by a collar whose cut-off stays exactly 1
  on the data support;
* every scale factor is fitted from the stream endpoint identity, so flux
  bookkeeping is exact by construction and the analytic formulas
  (half-flux through the upper arc, unit section fluxes, the mirrored
  doubling) become cross-checks instead of sign conventions.
"""

from dataclasses import dataclass, field as dataclass_field

import numpy as np
from scipy.optimize import brentq

from ._kernels import closest_point_packed, pack_polylines
from .distfield import HopfCutoff, RegularizedDistance, psi
from .drains import hole_collar, hole_flux
from .fields import (BoundaryTrace, CollarField, CutoffStream,
                     DampedCollarField, StreamField, VerticalCut, ZeroField,
                     flux_across, mirror_extend, symmetrize)
from .geometry import KindMismatch
from .quadrature import gauss_nodes, graded_panels


class FluxImbalance(ValueError):
    pass


class IncompatibleFluxes(ValueError):
    pass


class ThetaMiss(ValueError):
    pass


class DegenerateGuide(RuntimeError):
    pass


class DataAsymmetry(ValueError):
    pass


# ---------------------------------------------------------------------------
# boundary data and prescribed fluxes


@dataclass
class BoundaryData:
    """Boundary velocity data in curve-frame (normal, tangent) profiles.

    holes: one (normal_profile, tangent_profile) pair per hole, in axis
    order; outer: component id -> profile pair on that component's arc.
    Data for the lower member of a mirror pair is implied by symmetry and
    must not be given separately.
    """

    holes: list = dataclass_field(default_factory=list)
    outer: dict = dataclass_field(default_factory=dict)


@dataclass
class FluxSet:
    """Prescribed cross-section fluxes plus the boundary-data totals."""

    sigma: dict  # outlet id -> prescribed flux through sigma_j(R)
    F_inn: float = 0.0
    F_out: float = 0.0

    def total_sigma(self):
        return float(sum(self.sigma.values()))

    def compatibility_residual(self):
        return self.F_inn + self.F_out + self.total_sigma()

    def reference_scale(self):
        vals = [abs(v) for v in self.sigma.values()] + [abs(self.F_inn), abs(self.F_out)]
        return max([1.0] + vals)


def default_extent(domain, levels=4, factor=1.5):
    return factor * float(np.max(domain.truncation_radii(levels)))


def outward_sign(domain, curve, s=None):
    """+1 if the curve frame normal nu points out of the domain, else -1."""
    L = curve.length
    if s is None:
        s = 0.5 * L
    p = curve.point(np.array([s]))
    _, _, _, nu, _ = curve.project(p)
    step = 1e-6 * domain.scale
    inside = domain.contains(p + step * nu)[0]
    return -1.0 if inside else 1.0


def upper_arc_range(curve, n=4097, tol=0.0):
    """Arclength interval of the longest x2 >= 0 stretch of the curve."""
    L = curve.length
    sg = np.linspace(0.0, L, n)
    y = curve.point(sg)[:, 1]
    mask = y >= tol
    if not np.any(mask):
        raise DegenerateGuide("curve has no upper-half portion")
    # longest contiguous run
    idx = np.nonzero(mask)[0]
    splits = np.nonzero(np.diff(idx) > 1)[0]
    runs = np.split(idx, splits + 1)
    run = max(runs, key=len)
    s0, s1 = sg[run[0]], sg[run[-1]]
    yfun = lambda s: float(curve.point(np.array([s]))[0, 1])
    if run[0] > 0:
        s0 = brentq(yfun, sg[run[0] - 1], sg[run[0]], xtol=1e-13 * max(L, 1.0))
    if run[-1] < n - 1:
        s1 = brentq(yfun, sg[run[-1]], sg[run[-1] + 1], xtol=1e-13 * max(L, 1.0))
    return float(s0), float(s1)


def _is_upper(comp):
    mid = comp.lam.point(np.array([0.5 * comp.lam.length]))[0]
    return mid[1] > 0.0


# ---------------------------------------------------------------------------
# guide curves


class GuideCurve:
    """Semi-infinite guide polyline in the closed upper half plane.

    ``excl`` is the regularized distance to the excluded boundary set the
    carrier must vanish on; ``zero_probe`` marks the component of
    Omega+ \\ gamma that is forced to zero (the one containing the symmetry
    axis, so the mirror extension stays smooth).  ``window`` is the
    arclength interval of the component arc through which the flux enters.
    """

    def __init__(self, poly, excl, zero_probe, comp=None, window=None, cap_scale=None):
        self.poly = np.asarray(poly, dtype=float)
        self.dist = RegularizedDistance(polylines=[self.poly], cap_scale=cap_scale)
        self.excl = excl
        self.seg_a, self.seg_b = pack_polylines([self.poly])
        self.comp = comp
        self.window = window
        self.zero_probe = np.asarray(zero_probe, dtype=float)
        self._zero_side = float(self._side(self.zero_probe[None, :])[0])

    def _side(self, pts):
        pts = np.atleast_2d(pts)
        _, closest, j = closest_point_packed(pts, self.seg_a, self.seg_b)
        e = self.seg_b[j] - self.seg_a[j]
        r = pts - closest
        cr = e[:, 0] * r[:, 1] - e[:, 1] * r[:, 0]
        return np.where(cr >= 0.0, 1.0, -1.0)

    def below_mask(self, pts):
        """True on the zeroed (axis-containing) side of the curve."""
        return self._side(pts) == self._zero_side


def _admissible_outlets(domain, paired_only=False):
    """Outlets a guide in the closed upper half plane can run through.

    Component carriers in a Y-type domain must exit through the paired
    outlets: the prescribed-flux carrier alone is responsible for the
    sigma_1 flux, so nothing else may leak through it.
    """
    out = [o for o in domain.outlets if o.self_symmetric or np.sin(o.angle) > 1e-12]
    if paired_only:
        pruned = [o for o in out if not o.self_symmetric]
        if pruned:
            return pruned
    return out


def widest_outlet(domain, override=None, paired_only=False):
    """Guide outlet: largest width at the first truncation radius, ties to
    the lowest id; override must itself be admissible."""
    cands = _admissible_outlets(domain, paired_only=paired_only)
    if override is not None:
        for o in cands:
            if o.id == override:
                return o
        raise DegenerateGuide(f"outlet {override} cannot host an upper-half guide")
    radii = domain.truncation_radii(1)
    ids = [o.id for o in domain.outlets]

    def key(o):
        r1 = radii[ids.index(o.id), 1]
        return (-float(o.width_fn(r1)), o.id)

    return min(cands, key=key)


def _outlet_ray(domain, outlet, far):
    """(entry, far_point, z2) of the in-outlet ray at half-width offset."""
    c_t = 0.5 * float(outlet.width_fn(domain.R0))
    for z2 in (c_t, -c_t):
        entry = outlet.to_global(np.array([[domain.R0, z2]]))[0]
        if entry[1] > 0.0:
            return entry, outlet.to_global(np.array([[far, z2]]))[0], z2
    raise DegenerateGuide(f"outlet {outlet.id} has no upper-half ray at offset {c_t}")


def _axis_probe(domain, extent):
    ivals = domain.axis_intervals(extent)
    if not ivals:
        raise DegenerateGuide("domain has no axis interior")
    a, b = max(ivals, key=lambda ab: ab[1] - ab[0])
    return np.array([0.5 * (a + b), 0.0])


def _hole_reach(domain):
    if not domain.holes:
        return 0.0
    return max(max(abs(h.cx) + h.sx, h.sy) for h in domain.holes)


def _corridor_height(domain):
    """Safe mid height for routing across the core of a channel domain."""
    x = np.linspace(-domain.R0, domain.R0, 65)
    gmin = float(np.min(domain.channel_halfwidth(x)))
    top = max((h.sy for h in domain.holes), default=0.0)
    if top == 0.0:
        top = 0.3 * gmin
    return 0.5 * (top + gmin)


def _sweep(r, a0, a1, step_deg=5.0):
    n = max(2, int(np.ceil(abs(a1 - a0) / np.deg2rad(step_deg))) + 1)
    ang = np.linspace(a0, a1, n)
    return r * np.column_stack((np.cos(ang), np.sin(ang)))


def _route_core(domain, start, entry):
    """Waypoints from a core point to an outlet entry, clearing the holes."""
    if domain.channel:
        yc = _corridor_height(domain)
        return np.array([start, [start[0], yc], entry])
    r_mid = 0.5 * (_hole_reach(domain) + domain.Rc) if domain.holes else 0.45 * domain.Rc
    a_s = np.arctan2(start[1], start[0])
    a_e = np.arctan2(entry[1], entry[0])
    pts = [start, r_mid * np.array([np.cos(a_s), np.sin(a_s)])]
    pts.extend(_sweep(r_mid, a_s, a_e)[1:])
    pts.append(entry)
    return np.array(pts)


def _component_excl(domain, comp, window, extent, cap=None):
    """Distance to the upper boundary minus the flux window on comp's arc."""
    polys = []
    curves = []
    wall_ext = 2.2 * extent
    for c in domain.outer_components:
        for w in c.walls:
            polys.append(w.polyline(wall_ext))
        if comp is not None and c.id == comp.id and window is not None:
            s0, s1 = window
            curves.append((c.lam, 0.0, s0))
            curves.append((c.lam, s1, c.lam.length))
        else:
            curves.append((c.lam, 0.0, c.lam.length))
    for h in domain.holes:
        curves.append(h)
    for a, b in domain.axis_intervals(wall_ext):
        polys.append(np.array([[a, 0.0], [b, 0.0]]))
    return RegularizedDistance(polylines=polys, curves=curves, cap_scale=cap or 0.05 * domain.R0)


def component_guide(domain, comp, outlet_id=None, extent=None, anchor_s=None, window_frac=0.15):
    """Guide from an anchor on comp's arc out through an admissible outlet."""
    if extent is None:
        extent = default_extent(domain)
    lam = comp.lam
    su0, su1 = upper_arc_range(lam)
    span = su1 - su0
    if anchor_s is None:
        anchor_s = 0.5 * (su0 + su1)
    anchor_s = float(np.clip(anchor_s, su0 + 0.3 * span, su1 - 0.3 * span))
    w = window_frac * span
    window = (anchor_s - w, anchor_s + w)
    outlet = widest_outlet(domain, outlet_id, paired_only=domain.kind == "Y")
    entry, far_pt, _ = _outlet_ray(domain, outlet, 2.0 * extent)
    anchor = lam.point(np.array([anchor_s]))[0]
    pts = np.vstack((_route_core(domain, anchor, entry), far_pt))
    excl = _component_excl(domain, comp, window, extent)
    guide = GuideCurve(
        pts, excl, _axis_probe(domain, extent), comp=comp, window=window,
        cap_scale=0.05 * domain.R0,
    )
    guide.outlet_id = outlet.id
    return guide


def _second_outlet(domain):
    """The outlet carrying the flux-carrier normalization (sigma_2)."""
    if domain.kind == "Y":
        paired = [o for o in domain.outlets if np.sin(o.angle) > 1e-12]
        if not paired:
            raise KindMismatch("Y-type domain without an upper paired outlet")
        return min(paired, key=lambda o: o.id)
    selfsym = [o for o in domain.outlets if o.self_symmetric]
    return max(selfsym, key=lambda o: o.id)


def through_guide(domain, extent=None):
    """Guide running between two outlets for the prescribed-flux carrier."""
    if extent is None:
        extent = default_extent(domain)
    if domain.kind == "Y":
        o_a = min((o for o in domain.outlets if o.self_symmetric), key=lambda o: o.id)
    else:
        o_a = min((o for o in domain.outlets if o.self_symmetric), key=lambda o: o.id)
    o_b = _second_outlet(domain)
    if o_a.id == o_b.id:
        raise DegenerateGuide("flux carrier needs two distinct outlets")
    entry_a, far_a, _ = _outlet_ray(domain, o_a, 2.0 * extent)
    entry_b, far_b, _ = _outlet_ray(domain, o_b, 2.0 * extent)
    mid = _route_core(domain, entry_a, entry_b)[1:-1]
    if domain.channel:
        yc = _corridor_height(domain)
        mid = np.array([[entry_a[0], yc], [entry_b[0], yc]])
    pts = np.vstack(([far_a], [entry_a], mid, [entry_b], [far_b]))
    excl = _component_excl(domain, None, None, extent)
    guide = GuideCurve(pts, excl, _axis_probe(domain, extent), cap_scale=0.05 * domain.R0)
    guide.outlet_ids = (o_a.id, o_b.id)
    return guide


# ---------------------------------------------------------------------------
# outlet carriers (upper half) and their mirror assembly


def outlet_carrier(domain, carried_flux, guide, epsilon):
    """Upper-half carrier moving carried_flux/2 through the arc window.

    The coefficient is fitted from the stream values at the ends of the
    upper arc (exactly 0 on the zeroed side, 1 on the excluded boundary),
    so the outward flux through the upper arc equals carried_flux/2 to
    machine precision.
    """
    if carried_flux == 0.0:
        return ZeroField()
    if guide.comp is None:
        raise DegenerateGuide("outlet_carrier needs a component guide")
    cut = HopfCutoff(epsilon, guide.dist, guide.excl, below=guide.below_mask)
    unit = CutoffStream(1.0, cut)
    lam = guide.comp.lam
    su0, su1 = upper_arc_range(lam)
    ends = unit.stream(lam.point(np.array([su0, su1])))
    f_half = outward_sign(domain, lam) * float(ends[1] - ends[0])
    if abs(f_half) < 0.5:
        raise DegenerateGuide(
            f"guide does not separate the arc ends (unit flux {f_half:.3e})"
        )
    return CutoffStream(0.5 * carried_flux / f_half, cut)


def _support_range(trace, npts=4097, rel=1e-12):
    """Hull of the trace support on its curve, padded for the collar."""
    L = trace.curve.length
    s = np.linspace(0.0, L, npts)
    hn, ht = trace.h_components(s)
    mag = np.hypot(hn, ht)
    top = float(np.max(mag))
    if top == 0.0:
        return 0.35 * L, 0.65 * L, 0.0
    idx = np.nonzero(mag > rel * top)[0]
    s0, s1 = float(s[idx[0]]), float(s[idx[-1]])
    if s0 < 0.02 * L or s1 > 0.98 * L:
        raise FluxImbalance(
            "boundary trace support reaches the arc ends; no room for the collar cut-off"
        )
    lo = max(0.01 * L, s0 - 0.05 * L)
    hi = min(0.99 * L, s1 + 0.05 * L)
    return lo, hi, top


def _arc_collar(domain, comp, lo, hi, epsilon, extent, cap=None):
    """Cut-off equal to 1 on the [lo, hi] sub-arc of comp's arc, 0 near the
    rest of the boundary (including the arc beyond a small gap)."""
    lam = comp.lam
    gap = 0.005 * lam.length
    polys = []
    curves = []
    wall_ext = 2.2 * extent
    for c in domain.outer_components:
        for w in c.walls:
            polys.append(w.polyline(wall_ext))
        if c.id == comp.id:
            curves.append((lam, 0.0, lo - gap))
            curves.append((lam, hi + gap, lam.length))
        else:
            curves.append((c.lam, 0.0, c.lam.length))
    for h in domain.holes:
        curves.append(h)
    guide = RegularizedDistance(polylines=polys, curves=curves, cap_scale=cap or 0.05 * domain.R0)
    excl = RegularizedDistance(curves=[(lam, lo, hi)], cap_scale=cap or 0.05 * domain.R0)
    return HopfCutoff(epsilon, guide, excl)


def assemble_B_out(domain, boundary_data, drains_result, epsilon, extent=None, guide_outlets=None):
    """Carrier-plus-collar extension per crossing / upper outer component.

    Returns ([(component id, field)], info).  The drain-target component's
    data is taken relative to the assembled inner field; mirror partners
    are covered by the symmetric construction and get no field of their
    own.
    """
    if extent is None:
        extent = default_extent(domain)
    b_inn = None
    if drains_result is not None:
        b_inn = drains_result[0]
        if isinstance(b_inn, ZeroField):
            b_inn = None
    sub = [b_inn] if b_inn is not None else []
    out = []
    info = {"components": []}
    for comp in domain.outer_components:
        if not comp.crosses_axis and not _is_upper(comp):
            continue
        pn, pt = boundary_data.outer.get(comp.id, (None, None))
        tr = BoundaryTrace(comp.lam, pn, pt, subtract=list(sub))
        phi = tr.flux()
        pair = 1.0 if comp.crosses_axis else 2.0
        carried = outward_sign(domain, comp.lam) * phi * pair
        rec = {"id": comp.id, "carried": carried}
        if abs(carried) > 1e-13 * max(1.0, domain.scale):
            oid = (guide_outlets or {}).get(comp.id)
            guide = component_guide(domain, comp, outlet_id=oid, extent=extent)
            b_full = mirror_extend(outlet_carrier(domain, carried, guide, epsilon))
            rec["guide_outlet"] = guide.outlet_id
            rec["window"] = guide.window
            rec["guide"] = guide
            res = BoundaryTrace(comp.lam, pn, pt, subtract=list(sub) + [b_full])
        else:
            b_full = None
            res = tr
        lo, hi, top = _support_range(res)
        rec["support"] = (lo, hi)
        if abs(res.flux()) > 1e-8 * max(1.0, top * comp.lam.length):
            raise FluxImbalance(
                f"component {comp.id}: residual trace flux {res.flux():.3e} "
                "after the carrier; drain or carrier bookkeeping is broken"
            )
        if top == 0.0 and b_full is None:
            out.append((comp.id, ZeroField()))
            info["components"].append(rec)
            continue
        chi = _arc_collar(domain, comp, lo, hi, epsilon, extent)
        if b_full is None:
            collar = symmetrize(CollarField(res, chi))
        else:
            # the carrier leaves Hopf-layer spikes at its window edges;
            # damp their normal propagation at the spike's own scale
            edges = list(guide.window)
            if comp.crosses_axis:
                # the mirror-extended carrier spikes at the reflected
                # window edges on the lower half of the arc as well
                edges += [comp.lam.length - e for e in guide.window]
            collar = symmetrize(DampedCollarField(res, chi, edges=edges))
        if not comp.crosses_axis:
            collar = 2.0 * collar  # disjoint mirror copies, not an average
        field = collar if b_full is None else b_full + collar
        out.append((comp.id, field))
        info["components"].append(rec)
    return out, info


# ---------------------------------------------------------------------------
# prescribed-flux carrier


def flux_carrier_Y(domain, epsilon, extent=None, guide=None):
    """Unit carrier between two outlets, normalized to sigma_2 flux +1."""
    if domain.kind not in ("Y", "I"):
        raise KindMismatch(f"flux carrier undefined for kind {domain.kind!r}")
    if extent is None:
        extent = default_extent(domain)
    if guide is None:
        guide = through_guide(domain, extent)
    cut = HopfCutoff(epsilon, guide.dist, guide.excl, below=guide.below_mask)
    unit = mirror_extend(CutoffStream(1.0, cut))
    o2 = _second_outlet(domain)
    radii = domain.truncation_radii(1)
    ids = [o.id for o in domain.outlets]
    sec = domain.cross_section(o2.id, float(radii[ids.index(o2.id), 1]))
    ends = unit.stream(np.vstack((sec.p1, sec.p0)))
    f2 = float(ends[0] - ends[1])
    if abs(f2) < 0.5:
        raise DegenerateGuide(f"flux carrier degenerate (sigma_2 unit flux {f2:.3e})")
    return (1.0 / f2) * unit


def _pair_total(domain, flux_set, outlet):
    """Prescribed flux over the mirror pair of a non-self-symmetric outlet."""
    partner = [
        p
        for p in domain.outlets
        if p.id != outlet.id
        and abs(np.sin(p.angle) + np.sin(outlet.angle)) < 1e-12
        and abs(np.cos(p.angle) - np.cos(outlet.angle)) < 1e-12
    ]
    fa = float(flux_set.sigma.get(outlet.id, 0.0))
    fb = float(flux_set.sigma.get(partner[0].id, 0.0)) if partner else fa
    if abs(fa - fb) > 1e-12 * flux_set.reference_scale():
        raise IncompatibleFluxes(
            f"mirror outlets {outlet.id} and {partner[0].id} must carry equal fluxes"
        )
    return fa + fb


def assemble_B_flux(domain, flux_set, epsilon, extent=None, guide=None, sigma2_exits=0.0):
    """Carrier realizing the prescribed cross-section fluxes.

    V-type domains need none (their fluxes are fixed by the boundary data);
    Y-type uses the half-sum rule over the paired outlets (the other parts
    exit through the paired outlets only, so this is exact); I-type fits
    the second outlet's flux numerically: sigma2_exits is what the already
    assembled parts carry through sigma_2, and the carrier supplies the
    difference, which fixes the split between the two outlets.
    """
    resid = flux_set.compatibility_residual()
    if abs(resid) > 1e-12 * flux_set.reference_scale():
        raise IncompatibleFluxes(
            f"flux compatibility violated: total residual {resid:.3e}"
        )
    if domain.kind == "V":
        return ZeroField()
    if domain.kind == "Y":
        coef = 0.5 * (
            _pair_total(domain, flux_set, _second_outlet(domain))
            + flux_set.F_inn
            + flux_set.F_out
        )
    else:
        coef = float(flux_set.sigma.get(_second_outlet(domain).id, 0.0)) - sigma2_exits
    if coef == 0.0:
        return ZeroField()
    return coef * flux_carrier_Y(domain, epsilon, extent=extent, guide=guide)


# ---------------------------------------------------------------------------
# I-type far-field carrier


class _FarFieldCarrier(StreamField):
    """Moves flux from the last hole out through the positive outlet.

    The stream is F/2 * xi above the axis and F - F/2 * xi below (mirror
    branch), both only to the right of the hole center; the branch jump
    sits on the vertical line through the hole center, varying only inside
    the hole and constant (F) below it, so the velocity is smooth in the
    domain.
    """

    symmetric_flag = True

    def __init__(self, F, xi, x_cut, curve_poly=None):
        self.F = float(F)
        self.xi = xi
        self.x_cut = float(x_cut)
        self.curve_poly = curve_poly
        self.cuts = (VerticalCut(self.x_cut, self._jump),)

    def _jump(self, y):
        if y >= 0.0:
            return 0.5 * self.F * float(self.xi.value(np.array([[self.x_cut, y]]))[0])
        return self.F - 0.5 * self.F * float(self.xi.value(np.array([[self.x_cut, -y]]))[0])

    def _folded(self, pts):
        fold = pts.copy()
        fold[:, 1] = np.abs(fold[:, 1])
        return fold

    def stream(self, pts):
        pts = np.atleast_2d(pts)
        v = self.xi.value(self._folded(pts))
        upper = pts[:, 1] >= 0.0
        e = np.where(upper, 0.5 * self.F * v, self.F - 0.5 * self.F * v)
        return np.where(pts[:, 0] > self.x_cut, e, 0.0)

    def velocity(self, pts):
        pts = np.atleast_2d(pts)
        _, g = self.xi.value_grad(self._folded(pts))
        u1 = 0.5 * self.F * g[:, 1]
        u2 = -0.5 * self.F * g[:, 0]
        lower = pts[:, 1] < 0.0
        u2 = np.where(lower, -u2, u2)
        live = pts[:, 0] > self.x_cut
        return np.column_stack((np.where(live, u1, 0.0), np.where(live, u2, 0.0)))


def b_infinity(domain, total_inner_flux, theta=1.0, epsilon=0.1, extent=None):
    """I-type carrier taking the total inner flux to infinity.

    Embeds the curve x2 = theta/(1+theta) * g(x1) into the positive-side
    outlet; the curve must cross the last hole so the branch jump is buried
    there.
    """
    if domain.kind != "I":
        raise KindMismatch("far-field carrier is an I-type construction")
    if theta <= 0.0:
        raise ThetaMiss(f"theta must be positive, got {theta}")
    if not domain.holes:
        raise ThetaMiss("no inner boundary to drain from")
    if total_inner_flux == 0.0:
        return ZeroField()
    if extent is None:
        extent = default_extent(domain)
    last = domain.hole_axis_order()[-1]
    frac = theta / (1.0 + theta)
    right = next(o for o in domain.outlets if np.cos(o.angle) > 0.0)

    if domain.channel:
        c_of = lambda x: frac * domain.channel_halfwidth(np.asarray(x, dtype=float))
    else:
        c_of = lambda x: frac * right.width_fn(np.maximum(np.asarray(x, dtype=float), domain.R0))
    c_at_hole = float(np.atleast_1d(c_of(last.cx))[0])
    if not last.contains(np.array([[last.cx, c_at_hole]]))[0]:
        raise ThetaMiss(
            f"curve height {c_at_hole:.4g} misses the last hole (top {last.sy:.4g})"
        )
    xs = np.linspace(last.cx, 2.0 * extent, 257)
    curve_poly = np.column_stack((xs, np.atleast_1d(c_of(xs))))
    guide = RegularizedDistance(polylines=[curve_poly], cap_scale=0.05 * domain.R0)
    excl = RegularizedDistance(
        polylines=[np.array([[last.cx, 0.0], [2.0 * extent, 0.0]])],
        cap_scale=0.05 * domain.R0,
    )
    xi = HopfCutoff(epsilon, guide, excl)
    # the jump must be constant where the cut line re-enters the domain
    ytest = np.linspace(1.0001 * last.sy, 3.0 * domain.Rc, 33)
    leak = np.max(xi.value(np.column_stack((np.full_like(ytest, last.cx), ytest))))
    if leak > 0.0:
        raise ThetaMiss(
            "cut-off does not vanish above the last hole; raise theta clearance"
        )
    return _FarFieldCarrier(total_inner_flux, xi, last.cx, curve_poly=curve_poly)


# ---------------------------------------------------------------------------
# flux ledger


def _section_breaks(sec, y_levels):
    """Arclengths (from p0) where |x2| crosses the given heights."""
    d = sec.p1 - sec.p0
    L = float(np.hypot(*d))
    dy = d[1] / L
    if abs(dy) < 1e-14:
        return []
    out = []
    for lvl in y_levels:
        for target in (lvl, -lvl):
            s = (target - sec.p0[1]) / dy
            if 0.0 < s < L:
                out.append(s)
    return out


def _segment_crossings(p0, p1, poly):
    """Arclengths along p0 -> p1 where the polyline crosses the segment."""
    p0 = np.asarray(p0, dtype=float)
    d = np.asarray(p1, dtype=float) - p0
    L = float(np.hypot(*d))
    a, b = poly[:-1], poly[1:]
    e = b - a
    r = a - p0
    det = d[0] * e[:, 1] - d[1] * e[:, 0]
    ok = np.abs(det) > 1e-14
    t = np.where(ok, (r[:, 0] * e[:, 1] - r[:, 1] * e[:, 0]) / np.where(ok, det, 1.0), -1.0)
    u = np.where(ok, (d[0] * r[:, 1] - d[1] * r[:, 0]) / np.where(ok, -det, 1.0), -1.0)
    hit = ok & (t > 0.0) & (t < 1.0) & (u >= 0.0) & (u <= 1.0)
    return (t[hit] * L).tolist()


def _graded_breaks(s_star, length, scale=None, floor_rel=3e-16):
    """Panel edges accumulating geometrically toward an interior feature."""
    if scale is None:
        scale = length / 16.0
    out = []
    d = scale
    while d > floor_rel * length:
        for sgn in (-1.0, 1.0):
            v = s_star + sgn * d
            if 0.0 < v < length:
                out.append(v)
        d /= np.e
    if 0.0 < s_star < length:
        out.append(s_star)
    return out


def _with_mirror(polys):
    out = []
    for p in polys:
        p = np.asarray(p, dtype=float)
        m = p.copy()
        m[:, 1] = -m[:, 1]
        out.extend((p, m))
    return out


def _curve_y_breaks(curve, y_levels, n=4097):
    """Arclengths where the curve's |x2| crosses the given heights."""
    if not len(y_levels):
        return []
    sg = np.linspace(0.0, curve.length, n)
    y = curve.point(sg)[:, 1]
    out = []
    for lvl in np.asarray(y_levels, dtype=float):
        for target in (lvl, -lvl):
            g = y - target
            for i in np.nonzero(g[:-1] * g[1:] < 0.0)[0]:
                t = g[i] / (g[i] - g[i + 1])
                out.append(float(sg[i] + t * (sg[i + 1] - sg[i])))
    return out


def _lam_flux(domain, field, comp, y_levels=(), npts=10):
    """Outward flux through comp's arc by graded panel quadrature."""
    lam = comp.lam
    L = lam.length
    edges = np.union1d(graded_panels(L, L / 8.0), np.linspace(0.0, L, 129))
    br = _curve_y_breaks(lam, y_levels)
    if br:
        edges = np.union1d(edges, np.clip(br, 0.0, L))
    xg, wg = gauss_nodes(npts)
    h = np.diff(edges)
    s = (edges[:-1, None] + h[:, None] * 0.5 * (xg[None, :] + 1.0)).reshape(-1)
    pts = lam.point(s)
    _, _, _, nu, _ = lam.project(pts)
    un = np.sum(field.velocity(pts) * nu, axis=1)
    val = float(np.sum(un.reshape(h.shape[0], npts) * wg[None, :] * (0.5 * h)[:, None]))
    return outward_sign(domain, lam) * val


def _fp_layer_gap(epsilon, log_range=33.0):
    """Stream fraction of a Hopf layer that is thinner than FP resolution.

    The xi = 1 inner edge sits at distance ~ rho * e^{-1/eps}; quadrature
    points cannot be placed closer than ~1e-15 of the curve, so for small
    eps a fraction 1 - psi(eps * ln(rho / floor)) of the layer's stream
    jump is invisible to velocity quadrature (the stream route still sees
    it).  log_range bounds ln(rho / floor) for desk-scale geometry.
    """
    if epsilon is None:
        return 0.0
    return 3.0 * float(1.0 - psi(epsilon * log_range))


def flux_ledger(domain, field, levels=2, y_levels=(), feature_scale=None,
                rel_tol=1e-6, feature_polys=(), epsilon=None):
    """Per-boundary and per-section fluxes of a field, with closure residuals.

    Sections use the stream identity cross-checked by quadrature; holes and
    outer arcs are pure quadrature, so the closure residual is an honest
    divergence-theorem test.  feature_polys are guide curves whose cut-off
    layers cross the sections mid-span; panels are graded toward each
    crossing (and toward its mirror image).  For layer widths near the FP
    resolution limit the cross-check tolerance is relaxed by the provably
    unresolvable fraction.
    """
    rel_tol = max(rel_tol, _fp_layer_gap(epsilon))
    radii = domain.truncation_radii(max(levels, 1))
    ids = [o.id for o in domain.outlets]
    polys = _with_mirror(feature_polys)
    ledger = {"sections": {}, "holes": {}, "outer": {}, "closure": {}, "r_spread": {}}
    for o in domain.outlets:
        row = {}
        for l in range(1, levels + 1):
            sec = domain.cross_section(o.id, float(radii[ids.index(o.id), l]))
            br = _section_breaks(sec, y_levels)
            for poly in polys:
                for s_star in _segment_crossings(sec.p0, sec.p1, poly):
                    br.extend(_graded_breaks(s_star, sec.length))
            f_stream, f_quad = flux_across(field, sec, rel_tol=rel_tol, breaks=br)
            row[l] = {"stream": f_stream, "quad": f_quad}
        ledger["sections"][o.id] = row
        vals = [row[l]["stream"] for l in row]
        ledger["r_spread"][o.id] = float(np.max(vals) - np.min(vals)) if vals else 0.0
    for i, h in enumerate(domain.hole_axis_order(), start=1):
        ledger["holes"][i] = hole_flux(
            field, h, feature_scale=feature_scale, y_levels=y_levels
        )
    for comp in domain.outer_components:
        ledger["outer"][comp.id] = _lam_flux(domain, field, comp, y_levels=y_levels)
    bdry = sum(ledger["holes"].values()) + sum(ledger["outer"].values())
    for l in range(1, levels + 1):
        sect = sum(ledger["sections"][oid][l]["stream"] for oid in ledger["sections"])
        ledger["closure"][l] = sect + bdry
    return ledger


# ---------------------------------------------------------------------------
# final assembly


@dataclass
class AssembledExtension:
    parts: dict
    total: StreamField
    flux_ledger: dict
    certificates: dict
    info: dict


def _sum_fields(fields):
    live = [f for f in fields if not isinstance(f, ZeroField)]
    if not live:
        return ZeroField()
    total = live[0]
    for f in live[1:]:
        total = total + f
    return total


def _data_fluxes(domain, boundary_data):
    """(F_inn, F_out, per-hole outward fluxes) of the boundary data."""
    holes = domain.hole_axis_order()
    hole_fluxes = []
    for (pn, pt), h in zip(boundary_data.holes, holes):
        tr = BoundaryTrace(h, pn, pt)
        hole_fluxes.append(outward_sign(domain, h) * tr.flux())
    F_out = 0.0
    for comp in domain.outer_components:
        if comp.id not in boundary_data.outer:
            continue
        if not comp.crosses_axis and not _is_upper(comp):
            raise DataAsymmetry(
                f"data on component {comp.id} is implied by its mirror partner"
            )
        pn, pt = boundary_data.outer[comp.id]
        tr = BoundaryTrace(comp.lam, pn, pt)
        pair = 1.0 if comp.crosses_axis else 2.0
        F_out += outward_sign(domain, comp.lam) * tr.flux() * pair
    return float(sum(hole_fluxes)), F_out, hole_fluxes


def _check_data_symmetry(domain, boundary_data, n=257, tol=1e-9):
    """Mirror symmetry of the given traces on axis-crossing curves."""
    worst = 0.0
    curves = []
    for (pn, pt), h in zip(boundary_data.holes, domain.hole_axis_order()):
        curves.append((h, pn, pt))
    for comp in domain.outer_components:
        if comp.crosses_axis and comp.id in boundary_data.outer:
            pn, pt = boundary_data.outer[comp.id]
            curves.append((comp.lam, pn, pt))
    for curve, pn, pt in curves:
        tr = BoundaryTrace(curve, pn, pt)
        s = np.linspace(0.0, curve.length, n)
        pts = tr.curve.point(s)
        mirrored = pts.copy()
        mirrored[:, 1] = -mirrored[:, 1]
        sm, _, _, _, _ = curve.project(mirrored)
        hn, ht = tr.h_components(s)
        hn_m, ht_m = tr.h_components(np.mod(sm, curve.length))
        worst = max(worst, float(np.max(np.abs(hn - hn_m))), float(np.max(np.abs(ht + ht_m))))
    scale = 1.0
    if worst > tol * scale:
        raise DataAsymmetry(f"boundary data mirror residual {worst:.3e}")
    return worst


def _strip_quadrature_hints(info_list, epsilon):
    """(y panel levels, feature scale) for quadrature near drain strips."""
    from .drains import DrainProfile, XiDeltaProfile

    y_levels = set()
    feature = None
    for info in info_list:
        if not info:
            continue
        kappa = info.get("kappa")
        for srec in info.get("strips", []):
            d = srec["spec"].delta
            if kappa is not None:
                prof = DrainProfile(kappa, d)
            else:
                prof = XiDeltaProfile(epsilon, d)
            y_levels.update(np.asarray(prof.breakpoints(), dtype=float).tolist())
            f = 0.05 * d
            feature = f if feature is None else min(feature, f)
    return sorted(y_levels), feature


def _wall_trace_sup(domain, field, extent, n_per=160):
    best = 0.0
    for comp in domain.outer_components:
        for w in comp.walls:
            poly = w.polyline(extent, n=n_per)
            # resample uniformly along the polyline
            seg = np.cumsum(np.concatenate(([0.0], np.hypot(*np.diff(poly, axis=0).T))))
            s = np.linspace(0.0, seg[-1], n_per)
            pts = np.column_stack(
                (np.interp(s, seg, poly[:, 0]), np.interp(s, seg, poly[:, 1]))
            )
            u = field.velocity(pts)
            best = max(best, float(np.max(np.hypot(u[:, 0], u[:, 1]))))
    return best


def assemble_A(
    domain,
    boundary_data,
    flux_set,
    epsilon,
    kappa=None,
    delta=None,
    theta=1.0,
    target=None,
    extent=None,
    levels=2,
    guide_outlets=None,
):
    """Full symmetric solenoidal extension of the boundary data with the
    prescribed cross-section fluxes, plus its flux ledger."""
    from .drains import assemble_B_inn, i_type_strip_drains

    if extent is None:
        extent = default_extent(domain)
    sym_residual = _check_data_symmetry(domain, boundary_data)
    F_inn, F_out, hole_fluxes = _data_fluxes(domain, boundary_data)
    fs = FluxSet(dict(flux_set.sigma), F_inn, F_out)
    for given, derived, name in (
        (flux_set.F_inn, F_inn, "F_inn"),
        (flux_set.F_out, F_out, "F_out"),
    ):
        if given and abs(given - derived) > 1e-9 * fs.reference_scale():
            raise IncompatibleFluxes(
                f"declared {name}={given} does not match the boundary data ({derived:.6g})"
            )
    resid = fs.compatibility_residual()
    if abs(resid) > 1e-12 * fs.reference_scale():
        raise IncompatibleFluxes(f"flux compatibility violated: residual {resid:.3e}")

    parts = {}
    info = {"epsilon": epsilon, "F_inn": F_inn, "F_out": F_out, "hole_fluxes": hole_fluxes}
    drain_infos = []
    feature_polys = []
    thru = through_guide(domain, extent) if domain.kind != "V" else None

    if domain.kind in ("V", "Y"):
        drains_result = None
        if domain.holes:
            B_inn, dinfo = assemble_B_inn(
                domain, boundary_data.holes, epsilon,
                kappa=kappa, delta=delta, target=target, extent=extent,
            )
            parts["B_inn"] = B_inn
            drains_result = (B_inn, dinfo)
            drain_infos.append(dinfo)
            info["drains"] = {k: v for k, v in dinfo.items() if k != "strips"}
        blist, oinfo = assemble_B_out(
            domain, boundary_data, drains_result, epsilon,
            extent=extent, guide_outlets=guide_outlets,
        )
        for cid, fld in blist:
            parts[f"B_out_{cid}"] = fld
        info["outer"] = oinfo["components"]
        parts["B_flux"] = assemble_B_flux(domain, fs, epsilon, extent=extent, guide=thru)
    else:
        holes = domain.hole_axis_order()
        b = ZeroField()
        sinfo = {"strips": []}
        if len(holes) >= 2:
            b, sinfo = i_type_strip_drains(
                domain, hole_fluxes, epsilon, delta=delta
            )
        drain_infos.append(sinfo)
        b_sub = [] if isinstance(b, ZeroField) else [b]
        if not holes:
            # hole-free channel: no inner flux to route, only through-flux
            parts["B_0"] = ZeroField()
            parts["B_inf"] = ZeroField()
        collars = []
        for i, ((pn, pt), h) in enumerate(zip(boundary_data.holes, holes)):
            if h is holes[-1]:
                continue
            tr = BoundaryTrace(h, pn, pt, subtract=list(b_sub))
            if abs(tr.flux()) > 1e-8 * max(1.0, abs(hole_fluxes[i])):
                raise FluxImbalance(
                    f"strip bookkeeping failed on hole {i + 1}: residual {tr.flux():.3e}"
                )
            collars.append(symmetrize(CollarField(tr, hole_collar(domain, i, epsilon, extent))))
        if holes:
            parts["B_0"] = _sum_fields([b] + collars)
            b_inf = b_infinity(domain, F_inn, theta=theta, epsilon=epsilon, extent=extent)
            if isinstance(b_inf, _FarFieldCarrier):
                info["b_inf_carrier"] = b_inf
            sub_I = list(b_sub) + ([] if isinstance(b_inf, ZeroField) else [b_inf])
            pn_I, pt_I = boundary_data.holes[-1] if boundary_data.holes else (None, None)
            tr_I = BoundaryTrace(holes[-1], pn_I, pt_I, subtract=sub_I)
            if abs(tr_I.flux()) > 1e-8 * max(1.0, abs(F_inn)):
                raise FluxImbalance(
                    f"far-field bookkeeping failed on the last hole: residual {tr_I.flux():.3e}"
                )
            collar_I = symmetrize(
                CollarField(tr_I, hole_collar(domain, len(holes) - 1, epsilon, extent))
            )
            parts["B_inf"] = _sum_fields([b_inf, collar_I])
        blist, oinfo = assemble_B_out(
            domain, boundary_data, None, epsilon,
            extent=extent, guide_outlets=guide_outlets,
        )
        for cid, fld in blist:
            parts[f"B_out_{cid}"] = fld
        info["outer"] = oinfo["components"]
        info["theta"] = theta
        o2 = _second_outlet(domain)
        radii1 = domain.truncation_radii(1)
        sec2 = domain.cross_section(
            o2.id, float(radii1[[o.id for o in domain.outlets].index(o2.id), 1])
        )
        pre = _sum_fields(list(parts.values()))
        ends = pre.stream(np.vstack((sec2.p1, sec2.p0)))
        e2 = float(ends[0] - ends[1]) - pre.segment_jump(sec2.p0, sec2.p1)
        parts["B_flux"] = assemble_B_flux(
            domain, fs, epsilon, extent=extent, guide=thru, sigma2_exits=e2
        )
        info["sigma2_split"] = {"other_parts": e2, "carrier": float(fs.sigma.get(o2.id, 0.0)) - e2}

    total = _sum_fields(list(parts.values()))
    for rec in info.get("outer", []):
        if "guide" in rec:
            feature_polys.append(rec["guide"].poly)
    if thru is not None and not isinstance(parts.get("B_flux"), ZeroField):
        feature_polys.append(thru.poly)
    y_levels, feature = _strip_quadrature_hints(drain_infos, epsilon)
    bi = info.get("b_inf_carrier")
    if bi is not None:
        # the far-field carrier's layers hug its guide curve and the axis
        feature_polys.append(bi.curve_poly)
        xs = bi.curve_poly[:, 0]
        feature_polys.append(np.array([[xs[0], 0.0], [xs[-1], 0.0]]))
        # hole quadrature edges accumulating toward the curve height
        c_h = float(bi.curve_poly[0, 1])
        ladder = {c_h + sgn * d for d in _graded_breaks(0.0, c_h, scale=c_h / 8.0) for sgn in (-1, 1)}
        y_levels = sorted(set(y_levels) | {v for v in ladder if v > 0} | {c_h})
    ledger = flux_ledger(
        domain, total, levels=levels, y_levels=y_levels, feature_scale=feature,
        feature_polys=feature_polys, epsilon=epsilon,
    )
    ledger["sigma_residual"] = {
        oid: ledger["sections"][oid][1]["stream"] - float(fs.sigma.get(oid, 0.0))
        for oid in ledger["sections"]
    }
    certificates = {
        "data_mirror_residual": sym_residual,
        "wall_trace_sup": _wall_trace_sup(domain, total, 1.2 * extent),
        "closure": dict(ledger["closure"]),
        "r_spread": dict(ledger["r_spread"]),
    }
    info["flux_set"] = fs
    info["extent"] = extent
    info["y_levels"] = y_levels
    info["feature_scale"] = feature
    return AssembledExtension(parts, total, ledger, certificates, info)
