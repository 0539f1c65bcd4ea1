"""Planar symmetric domains with outlets: description, validation, queries.

A domain is mirror-symmetric about the x1-axis and decomposes into a
bounded core plus semi-infinite outlet strips.  Outlet width profiles are
symbolic (const / affine / power) so Lipschitz constants and the
truncation recursion are exact.  Two core representations are used:

* generic: a disk of radius ``Rc`` (through all outlet mouth corners)
  minus elliptical holes, union the outlet strips;
* channel: for a domain with exactly two collinear horizontal outlets the
  core is the channel segment itself, so a constant-width instance is the
  exact infinite straight channel.
"""

import configparser
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BPoly
from scipy.optimize import brentq

from ._kernels import closest_point_packed, pack_polylines


class GeometryError(ValueError):
    pass


class SymmetryViolation(GeometryError):
    pass


class HoleOffAxis(GeometryError):
    pass


class OutletOverlap(GeometryError):
    pass


class KindMismatch(GeometryError):
    pass


class UnknownOutlet(GeometryError):
    pass


class RadiusBelowStart(GeometryError):
    pass


class ConfigError(GeometryError):
    pass


# ---------------------------------------------------------------------------
# width-function families


@dataclass(frozen=True)
class WidthFn:
    """Symbolic outlet half-width profile g(t) on [R0, inf)."""

    kind: str  # const | affine | power
    coeffs: tuple

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "const":
            return np.full_like(t, self.coeffs[0])
        if self.kind == "affine":
            c0, c1 = self.coeffs
            return c0 + c1 * t
        c, alpha = self.coeffs
        return c * t**alpha

    def deriv(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "const":
            return np.zeros_like(t)
        if self.kind == "affine":
            return np.full_like(t, self.coeffs[1])
        c, alpha = self.coeffs
        return c * alpha * t ** (alpha - 1.0)

    def deriv2(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind in ("const", "affine"):
            return np.zeros_like(t)
        c, alpha = self.coeffs
        return c * alpha * (alpha - 1.0) * t ** (alpha - 2.0)

    def lipschitz_bound(self, r0):
        """Exact sup of |g'| on [r0, inf) for the family."""
        if self.kind == "const":
            return 0.0
        if self.kind == "affine":
            return abs(self.coeffs[1])
        c, alpha = self.coeffs
        return c * alpha * r0 ** (alpha - 1.0)

    def validate(self, r0):
        if self.kind == "const":
            if self.coeffs[0] < r0:
                raise GeometryError(f"constant width {self.coeffs[0]} below start radius {r0}")
        elif self.kind == "affine":
            c0, c1 = self.coeffs
            if c1 < 0:
                raise GeometryError("affine width must be non-decreasing")
            if c0 + c1 * r0 < r0:
                raise GeometryError("affine width below start radius at the mouth")
        elif self.kind == "power":
            c, alpha = self.coeffs
            if not (0.0 < alpha <= 1.0):
                raise GeometryError(f"power exponent {alpha} outside (0, 1]")
            if c * r0**alpha < r0:
                raise GeometryError("power width below start radius at the mouth")
        else:
            raise GeometryError(f"unknown width family {self.kind!r}")

    @staticmethod
    def parse(text):
        """Parse 'const:2.0' | 'affine:1.0,0.5' | 'power:1.0,0.5'."""
        try:
            kind, _, args = text.partition(":")
            coeffs = tuple(float(a) for a in args.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad width_fn {text!r}") from exc
        n = {"const": 1, "affine": 2, "power": 2}.get(kind)
        if n is None or len(coeffs) != n:
            raise ConfigError(f"bad width_fn {text!r}")
        return WidthFn(kind, coeffs)


# ---------------------------------------------------------------------------
# curve primitives


class Segment:
    closed = False

    def __init__(self, p0, p1):
        self.p0 = np.asarray(p0, dtype=float)
        self.p1 = np.asarray(p1, dtype=float)

    def polyline(self, extent=None, n=2):
        t = np.linspace(0.0, 1.0, max(n, 2))
        return self.p0[None, :] + t[:, None] * (self.p1 - self.p0)[None, :]

    @property
    def length(self):
        return float(np.hypot(*(self.p1 - self.p0)))

    def point(self, s):
        d = (self.p1 - self.p0) / self.length
        return self.p0[None, :] + np.asarray(s, dtype=float)[:, None] * d[None, :]

    def project(self, pts):
        """Arclength, signed offset, tangent, left normal, curvature."""
        pts = np.atleast_2d(pts)
        d = (self.p1 - self.p0) / self.length
        nvec = np.array([d[1], -d[0]])  # right normal, consistent across curve classes
        rel = pts - self.p0[None, :]
        s = rel @ d
        t = rel @ nvec
        m = pts.shape[0]
        tau = np.broadcast_to(d, (m, 2))
        nu = np.broadcast_to(nvec, (m, 2))
        return s, t, tau, nu, np.zeros(m)


class Arc:
    """CCW circle arc from angle a0 to a1 (a1 > a0)."""

    closed = False

    def __init__(self, center, radius, a0, a1):
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.a0 = float(a0)
        self.a1 = float(a1)

    @property
    def length(self):
        return self.radius * (self.a1 - self.a0)

    def polyline(self, extent=None, n=65):
        ang = np.linspace(self.a0, self.a1, n)
        return self.center[None, :] + self.radius * np.column_stack((np.cos(ang), np.sin(ang)))

    def point(self, s):
        ang = self.a0 + np.asarray(s, dtype=float) / self.radius
        return self.center[None, :] + self.radius * np.column_stack((np.cos(ang), np.sin(ang)))

    def project(self, pts):
        pts = np.atleast_2d(pts)
        rel = pts - self.center[None, :]
        r = np.hypot(rel[:, 0], rel[:, 1])
        ang = np.arctan2(rel[:, 1], rel[:, 0])
        # unwrap into the arc's angular window
        ang = np.where(ang < self.a0 - np.pi, ang + 2 * np.pi, ang)
        ang = np.where(ang > self.a1 + np.pi, ang - 2 * np.pi, ang)
        s = (ang - self.a0) * self.radius
        t = r - self.radius  # positive outward
        tau = np.column_stack((-np.sin(ang), np.cos(ang)))
        nu = np.column_stack((np.cos(ang), np.sin(ang)))
        kappa = np.full(pts.shape[0], 1.0 / self.radius)
        return s, t, tau, nu, kappa


class EllipseHole:
    """Axis-centered ellipse hole boundary, vertical center on the x1-axis."""

    closed = True

    def __init__(self, cx, semi_x, semi_y):
        self.cx = float(cx)
        self.sx = float(semi_x)
        self.sy = float(semi_y)

    @property
    def center(self):
        return np.array([self.cx, 0.0])

    def param(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.column_stack((self.cx + self.sx * np.cos(theta), self.sy * np.sin(theta)))

    def polyline(self, extent=None, n=129):
        return self.param(np.linspace(0.0, 2 * np.pi, n))

    def contains(self, pts, margin=0.0):
        pts = np.atleast_2d(pts)
        return ((pts[:, 0] - self.cx) / self.sx) ** 2 + (pts[:, 1] / self.sy) ** 2 < (1.0 + margin) ** 2

    def axis_crossings(self):
        return self.cx - self.sx, self.cx + self.sx

    def _arclen_table(self):
        # cumulative arclength s(theta) via composite Simpson, splined both
        # ways so arclength queries agree with the exact frame to ~1e-12
        if not hasattr(self, "_tab"):
            from scipy.interpolate import CubicSpline

            th = np.linspace(0.0, 2 * np.pi, 4097)
            speed = np.hypot(self.sx * np.sin(th), self.sy * np.cos(th))
            h = th[1] - th[0]
            mid = 0.5 * (th[:-1] + th[1:])
            speed_mid = np.hypot(self.sx * np.sin(mid), self.sy * np.cos(mid))
            inc = (h / 6.0) * (speed[:-1] + 4.0 * speed_mid + speed[1:])
            cum = np.concatenate(([0.0], np.cumsum(inc)))
            self._tab = (th, cum, CubicSpline(th, cum), CubicSpline(cum, th))
        return self._tab

    def arclength(self, theta):
        return self._arclen_table()[2](np.mod(np.asarray(theta, dtype=float), 2 * np.pi))

    def point(self, s):
        tab = self._arclen_table()
        s = np.mod(np.asarray(s, dtype=float), tab[1][-1])
        return self.param(tab[3](s))

    def project(self, pts):
        """Closest-point frame on the ellipse via Newton in the angle."""
        pts = np.atleast_2d(pts)
        x = pts[:, 0] - self.cx
        y = pts[:, 1]
        th = np.arctan2(self.sx * y, self.sy * x)
        a, b = self.sx, self.sy
        for _ in range(30):
            c, s = np.cos(th), np.sin(th)
            # d/dth |p - e(th)|^2 / 2
            f = (a * c - x) * (-a * s) + (b * s - y) * (b * c)
            fp = a * a * s * s + b * b * c * c - (a * c - x) * a * c - (b * s - y) * b * s
            step = f / np.where(np.abs(fp) < 1e-300, 1e-300, fp)
            step = np.clip(step, -0.5, 0.5)
            th = th - step
            if np.max(np.abs(step)) < 1e-14:
                break
        c, s = np.cos(th), np.sin(th)
        ex, ey = a * c, b * s
        dpx, dpy = -a * s, b * c
        sp = np.hypot(dpx, dpy)
        tau = np.column_stack((dpx / sp, dpy / sp))
        nu = np.column_stack((tau[:, 1], -tau[:, 0]))  # outward for CCW param
        t = (x - ex) * nu[:, 0] + (y - ey) * nu[:, 1]
        sarc = self.arclength(th)
        ddpx, ddpy = -a * c, -b * s
        kappa = (dpx * ddpy - dpy * ddpx) / sp**3
        return sarc, t, tau, nu, kappa

    @property
    def length(self):
        return float(self._arclen_table()[1][-1])


class WallCurve:
    """One wall of an outlet: z2 = side * g(z1), z1 in [z_start, extent]."""

    closed = False

    def __init__(self, outlet, side, z_start):
        self.outlet = outlet
        self.side = side  # +1 / -1 in local coords
        self.z_start = float(z_start)

    def polyline(self, extent, n=None):
        z_end = max(extent, self.z_start + 1.0)
        if n is None:
            n = 2 if self.outlet.width_fn.kind in ("const", "affine") else 65
        z1 = np.linspace(self.z_start, z_end, max(n, 2))
        z2 = self.side * self.outlet.width_fn(z1)
        return self.outlet.to_global(np.column_stack((z1, z2)))


# ---------------------------------------------------------------------------
# outlets


@dataclass
class OutletSpec:
    id: int
    angle: float  # direction of the outlet axis, radians
    width_fn: WidthFn
    lipschitz: float
    start: float  # R0
    symmetry_class: str = "auto"  # self | paired:<id> | auto

    def __post_init__(self):
        c, s = np.cos(self.angle), np.sin(self.angle)
        self._u = np.array([c, s])
        self._v = np.array([-s, c])

    @property
    def self_symmetric(self):
        return abs(np.sin(self.angle)) < 1e-12

    def to_local(self, pts):
        pts = np.atleast_2d(pts)
        return np.column_stack((pts @ self._u, pts @ self._v))

    def to_global(self, z):
        z = np.atleast_2d(z)
        return z[:, :1] * self._u[None, :] + z[:, 1:] * self._v[None, :]

    def member_mask(self, pts):
        z = self.to_local(pts)
        return (z[:, 0] > self.start) & (np.abs(z[:, 1]) < self.width_fn(z[:, 0]))

    def validate(self):
        self.width_fn.validate(self.start)
        if self.lipschitz <= 0:
            raise GeometryError(f"outlet {self.id}: lipschitz must be positive")
        if self.width_fn.lipschitz_bound(self.start) > self.lipschitz + 1e-12:
            raise GeometryError(f"outlet {self.id}: declared Lipschitz constant too small for the family")


# ---------------------------------------------------------------------------
# domain spec and validation


@dataclass
class DomainSpec:
    kind: str  # V | Y | I
    start_radius: float
    outlets: list
    holes: list = field(default_factory=list)


class Section:
    """Cross section sigma_j(R): segment at local z1 = R with outward normal."""

    def __init__(self, outlet, R):
        self.outlet = outlet
        self.R = float(R)
        g = float(outlet.width_fn(R))
        self.halfwidth = g
        self.p0 = outlet.to_global(np.array([[R, -g]]))[0]
        self.p1 = outlet.to_global(np.array([[R, g]]))[0]
        self.normal = outlet._u.copy()

    @property
    def length(self):
        return 2.0 * self.halfwidth

    def point(self, z2):
        z2 = np.asarray(z2, dtype=float)
        return self.outlet.to_global(np.column_stack((np.full_like(z2, self.R), z2)))


class OuterComponent:
    def __init__(self, id, wall_pieces, lam_curve, crosses_axis, mirror_partner):
        self.id = id
        self.walls = wall_pieces  # WallCurve list
        self.lam = lam_curve  # Curve for Lambda^m = Gamma_0^m cap dOmega_0
        self.crosses_axis = crosses_axis
        self.mirror_partner = mirror_partner  # component id (== self.id if self-symmetric)

    @property
    def self_symmetric(self):
        return self.mirror_partner == self.id

    def pieces(self):
        return list(self.walls) + [self.lam]


def mirror(pts):
    pts = np.atleast_2d(pts)
    out = pts.copy()
    out[:, 1] = -out[:, 1]
    return out


class ValidatedDomain:
    """Immutable validated handle; all queries are vectorized and pure."""

    def __init__(self, spec):
        self.spec = spec
        self.kind = spec.kind
        self.R0 = float(spec.start_radius)
        self.outlets = list(spec.outlets)
        self.holes = list(spec.holes)
        self._validate_basic()
        self.channel = self._is_channel()
        if self.channel:
            self.Rc = self.R0
        else:
            self.Rc = max(float(np.hypot(o.start, o.width_fn(o.start))) for o in self.outlets)
        self.scale = self.Rc
        self._build_boundary()
        self._check_symmetry()
        self._check_overlap()

    # -- construction ------------------------------------------------------

    def _validate_basic(self):
        if self.kind not in ("V", "Y", "I"):
            raise KindMismatch(f"unknown kind {self.kind!r}")
        if self.R0 <= 0:
            raise GeometryError("start_radius must be positive")
        for o in self.outlets:
            if abs(o.start - self.R0) > 1e-12:
                raise GeometryError("all outlets must share the domain start radius")
            o.validate()
        n_self = sum(1 for o in self.outlets if o.self_symmetric)
        expect = {"V": 0, "Y": 1, "I": 2}[self.kind]
        if n_self != expect:
            raise KindMismatch(f"kind {self.kind} expects {expect} self-symmetric outlets, found {n_self}")
        # paired outlets must have exact mirror partners
        for o in self.outlets:
            if o.self_symmetric:
                continue
            partner = [
                p
                for p in self.outlets
                if p.id != o.id
                and abs(np.sin(p.angle) + np.sin(o.angle)) < 1e-12
                and abs(np.cos(p.angle) - np.cos(o.angle)) < 1e-12
                and p.width_fn == o.width_fn
            ]
            if not partner:
                raise SymmetryViolation(f"outlet {o.id} has no mirror partner")
        for h in self.holes:
            if not isinstance(h, EllipseHole):
                raise GeometryError("holes must be EllipseHole instances")
            if h.sy <= 0 or h.sx <= 0:
                raise HoleOffAxis(f"hole at x={h.cx} has empty interior")
        self.holes = sorted(self.holes, key=lambda h: h.cx)

    def _is_channel(self):
        if self.kind != "I" or len(self.outlets) != 2:
            return False
        angs = sorted(abs(np.cos(o.angle)) for o in self.outlets)
        if not all(a > 1 - 1e-12 for a in angs):
            return False
        signs = sorted(np.sign(np.cos(o.angle)) for o in self.outlets)
        return signs == [-1.0, 1.0]

    def _mid_blend(self):
        # C^2 quintic joining the outlet width profiles across the core,
        # so the global half-width (and fields built on it) stays smooth
        if getattr(self, "_mid_poly", None) is None:
            right = next(o for o in self.outlets if np.cos(o.angle) > 0)
            left = next(o for o in self.outlets if np.cos(o.angle) < 0)
            r0 = self.R0
            ends = [
                [float(left.width_fn(r0)), -float(left.width_fn.deriv(r0)), float(left.width_fn.deriv2(r0))],
                [float(right.width_fn(r0)), float(right.width_fn.deriv(r0)), float(right.width_fn.deriv2(r0))],
            ]
            self._mid_poly = BPoly.from_derivatives([-r0, r0], ends)
        return self._mid_poly

    def channel_halfwidth(self, x1):
        """Global half-width profile G(x1) of a channel domain."""
        x1 = np.asarray(x1, dtype=float)
        right = next(o for o in self.outlets if np.cos(o.angle) > 0)
        left = next(o for o in self.outlets if np.cos(o.angle) < 0)
        gr = right.width_fn(np.maximum(x1, self.R0))
        gl = left.width_fn(np.maximum(-x1, self.R0))
        mid = self._mid_blend()(np.clip(x1, -self.R0, self.R0))
        out = np.where(x1 >= self.R0, gr, np.where(x1 <= -self.R0, gl, mid))
        return out

    def channel_halfwidth_deriv(self, x1):
        """dG/dx1 of the channel half-width profile."""
        x1 = np.asarray(x1, dtype=float)
        right = next(o for o in self.outlets if np.cos(o.angle) > 0)
        left = next(o for o in self.outlets if np.cos(o.angle) < 0)
        gr = right.width_fn.deriv(np.maximum(x1, self.R0))
        gl = -left.width_fn.deriv(np.maximum(-x1, self.R0))
        mid = self._mid_blend().derivative()(np.clip(x1, -self.R0, self.R0))
        return np.where(x1 >= self.R0, gr, np.where(x1 <= -self.R0, gl, mid))

    def _wall_exit(self, outlet):
        """Local z1 where the wall leaves the core disk."""
        if self.channel:
            return self.R0
        f = lambda z: np.hypot(z, float(outlet.width_fn(z))) - self.Rc
        if f(self.R0) >= -1e-12:
            return self.R0
        z_hi = self.R0
        while f(z_hi) < 0:
            z_hi *= 2.0
        return brentq(f, self.R0, z_hi, xtol=1e-14)

    def _build_boundary(self):
        self.outer_components = []
        if self.channel:
            right = next(o for o in self.outlets if np.cos(o.angle) > 0)
            left = next(o for o in self.outlets if np.cos(o.angle) < 0)
            top_lam = _ChannelWallMid(self, +1)
            bot_lam = _ChannelWallMid(self, -1)
            top = OuterComponent(
                1,
                [WallCurve(right, +1, self.R0), WallCurve(left, -1, self.R0)],
                top_lam,
                crosses_axis=False,
                mirror_partner=2,
            )
            bot = OuterComponent(
                2,
                [WallCurve(right, -1, self.R0), WallCurve(left, +1, self.R0)],
                bot_lam,
                crosses_axis=False,
                mirror_partner=1,
            )
            self.outer_components = [top, bot]
            return
        # generic disk-union-strips core: one component per angular gap
        byang = sorted(self.outlets, key=lambda o: np.mod(o.angle, 2 * np.pi))
        n = len(byang)
        comps = []
        for m in range(n):
            o_lo = byang[m]
            o_hi = byang[(m + 1) % n]
            z_lo = self._wall_exit(o_lo)
            z_hi = self._wall_exit(o_hi)
            p_lo = o_lo.to_global(np.array([[z_lo, o_lo.width_fn(z_lo)]]))[0]
            p_hi = o_hi.to_global(np.array([[z_hi, -o_hi.width_fn(z_hi)]]))[0]
            a0 = np.arctan2(p_lo[1], p_lo[0])
            a1 = np.arctan2(p_hi[1], p_hi[0])
            while a1 <= a0 + 1e-12:
                a1 += 2 * np.pi
            arc = Arc((0.0, 0.0), self.Rc, a0, a1)
            mid = 0.5 * (a0 + a1)
            crosses = np.cos(a0) * 1 and (np.sin(a0) <= 1e-12 <= np.sin(a1) or np.sin(a0 - 2 * np.pi) <= 0 <= np.sin(a1 - 2 * np.pi))
            crosses = _arc_crosses_axis(a0, a1)
            comps.append(
                {
                    "arc": arc,
                    "walls": [WallCurve(o_lo, +1, z_lo), WallCurve(o_hi, -1, z_hi)],
                    "mid_angle": mid,
                    "crosses": crosses,
                }
            )
        # mirror pairing by arc midpoint angle
        for m, c in enumerate(comps):
            c["id"] = m + 1
        for c in comps:
            if c["crosses"]:
                c["partner"] = c["id"]
            else:
                tgt = np.mod(-c["mid_angle"], 2 * np.pi)
                best = min(comps, key=lambda d: abs(np.mod(d["mid_angle"], 2 * np.pi) - tgt))
                c["partner"] = best["id"]
        self.outer_components = [
            OuterComponent(c["id"], c["walls"], c["arc"], c["crosses"], c["partner"]) for c in comps
        ]

    # -- symmetry / overlap checks ----------------------------------------

    def _boundary_sample(self, extent, per_piece=200):
        pts = []
        for tag, poly in self.boundary_polylines(extent):
            t = np.linspace(0, 1, per_piece)
            seg = np.searchsorted(np.linspace(0, 1, poly.shape[0]), t, side="right") - 1
            seg = np.clip(seg, 0, poly.shape[0] - 2)
            frac = t * (poly.shape[0] - 1) - seg
            pts.append(poly[seg] + frac[:, None] * (poly[seg + 1] - poly[seg]))
        return np.vstack(pts)

    def _check_symmetry(self, n_target=10_000, tol=1e-12):
        extent = 3.0 * self.Rc
        pts = self._boundary_sample(extent, per_piece=max(40, n_target // (1 + sum(1 for _ in self.boundary_polylines(extent)))))
        seg_a, seg_b = pack_polylines([p for _, p in self.boundary_polylines(extent)])
        d, _, _ = closest_point_packed(mirror(pts), seg_a, seg_b)
        if np.max(d) > tol * self.scale:
            raise SymmetryViolation(f"mirror residual {np.max(d):.3e} exceeds {tol * self.scale:.3e}")
        for h in self.holes:
            if not (h.cx - h.sx < h.cx + h.sx):  # degenerate
                raise HoleOffAxis(f"hole at x={h.cx} does not reach the x1-axis")

    def _check_overlap(self, max_extent_factor=6.0):
        ext = max_extent_factor * self.Rc
        for o in self.outlets:
            z1 = np.linspace(self._wall_exit(o), ext, 200)
            for frac in (-0.9, -0.5, 0.0, 0.5, 0.9):
                pts = o.to_global(np.column_stack((z1, frac * o.width_fn(z1))))
                outside_core = np.hypot(pts[:, 0], pts[:, 1]) > self.Rc
                for p in self.outlets:
                    if p.id == o.id:
                        continue
                    if np.any(p.member_mask(pts) & outside_core):
                        raise OutletOverlap(f"outlets {o.id} and {p.id} overlap beyond the core")

    # -- membership and classification ------------------------------------

    def in_hole(self, pts):
        pts = np.atleast_2d(pts)
        m = np.zeros(pts.shape[0], dtype=bool)
        for h in self.holes:
            m |= h.contains(pts)
        return m

    def contains(self, pts):
        pts = np.atleast_2d(pts)
        if self.channel:
            core = np.abs(pts[:, 1]) < self.channel_halfwidth(pts[:, 0])
        else:
            core = np.hypot(pts[:, 0], pts[:, 1]) < self.Rc
            for o in self.outlets:
                core |= o.member_mask(pts)
        return core & ~self.in_hole(pts)

    def classify(self, pts, axis_tol=1e-12):
        """Region label per point: ('omega0' | 'D<j>' | 'exterior', half-plane tag)."""
        pts = np.atleast_2d(pts)
        region = np.full(pts.shape[0], "exterior", dtype=object)
        inside = self.contains(pts)
        region[inside] = "omega0"
        for o in self.outlets:
            m = inside & o.member_mask(pts)
            region[m] = f"D{o.id}"
        tag = np.where(np.abs(pts[:, 1]) <= axis_tol, "axis", np.where(pts[:, 1] > 0, "plus", "minus"))
        return region, tag

    def classify_point(self, x):
        r, t = self.classify(np.asarray(x, dtype=float)[None, :])
        return r[0], t[0]

    # -- truncation and sections ------------------------------------------

    def truncation_radii(self, levels):
        """Radii table R[j, l], l = 0..levels, per the half-step recursion."""
        if levels < 1:
            raise GeometryError("levels must be >= 1")
        table = np.empty((len(self.outlets), levels + 1))
        for i, o in enumerate(self.outlets):
            r = self.R0
            table[i, 0] = r
            for l in range(1, levels + 1):
                r = r + float(o.width_fn(r)) / (2.0 * o.lipschitz)
                table[i, l] = r
        return table

    def outlet_by_id(self, outlet_id):
        for o in self.outlets:
            if o.id == outlet_id:
                return o
        raise UnknownOutlet(f"no outlet with id {outlet_id}")

    def cross_section(self, outlet_id, R):
        o = self.outlet_by_id(outlet_id)
        if R < o.start - 1e-12:
            raise RadiusBelowStart(f"R={R} below start radius {o.start}")
        return Section(o, R)

    # -- boundary polylines for distance sets ------------------------------

    def boundary_polylines(self, extent):
        """(tag, polyline) pieces of the full boundary, truncated at extent."""
        out = []
        for comp in self.outer_components:
            out.append((("outer", comp.id), comp.lam.polyline(extent)))
            for w in comp.walls:
                out.append((("outer", comp.id), w.polyline(extent)))
        for i, h in enumerate(self.holes, start=1):
            out.append((("hole", i), h.polyline()))
        return out

    def axis_intervals(self, extent):
        """Open intervals of the x1-axis interior to the domain."""
        cuts = [-extent, extent]
        if not self.channel:
            cuts += [-self.Rc, self.Rc]
        for h in self.holes:
            cuts += list(h.axis_crossings())
        cuts = np.unique(np.clip(np.array(cuts, dtype=float), -extent, extent))
        ivals = []
        for a, b in zip(cuts[:-1], cuts[1:]):
            if b - a < 1e-12:
                continue
            m = np.array([[0.5 * (a + b), 0.0]])
            if self.contains(m)[0]:
                ivals.append((a, b))
        # merge adjacent intervals
        merged = []
        for a, b in ivals:
            if merged and abs(merged[-1][1] - a) < 1e-12:
                merged[-1] = (merged[-1][0], b)
            else:
                merged.append((a, b))
        return merged

    def upper_boundary_polylines(self, extent):
        """Boundary pieces of Omega^+ = Omega cap {x2 > 0}, incl. axis segments."""
        out = []
        for tag, poly in self.boundary_polylines(extent):
            for piece in clip_polyline_upper(poly):
                out.append((tag, piece))
        for a, b in self.axis_intervals(extent):
            out.append((("axis", 0), np.array([[a, 0.0], [b, 0.0]])))
        return out

    def hole_axis_order(self):
        """Holes sorted by axis intersection (already sorted at validation)."""
        return list(self.holes)


class _ChannelWallMid:
    """Lambda^m of a channel wall: the |x1| <= R0 portion of the wall."""

    closed = False

    def __init__(self, domain, side):
        self.domain = domain
        self.side = side
        g0 = float(domain.channel_halfwidth(np.array([0.0]))[0])
        gr = float(domain.channel_halfwidth(np.array([domain.R0]))[0])
        gl = float(domain.channel_halfwidth(np.array([-domain.R0]))[0])
        self._seg = Segment((-domain.R0, side * gl), (domain.R0, side * gr))
        self._g0 = g0

    def polyline(self, extent=None, n=33):
        x = np.linspace(-self.domain.R0, self.domain.R0, n)
        return np.column_stack((x, self.side * self.domain.channel_halfwidth(x)))

    @property
    def length(self):
        p = self.polyline()
        return float(np.sum(np.hypot(*np.diff(p, axis=0).T)))

    def point(self, s):
        p = self.polyline(n=513)
        seg = np.hypot(*np.diff(p, axis=0).T)
        cum = np.concatenate(([0.0], np.cumsum(seg)))
        s = np.clip(np.asarray(s, dtype=float), 0.0, cum[-1])
        return np.column_stack((np.interp(s, cum, p[:, 0]), np.interp(s, cum, p[:, 1])))

    def project(self, pts):
        return self._seg.project(pts)


def _arc_crosses_axis(a0, a1):
    """Does the CCW arc (a0, a1) cross angle 0 or pi (mod 2pi)?"""
    for target in (0.0, np.pi):
        k0 = np.ceil((a0 - target) / (2 * np.pi))
        if a0 <= target + 2 * np.pi * k0 <= a1:
            return True
    return False


def clip_polyline_upper(poly, tol=1e-14):
    """Split a polyline into maximal pieces with x2 >= 0."""
    pieces = []
    cur = []
    for k in range(poly.shape[0] - 1):
        p, q = poly[k], poly[k + 1]
        if p[1] >= -tol and q[1] >= -tol:
            if not cur:
                cur.append(p)
            cur.append(q)
        elif p[1] >= -tol and q[1] < -tol:
            lam = p[1] / (p[1] - q[1])
            x = p + lam * (q - p)
            if not cur:
                cur.append(p)
            cur.append(x)
            if len(cur) >= 2:
                pieces.append(np.array(cur))
            cur = []
        elif p[1] < -tol and q[1] >= -tol:
            lam = p[1] / (p[1] - q[1])
            x = p + lam * (q - p)
            cur = [x, q]
        # both below: skip
    if len(cur) >= 2:
        pieces.append(np.array(cur))
    return pieces


def validate_domain(spec):
    """Validate a DomainSpec against the admissibility clauses."""
    return ValidatedDomain(spec)


# ---------------------------------------------------------------------------
# config file parsing


def parse_domain_config(path):
    """Read a [domain]/[outlet.j]/[hole.i] config file into a ValidatedDomain."""
    cp = configparser.ConfigParser()
    try:
        with open(path) as f:
            cp.read_file(f)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if "domain" not in cp:
        raise ConfigError(f"{path}: missing [domain] section")
    dom = cp["domain"]
    try:
        kind = dom["kind"].strip()
        r0 = float(dom["start_radius"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: [domain] needs kind and start_radius: {exc}") from exc
    outlets = []
    holes = []
    for name in cp.sections():
        if name.startswith("outlet."):
            sec = cp[name]
            try:
                oid = int(name.split(".", 1)[1])
                outlets.append(
                    OutletSpec(
                        id=oid,
                        angle=np.deg2rad(float(sec["angle_deg"])),
                        width_fn=WidthFn.parse(sec["width_fn"]),
                        lipschitz=float(sec["lipschitz"]),
                        start=r0,
                        symmetry_class=sec.get("symmetry", "auto"),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"{path}: bad [{name}]: {exc}") from exc
        elif name.startswith("hole."):
            sec = cp[name]
            try:
                holes.append(
                    EllipseHole(
                        cx=float(sec["center_x"]),
                        semi_x=float(sec["semi_x"]),
                        semi_y=float(sec["semi_y"]),
                    )
                )
                if abs(float(sec.get("center_y", "0.0"))) > float(sec["semi_y"]):
                    raise HoleOffAxis(f"{path}: [{name}] does not cross the x1-axis")
                if float(sec.get("center_y", "0.0")) != 0.0:
                    raise ConfigError(f"{path}: [{name}]: off-axis hole centers are not supported")
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"{path}: bad [{name}]: {exc}") from exc
    spec = DomainSpec(kind=kind, start_radius=r0, outlets=outlets, holes=holes)
    return validate_domain(spec)
