"""Scalar building blocks: regularized distances, ramp profiles, Hopf cut-offs.

The regularized distance blends exact smooth per-piece distances with a
power softmin, giving a field comparable to the true distance that is C^2
away from the target set with closed-form gradient — which every
downstream cut-off field needs to pass the finite-difference divergence
checks.
"""

import numpy as np

from ._kernels import (_soft_ramp_np, closest_point_packed, pack_polylines,
                       soft_segment_distance)


class DegenerateSet(ValueError):
    pass


class NonPositiveScale(ValueError):
    pass


class ZeroClearance(ValueError):
    pass


# ---------------------------------------------------------------------------
# quintic ramp


def psi(t):
    """C^2 monotone ramp: 0 for t<=0, 1 for t>=1, quintic in between."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    return t * t * t * (10.0 + t * (-15.0 + 6.0 * t))


def psi_d1(t):
    t = np.asarray(t, dtype=float)
    inside = (t > 0.0) & (t < 1.0)
    tc = np.clip(t, 0.0, 1.0)
    return np.where(inside, 30.0 * tc * tc * (1.0 - tc) ** 2, 0.0)


def psi_d2(t):
    t = np.asarray(t, dtype=float)
    inside = (t > 0.0) & (t < 1.0)
    tc = np.clip(t, 0.0, 1.0)
    return np.where(inside, 60.0 * tc * (1.0 - tc) * (1.0 - 2.0 * tc), 0.0)


def rho(tau, d0, a1, a2):
    """Monotone C^2 clamp: a1*d0/2 below a2*d0/2, identity above a2*d0.

    The blend on [a2*d0/2, a2*d0] is rho = lo + (tau - lo) * psi(s); both
    joins are C^2 because psi has vanishing first and second derivatives
    at its ends.
    """
    if d0 <= 0:
        raise NonPositiveScale(f"d0 must be positive, got {d0}")
    tau = np.asarray(tau, dtype=float)
    lo = 0.5 * a1 * d0
    t0 = 0.5 * a2 * d0
    t1 = a2 * d0
    s = (tau - t0) / (t1 - t0)
    return lo + (tau - lo) * psi(s)


def rho_d1(tau, d0, a1, a2):
    if d0 <= 0:
        raise NonPositiveScale(f"d0 must be positive, got {d0}")
    tau = np.asarray(tau, dtype=float)
    lo = 0.5 * a1 * d0
    t0 = 0.5 * a2 * d0
    t1 = a2 * d0
    s = (tau - t0) / (t1 - t0)
    return psi(s) + (tau - lo) * psi_d1(s) / (t1 - t0)


# ---------------------------------------------------------------------------
# regularized distance


class RegularizedDistance:
    """Smooth distance-comparable field built from exact per-piece distances.

    Each piece is either a segment of a polyline or a smooth curve with a
    projection; open pieces get a C^2 endpoint cap (overshoot beyond an
    endpoint enters through a quintic-smoothed ramp), and the pieces are
    blended with a power softmin.  The result is C^2 away from the target
    set with closed-form gradient, and satisfies
    a1 * d(x) <= value(x) <= a2 * d(x) away from endpoint cap balls.
    """

    def __init__(self, polylines=(), curves=(), cap_scale=None, p=8.0):
        self.curve_pieces = []
        for c in curves:
            if isinstance(c, tuple):
                self.curve_pieces.append(c)
            elif c.closed:
                self.curve_pieces.append((c, None, None))
            else:
                self.curve_pieces.append((c, 0.0, c.length))
        polylines = [np.asarray(pl, dtype=float) for pl in polylines]
        if not polylines and not self.curve_pieces:
            raise DegenerateSet("empty target set")
        self.seg_a = self.seg_b = None
        if polylines:
            self.seg_a, self.seg_b = pack_polylines(polylines)
        if cap_scale is None:
            cap_scale = 0.02 * self._extent()
        if cap_scale <= 0:
            raise NonPositiveScale(f"cap_scale must be positive, got {cap_scale}")
        self.cap_scale = float(cap_scale)
        self.p = float(p)
        n_pieces = len(self.curve_pieces) + (0 if self.seg_a is None else self.seg_a.shape[0])
        # conservative comparability constants for the rho clamp
        self.a1 = 0.5 * n_pieces ** (-1.0 / self.p)
        self.a2 = 1.0

    def _extent(self):
        pts = []
        if self.seg_a is not None:
            pts.extend([self.seg_a, self.seg_b])
        for c, _, _ in self.curve_pieces:
            pts.append(c.polyline(extent=None) if c.closed else c.polyline(10.0))
        allp = np.vstack(pts)
        span = np.max(allp, axis=0) - np.min(allp, axis=0)
        return max(float(np.max(span)), 1.0)

    def _curve_piece_phi(self, curve, s_lo, s_hi, pts):
        s, t, tau, nu, kappa = curve.project(pts)
        if s_lo is None:
            phi = np.abs(t)
            safe = np.where(phi > 0.0, phi, 1.0)
            grad = (t / safe)[:, None] * nu
            return phi, grad
        mlo, dlo = _soft_ramp_np(s_lo - s, self.cap_scale)
        mhi, dhi = _soft_ramp_np(s - s_hi, self.cap_scale)
        phi = np.sqrt(t * t + mlo * mlo + mhi * mhi)
        safe = np.where(phi > 0.0, phi, 1.0)
        den = 1.0 + t * kappa
        den = np.where(np.abs(den) < 1e-9, np.sign(den + 1e-300) * 1e-9, den)
        grad_s = tau / den[:, None]
        grad = ((t / safe)[:, None] * nu + ((mhi * dhi - mlo * dlo) / safe)[:, None] * grad_s)
        return phi, grad

    def value_grad(self, pts):
        pts = np.atleast_2d(pts)
        groups = []
        if self.seg_a is not None:
            groups.append(soft_segment_distance(pts, self.seg_a, self.seg_b, self.cap_scale, self.p))
        for curve, s_lo, s_hi in self.curve_pieces:
            phi, grad = self._curve_piece_phi(curve, s_lo, s_hi, pts)
            safe = np.where(phi > 0.0, phi, 1.0)
            groups.append((np.ones(pts.shape[0]), grad / safe[:, None], phi))
        ref = np.min(np.column_stack([g[2] for g in groups]), axis=1)
        live = ref > 0.0
        safe_ref = np.where(live, ref, 1.0)
        S = np.zeros(pts.shape[0])
        G = np.zeros_like(pts)
        for Sg, Gg, ref_g in groups:
            with np.errstate(over="ignore"):
                scale = np.where(live, (safe_ref / np.where(ref_g > 0.0, ref_g, 1.0)) ** self.p, 0.0)
            scale = np.where(ref_g == 0.0, np.where(ref == 0.0, 1.0, 0.0), scale)
            S += scale * Sg
            G += scale[:, None] * Gg
        S = np.where(S > 0.0, S, 1.0)
        val = ref * S ** (-1.0 / self.p)
        grad = np.where(live[:, None], val[:, None] * G / S[:, None], 0.0)
        return val, grad

    def value(self, pts):
        return self.value_grad(pts)[0]

    def gradient(self, pts):
        return self.value_grad(pts)[1]

    def raw(self, pts):
        """Exact distance to the union of pieces and its a.e. gradient."""
        pts = np.atleast_2d(pts)
        best = np.full(pts.shape[0], np.inf)
        grad = np.zeros_like(pts)
        if self.seg_a is not None:
            d, closest, _ = closest_point_packed(pts, self.seg_a, self.seg_b)
            g = (pts - closest) / np.where(d > 0.0, d, 1.0)[:, None]
            better = d < best
            best = np.where(better, d, best)
            grad = np.where(better[:, None], g, grad)
        for curve, s_lo, s_hi in self.curve_pieces:
            s, t, tau, nu, kappa = curve.project(pts)
            if s_lo is None:
                d = np.abs(t)
                g = np.sign(t)[:, None] * nu
            else:
                sc = np.clip(s, s_lo, s_hi)
                q = curve.point(sc)
                diff = pts - q
                d = np.hypot(diff[:, 0], diff[:, 1])
                g = diff / np.where(d > 0.0, d, 1.0)[:, None]
            better = d < best
            best = np.where(better, d, best)
            grad = np.where(better[:, None], g, grad)
        return best, grad

    def hessian(self, pts, h=None):
        """Centered differences of the analytic gradient."""
        pts = np.atleast_2d(pts)
        if h is None:
            h = 1e-5 * self._extent()
        H = np.empty((pts.shape[0], 2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            gp = self.gradient(pts + e)
            gm = self.gradient(pts - e)
            H[:, k, :] = (gp - gm) / (2.0 * h)
        return 0.5 * (H + np.transpose(H, (0, 2, 1)))

    def sample_points(self, n_total=2000):
        """Points on the target set (for clearance estimates)."""
        pts = []
        if self.seg_a is not None:
            pts.append(_sample_segments(self.seg_a, self.seg_b, n_total))
        for curve, s_lo, s_hi in self.curve_pieces:
            if s_lo is None:
                s_lo, s_hi = 0.0, curve.length
            pts.append(curve.point(np.linspace(s_lo, s_hi, max(64, n_total // 8))))
        return np.vstack(pts)

    def measure_constants(self, pts):
        """Sampled (a1, a2, a3) of the comparability and derivative bounds."""
        pts = np.atleast_2d(pts)
        d, _ = self.raw(pts)
        ok = d > 0
        val, grad = self.value_grad(pts[ok])
        a1 = float(np.min(val / d[ok]))
        a2 = float(np.max(val / d[ok]))
        gnorm = np.hypot(grad[:, 0], grad[:, 1])
        H = self.hessian(pts[ok])
        hnorm = np.max(np.abs(H), axis=(1, 2))
        a3 = float(max(np.max(gnorm), np.max(hnorm * d[ok])))
        return a1, a2, a3


# ---------------------------------------------------------------------------
# Hopf cut-off


class HopfCutoff:
    """xi(x, eps) = psi(eps * ln(rho(D_guide(x)) / D_excl(x))).

    Zero where rho(D_guide) <= D_excl (in particular in a d0/2-neighborhood
    of the guide), one where D_excl <= exp(-1/eps) * rho(D_guide), with
    gradient supported in the band between.  ``below`` restricts to a
    one-sided variant: the field is forced to zero where below(x) is true
    (smoothness survives because the cut-off already vanishes near the
    guide that separates the sides).
    """

    def __init__(self, epsilon, dist_guide, dist_excl, d0=None, below=None):
        if epsilon <= 0:
            raise NonPositiveScale(f"epsilon must be positive, got {epsilon}")
        self.eps = float(epsilon)
        self.dist_guide = dist_guide
        self.dist_excl = dist_excl
        if d0 is None:
            d0 = clearance(dist_guide, dist_excl)
        if d0 <= 0:
            raise ZeroClearance("guide curve touches the excluded boundary set")
        self.d0 = float(d0)
        # distances below FP projection noise are indistinguishable from 0;
        # without the snap the xi = 1 zone (width rho * e^{-1/eps}) can fall
        # entirely below that noise for small eps and on-boundary points
        # would evaluate to xi < 1
        self.snap = 2e-15 * max(1.0, self.d0)
        self.below = below
        self.a1 = dist_guide.a1
        self.a2 = dist_guide.a2

    def _rho_pair(self, dg):
        return (
            rho(dg, self.d0, self.a1, self.a2),
            rho_d1(dg, self.d0, self.a1, self.a2),
        )

    def _argument(self, pts):
        dg, gg = self.dist_guide.value_grad(pts)
        de, ge = self.dist_excl.value_grad(pts)
        de = np.where(de <= self.snap, 0.0, de)
        r, rp = self._rho_pair(dg)
        with np.errstate(divide="ignore"):
            t = self.eps * (np.log(r) - np.log(de))
        return t, (dg, gg, de, ge, r, rp)

    def value(self, pts):
        t, _ = self._argument(np.atleast_2d(pts))
        out = psi(np.where(np.isfinite(t), t, 1.0))
        out = np.where(np.isinf(t), 1.0, out)
        if self.below is not None:
            out = np.where(self.below(np.atleast_2d(pts)), 0.0, out)
        return out

    def value_grad(self, pts):
        pts = np.atleast_2d(pts)
        t, (dg, gg, de, ge, r, rp) = self._argument(pts)
        tf = np.where(np.isfinite(t), t, 1.0)
        val = np.where(np.isinf(t), 1.0, psi(tf))
        dpsi = psi_d1(tf)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef_g = self.eps * rp / r
            coef_e = self.eps / de
            dt = coef_g[:, None] * gg - coef_e[:, None] * ge
        dt = np.where(np.isfinite(t)[:, None], dt, 0.0)
        grad = np.where((dpsi > 0)[:, None] & np.isfinite(t)[:, None], dpsi[:, None] * dt, 0.0)
        if self.below is not None:
            m = self.below(pts)
            val = np.where(m, 0.0, val)
            grad = np.where(m[:, None], 0.0, grad)
        return val, grad

    def gradient(self, pts):
        return self.value_grad(pts)[1]

    def hessian(self, pts, h=None):
        pts = np.atleast_2d(pts)
        if h is None:
            h = 1e-6 * self.d0
        H = np.empty((pts.shape[0], 2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            H[:, k, :] = (self.gradient(pts + e) - self.gradient(pts - e)) / (2.0 * h)
        return 0.5 * (H + np.transpose(H, (0, 2, 1)))

    def classify(self, pts):
        """Trichotomy label per point: 'zero' | 'band' | 'one'."""
        pts = np.atleast_2d(pts)
        dg = self.dist_guide.value(pts)
        de = self.dist_excl.value(pts)
        de = np.where(de <= self.snap, 0.0, de)
        r = rho(dg, self.d0, self.a1, self.a2)
        lab = np.full(pts.shape[0], "band", dtype=object)
        lab[r <= de] = "zero"
        lab[de <= np.exp(-1.0 / self.eps) * r] = "one"
        if self.below is not None:
            lab[self.below(pts)] = "zero"
        return lab


def clearance(dist_guide, dist_excl, n_probe=4000):
    """Min regularized excluded-set distance over the guide set."""
    pts = dist_guide.sample_points(n_probe)
    return float(np.min(dist_excl.value(pts)))


def _sample_segments(seg_a, seg_b, n_total):
    lens = np.hypot(*(seg_b - seg_a).T)
    total = np.sum(lens)
    pts = [seg_a, seg_b]
    for a, b, L in zip(seg_a, seg_b, lens):
        k = max(1, int(np.ceil(n_total * L / max(total, 1e-300))))
        t = (np.arange(k) + 0.5) / k
        pts.append(a[None, :] + t[:, None] * (b - a)[None, :])
    return np.vstack(pts)
