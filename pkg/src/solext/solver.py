"""Truncated-domain Navier-Stokes solves against the assembled extension.

The truncated problem on Omega_l is solved for u = A + v with v vanishing
on the truncation boundary, in stream-function / vorticity form on a mapped
channel mesh: the domain is represented as {|q| < H(p)} in a rotated frame
(p along the outlet axis), so the mesh is a tensor grid in (p, zeta) with
q = zeta * H(p).  Divergence and section fluxes are exact by construction;
the coupled (psi, omega) system of each Picard step is linear and solved by
direct sparse factorization.  An energy ledger tracks Dirichlet integrals
of the solved fields against the reference curve 1 + sum_j int dx1/g_j^3.

Only hole-free two-outlet domains whose truncation is such a channel are
solvable here; anything else raises SolverUnsupported.
"""

import numpy as np
import scipy.sparse as sp
from scipy.integrate import quad
from scipy.interpolate import CubicSpline, RegularGridInterpolator
from scipy.sparse.linalg import splu

from .verify import random_test_field


class SolverUnsupported(RuntimeError):
    pass


class NoConvergence(RuntimeError):
    def __init__(self, msg, reynolds=None, trace=None):
        super().__init__(msg)
        self.reynolds = reynolds
        self.trace = trace or []


# ---------------------------------------------------------------------------
# channel frame and mesh


def _channel_frame(domain):
    """Rotation matrix taking the two-outlet axis to the p-axis.

    Points map by p = R @ x; velocity vectors transform the same way
    (proper rotation, so the stream/vorticity relations are unchanged).
    """
    if domain.holes:
        raise SolverUnsupported("solver mesh requires a hole-free domain")
    if len(domain.outlets) != 2:
        raise SolverUnsupported("solver mesh requires exactly two outlets")
    o1, o2 = domain.outlets
    if abs(abs((o1.angle - o2.angle + np.pi) % (2 * np.pi) - np.pi) - np.pi) > 1e-12:
        raise SolverUnsupported("the two outlets must be collinear")
    th = o1.angle
    c, s = np.cos(th), np.sin(th)
    return np.array([[c, s], [-s, c]]), o1, o2


def _half_width(domain, rot, p):
    """H(p) with {|q| < H(p)} = rotated domain section, by bisection."""
    p = np.asarray(p, dtype=float)
    inv = rot.T
    hi = np.full_like(p, 4.0 * float(np.max(domain.truncation_radii(1))))
    lo = np.zeros_like(p)
    # expects containment monotone in |q|; verified by the caller's probe
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        pts = np.column_stack((p, mid)) @ inv.T
        inside = domain.contains(pts)
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return 0.5 * (lo + hi)


class ChannelMesh:
    """Tensor grid in (p, zeta): core block plus per-outlet level blocks.

    p runs from -R_{2,l} to R_{1,l} (outlet 1 on the positive side);
    zeta in [-1, 1] with q = zeta * H(p).
    """

    def __init__(self, domain, level, core_cells=96, cross_cells=96, outlet_cells=64):
        rot, o1, o2 = _channel_frame(domain)
        self.domain = domain
        self.level = int(level)
        self.rot = rot
        radii = domain.truncation_radii(level)
        i1 = list(domain.outlets).index(o1)
        i2 = 1 - i1
        cols = []
        self.block_slices = []
        start = 0
        for l in range(level, 0, -1):  # left outlet, outermost segment first
            seg = -np.linspace(radii[i2, l], radii[i2, l - 1], outlet_cells + 1)
            cols.append(seg[:-1])
            self.block_slices.append((f"outlet{o2.id}_l{l}", start, start + outlet_cells))
            start += outlet_cells
        cols.append(np.linspace(-radii[i2, 0], radii[i1, 0], core_cells + 1)[:-1])
        self.block_slices.append(("core", start, start + core_cells))
        start += core_cells
        for l in range(1, level + 1):
            seg = np.linspace(radii[i1, l - 1], radii[i1, l], outlet_cells + 1)
            cols.append(seg[:-1] if l < level else seg)
            self.block_slices.append((f"outlet{o1.id}_l{l}", start, start + outlet_cells))
            start += outlet_cells
        self.p = np.concatenate(cols)
        self.zeta = np.linspace(-1.0, 1.0, cross_cells + 1)
        self.radii = radii
        self.pos_outlet, self.neg_outlet = o1, o2
        self.pos_idx, self.neg_idx = i1, i2
        Hs = _half_width(domain, rot, self.p)
        # spline gives the smooth H' the mapped derivatives need
        self._H = CubicSpline(self.p, Hs)
        self.H = Hs
        self.dH = self._H.derivative()(self.p)
        self._check_channel()

    def _check_channel(self):
        P, Z = np.meshgrid(self.p, np.array([-0.85, -0.4, 0.0, 0.4, 0.85]), indexing="ij")
        pts = self.points(P.ravel(), Z.ravel())
        if not self.domain.contains(pts).all():
            raise SolverUnsupported("truncated domain is not a channel {|q| < H(p)}")
        if np.any(self.H <= 0.0):
            raise SolverUnsupported("channel width vanishes inside the truncation")

    def points(self, p, zeta):
        """Physical coordinates of mapped points."""
        q = np.asarray(zeta) * self._H(p)
        return np.column_stack((np.asarray(p, dtype=float), q)) @ self.rot

    def grid_points(self):
        P, Z = np.meshgrid(self.p, self.zeta, indexing="ij")
        return self.points(P.ravel(), Z.ravel()).reshape(len(self.p), len(self.zeta), 2)

    def frame_velocity(self, field, p, zeta):
        """A velocity field sampled on mapped points, in frame components."""
        u = field.velocity(self.points(p, zeta))
        return u @ self.rot.T

    def cell_mask(self, k):
        """Midpoint mask of cells inside the level-k truncation."""
        pm = 0.5 * (self.p[:-1] + self.p[1:])
        return (pm <= self.radii[self.pos_idx, k]) & (pm >= -self.radii[self.neg_idx, k])


# ---------------------------------------------------------------------------
# 1D difference operators (rows = target nodes, cols = source incl. ghosts)


def _d_ops(x):
    """(D1, D2, S) mapping values on [ghost, x..., ghost] to derivatives on x.

    Central first/second differences on the non-uniform grid; the ghost
    nodes continue the end spacings.
    """
    n = len(x)
    xe = np.concatenate(([x[0] - (x[1] - x[0])], x, [x[-1] + (x[-1] - x[-2])]))
    h_l = xe[1:-1] - xe[:-2]
    h_r = xe[2:] - xe[1:-1]
    idx = np.arange(n)
    # first derivative
    a = -h_r / (h_l * (h_l + h_r))
    b = (h_r - h_l) / (h_l * h_r)
    c = h_l / (h_r * (h_l + h_r))
    D1 = sp.csr_matrix(
        (np.concatenate([a, b, c]), (np.tile(idx, 3), np.concatenate([idx, idx + 1, idx + 2]))),
        shape=(n, n + 2),
    )
    a2 = 2.0 / (h_l * (h_l + h_r))
    b2 = -2.0 / (h_l * h_r)
    c2 = 2.0 / (h_r * (h_l + h_r))
    D2 = sp.csr_matrix(
        (np.concatenate([a2, b2, c2]), (np.tile(idx, 3), np.concatenate([idx, idx + 1, idx + 2]))),
        shape=(n, n + 2),
    )
    S = sp.csr_matrix((np.ones(n), (idx, idx + 1)), shape=(n, n + 2))
    return D1, D2, S


class _MappedOps:
    """Sparse operators of the mapped Laplacian and gradient.

    With m = H'/H the physical derivatives of a grid function are
      d/dx_a = d_p - zeta m d_zeta,       d/dx_c = (1/H) d_zeta,
    and the Laplacian becomes
      f_pp - 2 zeta m f_pz + (zeta^2 m^2 + 1/H^2) f_zz + zeta (m^2 - m') f_z.
    Operators map extended (ghost-framed) grids to the plain grid.
    """

    def __init__(self, mesh):
        p, z = mesh.p, mesh.zeta
        Dp1, Dp2, Sp = _d_ops(p)
        Dz1, Dz2, Sz = _d_ops(z)
        self.shape = (len(p), len(z))
        self.ext_shape = (len(p) + 2, len(z) + 2)
        K_pp = sp.kron(Dp2, Sz, format="csr")
        K_zz = sp.kron(Sp, Dz2, format="csr")
        K_pz = sp.kron(Dp1, Dz1, format="csr")
        self.K_z = sp.kron(Sp, Dz1, format="csr")
        self.K_p = sp.kron(Dp1, Sz, format="csr")
        self.S = sp.kron(Sp, Sz, format="csr")
        H = mesh.H
        m = mesh.dH / H
        dm = CubicSpline(p, m).derivative()(p)
        P, Z = np.meshgrid(p, z, indexing="ij")
        Hf = np.repeat(H, len(z))
        mf = np.repeat(m, len(z))
        dmf = np.repeat(dm, len(z))
        zf = Z.ravel()
        dia = lambda v: sp.diags(v)
        self.lap = (
            K_pp
            + dia(-2.0 * zf * mf) @ K_pz
            + dia(zf**2 * mf**2 + 1.0 / Hf**2) @ K_zz
            + dia(zf * (mf**2 - dmf)) @ self.K_z
        )
        self.Hf = Hf
        self.mf = mf
        self.zf = zf

    def grad_phys(self, ext_vals):
        """(d/dx_a, d/dx_c) of an extended grid function, flattened."""
        fp = self.K_p @ ext_vals
        fz = self.K_z @ ext_vals
        return fp - self.zf * self.mf * fz, fz / self.Hf

    def velocity_of_stream(self, ext_psi):
        da, dc = self.grad_phys(ext_psi)
        return dc, -da  # u_a = psi_{x_c}, u_c = -psi_{x_a}

    def advection(self, ua, uc):
        """Sparse (u . grad) acting on extended grid functions."""
        dia = sp.diags
        return dia(ua) @ (self.K_p - dia(self.zf * self.mf) @ self.K_z) + dia(uc / self.Hf) @ self.K_z


def _ext_index(shape):
    """Helpers between plain (i,j) and extended flat indices."""
    n, m = shape
    def flat(i, j):
        return (np.asarray(i) + 1) * (m + 2) + (np.asarray(j) + 1)
    return flat


# ---------------------------------------------------------------------------
# truncated problem


class TruncatedProblem:
    """Truncated symmetric Navier-Stokes problem on the level-l channel mesh.

    f, when given, is a callable pts -> (n, 2) force (symmetric, compactly
    supported).  The divergence penalty is identically zero: the stream
    formulation is exactly solenoidal, the attribute only records that.
    """

    div_penalty = 0.0

    def __init__(self, domain, level, nu, A, f=None, core_cells=96, cross_cells=96, outlet_cells=64):
        if nu <= 0.0:
            raise ValueError("viscosity must be positive")
        self.domain = domain
        self.level = int(level)
        self.nu = float(nu)
        self.A = A
        self.f = f
        self.mesh = ChannelMesh(domain, level, core_cells, cross_cells, outlet_cells)

    def boundary_stream(self):
        """Single-valued stream of A on the grid boundary, branch-corrected.

        A's stream may carry vertical branch cuts; walking the boundary and
        accumulating segment jumps restores the continuous stream the
        simply connected truncation admits.
        """
        mesh = self.mesh
        n, m = len(mesh.p), len(mesh.zeta)
        psi = np.full((n, m), np.nan)
        uf = np.zeros((n, m, 2))
        # boundary nodes in one closed walk: bottom wall, right end, top wall, left end
        walk = (
            [(i, 0) for i in range(n)]
            + [(n - 1, j) for j in range(1, m)]
            + [(i, m - 1) for i in range(n - 2, -1, -1)]
            + [(0, j) for j in range(m - 2, 0, -1)]
        )
        ii = np.array([w[0] for w in walk])
        jj = np.array([w[1] for w in walk])
        pts = mesh.points(mesh.p[ii], mesh.zeta[jj])
        s = self.A.stream(pts)
        vals = np.empty(len(walk))
        vals[0] = s[0]
        for k in range(1, len(walk)):
            vals[k] = vals[k - 1] + (s[k] - s[k - 1]) - self.A.segment_jump(pts[k - 1], pts[k])
        psi[ii, jj] = vals
        u = self.A.velocity(pts) @ mesh.rot.T
        uf[ii, jj] = u
        return psi, uf


def _interior_rows(shape):
    n, m = shape
    I, J = np.meshgrid(np.arange(1, n - 1), np.arange(1, m - 1), indexing="ij")
    return (I * m + J).ravel()


def _boundary_rows(shape):
    n, m = shape
    mask = np.zeros((n, m), dtype=bool)
    mask[0, :] = mask[-1, :] = True
    mask[:, 0] = mask[:, -1] = True
    return np.flatnonzero(mask.ravel())


def _ghost_rows(shape):
    n, m = shape
    mask = np.ones((n + 2, m + 2), dtype=bool)
    mask[1:-1, 1:-1] = False
    return np.flatnonzero(mask.ravel())


def _rot_f(problem, pts, h=1e-5):
    f = problem.f
    if f is None:
        return np.zeros(pts.shape[0])
    ex = np.array([h, 0.0])
    ey = np.array([0.0, h])
    d2 = (np.asarray(f(pts + ex))[:, 1] - np.asarray(f(pts - ex))[:, 1]) / (2 * h)
    d1 = (np.asarray(f(pts + ey))[:, 0] - np.asarray(f(pts - ey))[:, 0]) / (2 * h)
    return d2 - d1


class Solution:
    """Discrete u = A + v on the channel mesh, with field evaluation."""

    def __init__(self, problem, psi, omega, trace):
        self.problem = problem
        self.mesh = problem.mesh
        self.psi = psi  # plain grid (n, m)
        self.omega = omega
        self.trace = trace
        ops = _MappedOps(self.mesh)
        ua, uc = ops.velocity_of_stream(_pad_ext(psi).ravel())
        n, m = len(self.mesh.p), len(self.mesh.zeta)
        self.u_frame = np.stack([ua.reshape(n, m), uc.reshape(n, m)], axis=-1)
        self._interp = RegularGridInterpolator(
            (self.mesh.p, self.mesh.zeta), self.u_frame, bounds_error=False, fill_value=0.0
        )
        self._psi_interp = RegularGridInterpolator(
            (self.mesh.p, self.mesh.zeta), psi, bounds_error=False, fill_value=None
        )
        self._ops = ops

    def _to_frame(self, pts):
        loc = np.atleast_2d(pts) @ self.mesh.rot.T
        zeta = loc[:, 1] / self.mesh._H(loc[:, 0])
        return np.column_stack((loc[:, 0], zeta))

    def velocity(self, pts):
        u = self._interp(self._to_frame(pts))
        return u @ self.mesh.rot

    def stream(self, pts):
        return self._psi_interp(self._to_frame(pts))

    def flux(self, p):
        """Exact flux through the section at frame coordinate p."""
        i = int(np.argmin(np.abs(self.mesh.p - p)))
        return float(self.psi[i, -1] - self.psi[i, 0])

    def dirichlet(self, k=None):
        """int |grad u|^2 over the level-k truncation (k=None: whole mesh)."""
        mesh, ops = self.mesh, self._ops
        n, m = len(mesh.p), len(mesh.zeta)
        comps = []
        for c in range(2):
            da, dc = ops.grad_phys(_pad_ext(self.u_frame[:, :, c]).ravel())
            comps.append(da.reshape(n, m) ** 2 + dc.reshape(n, m) ** 2)
        dens = comps[0] + comps[1]
        wp = _trapz_weights(mesh.p)
        wz = _trapz_weights(mesh.zeta)
        W = np.outer(wp, wz) * mesh.H[:, None]  # area element H dp dzeta
        if k is not None:
            cmask = mesh.cell_mask(k)
            node = np.zeros(n, dtype=bool)
            node[:-1] |= cmask
            node[1:] |= cmask
            W = W * node[:, None]
        return float(np.sum(dens * W))

    def mirror_residual(self):
        """sup |u(x) - M u(Mx)| over grid nodes."""
        pts = self.mesh.grid_points().reshape(-1, 2)
        u = self.velocity(pts)
        pm = pts.copy()
        pm[:, 1] *= -1.0
        um = self.velocity(pm)
        um[:, 1] *= -1.0
        return float(np.max(np.abs(u - um)))

    def dump_blocks(self, outdir, cross_out=32):
        """Plain-text (x, y, u1, u2) grid files, one per mesh block."""
        import os

        mesh = self.mesh
        step = (len(mesh.zeta) - 1) // cross_out
        paths = []
        for name, i0, i1 in mesh.block_slices:
            js = slice(None) if name == "core" else slice(None, None, step)
            P = mesh.p[i0 : i1 + 1]
            Z = mesh.zeta[js]
            PP, ZZ = np.meshgrid(P, Z, indexing="ij")
            pts = mesh.points(PP.ravel(), ZZ.ravel())
            u = self.velocity(pts)
            path = os.path.join(outdir, f"{name}.txt")
            with open(path, "w") as fh:
                fh.write(f"# block={name} nx={len(P)} ny={len(Z)} level={mesh.level}\n")
                for (x, y), (u1, u2) in zip(pts, u):
                    fh.write(f"{x!r} {y!r} {u1!r} {u2!r}\n")
            paths.append(path)
        return paths


def _pad_ext(vals):
    """Extend a plain grid by linear continuation into the ghost frame."""
    n, m = vals.shape
    out = np.empty((n + 2, m + 2))
    out[1:-1, 1:-1] = vals
    out[0, 1:-1] = 2 * vals[0] - vals[1]
    out[-1, 1:-1] = 2 * vals[-1] - vals[-2]
    out[:, 0] = 2 * out[:, 1] - out[:, 2]
    out[:, -1] = 2 * out[:, -2] - out[:, -3]
    return out


def _trapz_weights(x):
    w = np.zeros_like(x)
    w[:-1] += 0.5 * np.diff(x)
    w[1:] += 0.5 * np.diff(x)
    return w


def solve_truncated(problem, max_iter=60, tol=1e-9, lam_ramp=False, damping=0.7, warm=None):
    """Picard (Oseen) iteration for the truncated problem.

    Each step solves the coupled linear (psi, omega) system: the vorticity
    definition lap psi + omega = 0 on the whole grid (ghost rows impose the
    velocity boundary data u = A), and the linearized transport
    -nu lap omega + (u0 . grad) omega = rot f in the interior.  Returns a
    Solution with the convergence trace; raises NoConvergence with the
    Reynolds proxy when the residual will not come down.
    """
    mesh = problem.mesh
    ops = _MappedOps(mesh)
    n, m = ops.shape
    npl = n * m
    next_ = (n + 2) * (m + 2)
    psi_bc, u_bc = problem.boundary_stream()
    bnd = _boundary_rows((n, m))
    inner = _interior_rows((n, m))

    flat_ext = _ext_index((n, m))
    # ghost equations: central derivative across the boundary equals the
    # boundary data derivative of psi (velocity trace of A)
    g_rows = []
    g_cols = []
    g_vals = []
    g_rhs = []
    # wall ghosts (zeta = -1 / +1): d psi/d zeta = H * u_a
    dz = mesh.zeta[1] - mesh.zeta[0]
    for j_g, j_in, j_b, sgn in ((-1, 1, 0, -1.0), (m, m - 2, m - 1, 1.0)):
        for i in range(-1, n + 1):
            ic = min(max(i, 0), n - 1)
            row = len(g_rhs)
            g_rows += [row, row]
            g_cols += [flat_ext(i, j_g), flat_ext(i, j_in)]
            g_vals += [sgn / (2 * dz), -sgn / (2 * dz)]
            g_rhs.append(mesh.H[ic] * u_bc[ic, j_b, 0])
    # end ghosts (p ends): d psi/d p = -u_c + zeta H' u_a
    for i_g, i_in, i_b, sgn in ((-1, 1, 0, -1.0), (n, n - 2, n - 1, 1.0)):
        # ghost node continues the end spacing, so the central stencil spans 2h
        dp = 2.0 * abs(mesh.p[1] - mesh.p[0]) if i_b == 0 else 2.0 * abs(mesh.p[-1] - mesh.p[-2])
        for j in range(0, m):
            row = len(g_rhs)
            g_rows += [row, row]
            g_cols += [flat_ext(i_g, j), flat_ext(i_in, j)]
            g_vals += [sgn / dp, -sgn / dp]
            g_rhs.append(
                -u_bc[i_b, j, 1] + mesh.zeta[j] * mesh.dH[i_b] * u_bc[i_b, j, 0]
            )
    ghost = _ghost_rows((n, m))
    # any ghost node not covered above (the four corner ghosts on the p ends)
    covered = set()
    for j_g in (-1, m):
        for i in range(-1, n + 1):
            covered.add(flat_ext(i, j_g))
    for i_g in (-1, n):
        for j in range(0, m):
            covered.add(flat_ext(i_g, j))
    rest = [g for g in ghost if g not in covered]
    for g in rest:
        row = len(g_rhs)
        g_rows.append(row)
        g_cols.append(g)
        g_vals.append(1.0)
        g_rhs.append(0.0)
    G = sp.csr_matrix((g_vals, (g_rows, g_cols)), shape=(len(g_rhs), next_))
    g_rhs = np.array(g_rhs)

    I_plain = sp.identity(npl, format="csr")
    Sel_bnd = I_plain[bnd]
    Sel_int = I_plain[inner]
    lap_int = ops.lap[inner]

    pts_int = mesh.grid_points().reshape(npl, 2)[inner]
    rotf = _rot_f(problem, pts_int)

    psi = psi_bc.copy()
    psi[np.isnan(psi)] = 0.0
    if warm is not None:
        pw = warm.stream(mesh.grid_points().reshape(-1, 2)).reshape(n, m)
        keep = np.isfinite(pw)
        psi[keep] = pw[keep]
        psi[np.unravel_index(bnd, (n, m))] = psi_bc[np.unravel_index(bnd, (n, m))]
    omega = -(ops.lap @ _pad_ext(psi).ravel())

    lams = [0.25, 0.5, 0.75, 1.0] if lam_ramp else [1.0]
    trace = []
    prev_res = np.inf
    scale = max(1.0, float(np.nanmax(np.abs(psi_bc))))
    for lam in lams:
        for it in range(max_iter):
            ua, uc = ops.velocity_of_stream(_pad_ext(psi).ravel())
            adv = ops.advection(ua, uc)
            # residual of the nonlinear momentum (vorticity transport) eq.
            mom = -problem.nu * (ops.lap @ _pad_ext(omega.reshape(n, m)).ravel()) + lam * (
                adv @ _pad_ext(omega.reshape(n, m)).ravel()
            )
            res = float(np.max(np.abs(mom[inner] - lam * rotf))) / (problem.nu * max(1.0, scale))
            trace.append({"lam": lam, "iter": it, "residual": res})
            if res <= tol:
                break
            rows = [
                sp.hstack([ops.lap, I_plain]),  # vorticity definition, all nodes
                sp.hstack([G, sp.csr_matrix((G.shape[0], npl))]),  # ghost BCs
                sp.hstack([Sel_bnd @ ops.S, sp.csr_matrix((len(bnd), npl))]),  # psi Dirichlet
                sp.hstack(
                    [sp.csr_matrix((len(inner), next_)), -problem.nu * lap_int @ _om_ext(n, m) + lam * (adv[inner] @ _om_ext(n, m))]
                ),
            ]
            rhs = np.concatenate([
                np.zeros(npl),
                g_rhs,
                psi_bc.ravel()[bnd],
                lam * rotf,
            ])
            M = sp.vstack(rows, format="csc")
            sol = splu(M).solve(rhs)
            psi_new = sol[:next_].reshape(n + 2, m + 2)[1:-1, 1:-1]
            om_new = sol[next_:]
            if res > 0.9 * prev_res and it > 0:
                psi = damping * psi_new + (1.0 - damping) * psi
                omega = damping * om_new + (1.0 - damping) * omega
            else:
                psi = psi_new
                omega = om_new
            prev_res = res
        else:
            sup_a = float(np.max(np.hypot(ua, uc)))
            rey = sup_a * 2.0 * float(np.max(mesh.H)) / problem.nu
            raise NoConvergence(
                f"Picard stalled at residual {res:.3e} (tol {tol:.1e}); "
                f"Reynolds proxy {rey:.2f} — consider a larger viscosity",
                reynolds=rey,
                trace=trace,
            )
        prev_res = np.inf
    return Solution(problem, psi, omega.reshape(n, m), trace)


def _om_ext(n, m):
    """Embed plain-grid omega into the extended index space (zero ghosts)."""
    key = (n, m)
    cached = _om_ext._cache.get(key)
    if cached is not None:
        return cached
    flat = _ext_index((n, m))
    I, J = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
    rows = flat(I.ravel(), J.ravel())
    cols = (I * m + J).ravel()
    E = sp.csr_matrix((np.ones(n * m), (rows, cols)), shape=((n + 2) * (m + 2), n * m))
    # ghost omega values by linear continuation keep the interior transport
    # stencil second order at the first ring
    for (gi, ii, bi) in [(-1, 1, 0), (n, n - 2, n - 1)]:
        r = flat(np.full(m, gi), np.arange(m))
        E = E + sp.csr_matrix(
            (np.concatenate([2 * np.ones(m), -np.ones(m)]),
             (np.concatenate([r, r]), np.concatenate([bi * m + np.arange(m), ii * m + np.arange(m)]))),
            shape=E.shape,
        )
    for (gj, ji, bj) in [(-1, 1, 0), (m, m - 2, m - 1)]:
        r = flat(np.arange(-1, n + 1), np.full(n + 2, gj))
        ic = np.clip(np.arange(-1, n + 1), 0, n - 1)
        E = E + sp.csr_matrix(
            (np.concatenate([2 * np.ones(n + 2), -np.ones(n + 2)]),
             (np.concatenate([r, r]), np.concatenate([ic * m + bj, ic * m + ji]))),
            shape=E.shape,
        )
    _om_ext._cache[key] = E
    return E


_om_ext._cache = {}


# ---------------------------------------------------------------------------
# energy ledger and the exhaustion ladder


class EnergyLedger:
    """Dirichlet integrals of the solved fields against the reference curve.

    reference(k) = 1 + sum_j int_{R0}^{R_{j,k}} dx1 / g_j^3; the fitted
    constant is the max over recorded (k, l) of dirichlet / reference.
    """

    def __init__(self, domain, f_star=0.0):
        self.domain = domain
        self.f_star = float(f_star)
        self.entries = {}  # (k, l) -> dirichlet integral

    def reference(self, k):
        radii = self.domain.truncation_radii(max(k, 1))
        total = 1.0
        for i, o in enumerate(self.domain.outlets):
            r0, rk = radii[i, 0], radii[i, k]
            val, _ = quad(lambda t: 1.0 / float(o.width_fn(t)) ** 3, r0, rk, limit=200)
            total += val
        return total

    def record(self, k, l, dirichlet):
        self.entries[(k, l)] = float(dirichlet)

    def fitted_c(self):
        if not self.entries:
            return 0.0
        return max(d / (self.reference(k) * (1.0 + self.f_star**2)) for (k, _), d in self.entries.items())

    def monotone_in_k(self, tol=1e-12):
        ok = True
        for (k, l), d in self.entries.items():
            if (k + 1, l) in self.entries:
                ok &= self.entries[(k + 1, l)] >= d - tol
        return ok

    def report_lines(self):
        lines = ["k l dirichlet reference ratio"]
        for (k, l) in sorted(self.entries):
            d = self.entries[(k, l)]
            r = self.reference(k)
            lines.append(f"{k} {l} {d!r} {r!r} {d / r!r}")
        lines.append(f"fitted_c: {self.fitted_c()!r}")
        lines.append(f"f_star: {self.f_star!r}")
        return lines


def f_star_norm(f, domain, levels, n_probes=40, seed=2101):
    """sup_k (1 + sum int dx1/g^3)^{-1/2} ||f||_{H*(Omega_k)}.

    The dual norm on each truncation is estimated by maximizing
    int f . eta / ||eta||_D over the seeded probe family.
    """
    if f is None:
        return 0.0
    ledger = EnergyLedger(domain)
    best = 0.0
    for k in range(1, levels + 1):
        dual = 0.0
        for i in range(n_probes):
            w = random_test_field(domain, k, seed + 13 * i)
            pts, wts = w.quadrature()
            val = float(np.sum(np.sum(np.asarray(f(pts)) * w.velocity(pts), axis=1) * wts))
            dual = max(dual, abs(val) / np.sqrt(w.dirichlet()))
        best = max(best, dual / np.sqrt(ledger.reference(k)))
    return best


def exhaustion_ladder(domain, A, levels, nu=1.0, f=None, tol=1e-9, max_iter=60, mesh_kw=None):
    """Sequential solves on Omega_1 .. Omega_L with warm starts.

    Returns (solutions, ledger, stabilization) where stabilization[l] is
    the Dirichlet distance between consecutive solutions restricted to the
    fixed lowest truncation.
    """
    if levels > 6:
        raise SolverUnsupported("exhaustion ladder is desk-scale: levels <= 6")
    ledger = EnergyLedger(domain, f_star=f_star_norm(f, domain, levels))
    sols = []
    stab = {}
    prev = None
    for l in range(1, levels + 1):
        prob = TruncatedProblem(domain, l, nu, A, f=f, **(mesh_kw or {}))
        sol = solve_truncated(prob, max_iter=max_iter, tol=tol, warm=prev)
        for k in range(1, l + 1):
            ledger.record(k, l, sol.dirichlet(k))
        if prev is not None:
            stab[l] = _restricted_distance(prev, sol)
        sols.append(sol)
        prev = sol
    return sols, ledger, stab


def _restricted_distance(a, b):
    """Dirichlet-type distance of two solutions on the coarser mesh's level-1 part."""
    mesh = a.mesh
    mask = mesh.cell_mask(1)
    pm = 0.5 * (mesh.p[:-1] + mesh.p[1:])[mask]
    z = 0.5 * (mesh.zeta[:-1] + mesh.zeta[1:])
    P, Z = np.meshgrid(pm, z, indexing="ij")
    pts = mesh.points(P.ravel(), Z.ravel())
    h = 1e-5
    acc = 0.0
    area = np.repeat(np.diff(mesh.p)[mask], len(z)) * np.repeat(
        mesh._H(pm), len(z)
    ) * (mesh.zeta[1] - mesh.zeta[0])
    for dx in (np.array([h, 0.0]), np.array([0.0, h])):
        da = (a.velocity(pts + dx) - a.velocity(pts - dx)) / (2 * h)
        db = (b.velocity(pts + dx) - b.velocity(pts - dx)) / (2 * h)
        acc += np.sum(np.sum((da - db) ** 2, axis=1) * area)
    return float(np.sqrt(acc))


# ---------------------------------------------------------------------------
# reference profiles


def poiseuille(width_fn, F):
    """Exact parabolic outlet profile with flux F: u1 = 3F(1 - zeta^2)/(4g)."""

    def profile(p, zeta):
        g = np.asarray(width_fn(np.abs(p)), dtype=float)
        return 0.75 * F * (1.0 - np.asarray(zeta) ** 2) / g

    return profile


def poiseuille_error(solution, F, p_lo=None, p_hi=None):
    """Relative L2 distance to the through-flow Poiseuille profile.

    The comparison profile is u_a = 3F(1 - zeta^2)/(4H(p)), u_c = 0, the
    exact solution on a constant-width span; p_lo/p_hi restrict the span
    by |p| (both sides when they select anything there).
    """
    mesh = solution.mesh
    sel = np.ones(len(mesh.p), dtype=bool)
    if p_lo is not None:
        sel &= np.abs(mesh.p) >= p_lo
    if p_hi is not None:
        sel &= np.abs(mesh.p) <= p_hi
    u = solution.u_frame[sel]
    H = mesh.H[sel][:, None]
    exact = 0.75 * F * (1.0 - mesh.zeta[None, :] ** 2) / H
    wz = _trapz_weights(mesh.zeta)[None, :]
    num = np.sum(((u[:, :, 0] - exact) ** 2 + u[:, :, 1] ** 2) * wz * H)
    den = np.sum(exact**2 * wz * H)
    return float(np.sqrt(num / den))
