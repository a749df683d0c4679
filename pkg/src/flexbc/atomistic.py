"""Atomistic models: Morse pair potential on the hexagonal lattice and the
two-neighbor harmonic chain.

Site energies follow the convention that every site sums the full pair
energy over its whole neighborhood, so the total energy counts each bond
twice and the homogeneous force constants are K(rho) = -2*(pair Hessian)
off the diagonal. The atomistic subproblem minimizes the energy of the
region a-union-pad with pad displacements frozen; its gradient on the
a-sites then equals the variation of the full lattice energy there, and
its Hessian restriction reproduces the textbook stencil (diagonal 2k for
the chain).

Force evaluations are counted on the model instance (``n_force_evals``);
the experiment harness reports that counter directly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .lattice import shell_offsets

# six neighbor shells of the hexagonal lattice: squared lattice norm <= 12
MORSE_SHELL_NORM2 = 12
MORSE_DEFAULTS = dict(D=1.0, a=4.4, r0=1.0)


class SingularConfigurationError(RuntimeError):
    """Two interacting atoms collided (deformed distance ~ 0)."""


@dataclass
class DisplacementField:
    """Per-site displacement vectors over a decomposition's site table."""

    decomp: object
    values: np.ndarray

    @classmethod
    def zeros(cls, decomp):
        return cls(decomp, np.zeros((decomp.n_sites, decomp.dim)))

    def copy(self):
        return DisplacementField(self.decomp, self.values.copy())

    def restrict(self, ids):
        return self.values[ids]

    def scatter(self, ids, vals):
        self.values[ids] = vals
        return self


@dataclass
class MorseModel:
    """Morse pair potential with a fixed reference-lattice neighborhood."""

    D: float = MORSE_DEFAULTS["D"]
    a: float = MORSE_DEFAULTS["a"]
    r0: float = MORSE_DEFAULTS["r0"]
    shell_norm2: int = MORSE_SHELL_NORM2
    n_force_evals: int = field(default=0, compare=False)

    kind = "morse2d"
    dim = 2

    def __post_init__(self):
        if self.D <= 0 or self.a <= 0 or self.r0 <= 0:
            raise ValueError("Morse parameters must be positive")

    def offsets(self):
        return shell_offsets(2, self.shell_norm2)

    def pair_energy(self, r):
        e = np.exp(-self.a * (r - self.r0))
        return self.D * e * e - 2.0 * self.D * e

    def pair_denergy(self, r):
        e = np.exp(-self.a * (r - self.r0))
        return -2.0 * self.a * self.D * e * e + 2.0 * self.a * self.D * e

    def pair_ddenergy(self, r):
        e = np.exp(-self.a * (r - self.r0))
        return 4.0 * self.a**2 * self.D * e * e - 2.0 * self.a**2 * self.D * e

    def equilibrium_ell(self):
        """Lattice constant at which the ground-state forces vanish."""
        from scipy.optimize import brentq
        shells = {}
        for off in self.offsets():
            n2 = off[0] ** 2 + off[0] * off[1] + off[1] ** 2
            shells[n2] = shells.get(n2, 0) + 1
        def dE(ell):
            return sum(cnt * self.pair_denergy(np.sqrt(n2) * ell) * np.sqrt(n2)
                       for n2, cnt in shells.items())
        return brentq(dE, 0.8 * self.r0, 1.2 * self.r0)


@dataclass
class ChainModel:
    """1D chain with first/second neighbor springs k1, k2."""

    k1: float = 1.0
    k2: float = -0.1
    n_force_evals: int = field(default=0, compare=False)

    kind = "chain1d"
    dim = 1

    def offsets(self):
        return [(-2,), (-1,), (1,), (2,)]

    def spring(self, m):
        return self.k1 if abs(m) == 1 else self.k2

    def force_constant(self, m):
        """Homogeneous force-constant stencil of the linearized chain."""
        if m == 0:
            return 2.0 * (self.k1 + self.k2)
        if abs(m) == 1:
            return -self.k1
        if abs(m) == 2:
            return -self.k2
        return 0.0


def _bond_geometry(model, decomp, u, site_ids):
    """Deformed bond vectors for every (site, neighbor-offset) pair.

    Returns (nbr ids, validity mask, bond vectors, bond lengths); invalid
    entries (missing neighbor or inactive endpoint) are masked out.
    """
    offs = np.asarray(model.offsets(), dtype=np.int64)
    table = decomp.neighbor_table(offs)[site_ids]
    valid = table >= 0
    nbr = np.where(valid, table, 0)
    valid &= decomp.active[nbr]
    ref = -decomp.basis.positions(offs)  # position of (site - offset) minus site
    d = u[nbr] - u[site_ids][:, None, :] + ref[None, :, :]
    r = np.linalg.norm(d, axis=2)
    if np.any(valid & (r < 1e-10)):
        raise SingularConfigurationError("singular configuration: atoms collided")
    return nbr, valid, d, r


def site_energy(model, decomp, u, xi):
    """Energy of one site (full pair energy summed over its neighborhood)."""
    if not decomp.active[xi]:
        raise ValueError("site is inactive")
    u = np.asarray(u, dtype=float)
    ids = np.array([xi], dtype=np.int64)
    if model.kind == "chain1d":
        _, valid, d, _ = _bond_geometry_chain(model, decomp, u, ids)
        offs = np.asarray(model.offsets())
        k = np.array([model.spring(o[0]) for o in offs])
        return float(np.sum(np.where(valid, 0.25 * k[None, :] * d[:, :, 0] ** 2, 0.0)))
    _, valid, _, r = _bond_geometry(model, decomp, u, ids)
    return float(np.sum(np.where(valid, model.pair_energy(np.where(valid, r, 1.0)), 0.0)))


def _bond_geometry_chain(model, decomp, u, site_ids):
    offs = np.asarray(model.offsets(), dtype=np.int64)
    table = decomp.neighbor_table(offs)[site_ids]
    valid = table >= 0
    nbr = np.where(valid, table, 0)
    valid &= decomp.active[nbr]
    d = u[nbr] - u[site_ids][:, None, :]  # relative displacement, harmonic chain
    return nbr, valid, d, None


def region_energy(model, decomp, u, region_ids, f_ext=None):
    """Sum of site energies over a region minus external work there."""
    u = np.asarray(u, dtype=float)
    ids = decomp.active_ids(region_ids)
    if model.kind == "chain1d":
        _, valid, d, _ = _bond_geometry_chain(model, decomp, u, ids)
        offs = np.asarray(model.offsets())
        k = np.array([model.spring(o[0]) for o in offs])
        e = float(np.sum(np.where(valid, 0.25 * k[None, :] * d[:, :, 0] ** 2, 0.0)))
    else:
        _, valid, _, r = _bond_geometry(model, decomp, u, ids)
        e = float(np.sum(np.where(valid, model.pair_energy(np.where(valid, r, 1.0)), 0.0)))
    if f_ext is not None:
        e -= float(np.sum(f_ext[ids] * u[ids]))
    return e


def energy_variation(model, decomp, u, out_ids):
    """delta E_tot at the requested sites (gradient of the full site-energy
    sum with respect to u there)."""
    u = np.asarray(u, dtype=float)
    out_ids = np.asarray(out_ids)
    grad = np.zeros((len(out_ids), decomp.dim))
    act = decomp.active[out_ids]
    ids = out_ids[act]
    if len(ids) == 0:
        return grad
    if model.kind == "chain1d":
        _, valid, d, _ = _bond_geometry_chain(model, decomp, u, ids)
        offs = np.asarray(model.offsets())
        k = np.array([model.spring(o[0]) for o in offs])
        # dE/du(xi): each bond appears in E_xi and in E_eta, total weight k
        g = -np.sum(np.where(valid[:, :, None], k[None, :, None] * d, 0.0), axis=1)
    else:
        _, valid, d, r = _bond_geometry(model, decomp, u, ids)
        rs = np.where(valid, r, 1.0)
        w = np.where(valid, model.pair_denergy(rs) / rs, 0.0)
        g = -2.0 * np.einsum("sj,sjd->sd", w, d)
    grad[act] = g
    return grad


def forces(model, decomp, u, f_ext=None):
    """Physical forces f_ext - delta E_tot on the active atomistic sites.

    Every call bumps ``model.n_force_evals``; this is the cost currency all
    experiments report.
    """
    model.n_force_evals += 1
    ids = decomp.a
    f = -energy_variation(model, decomp, u, ids)
    if f_ext is not None:
        f = f + f_ext[ids]
    f[~decomp.active[ids]] = 0.0
    return f


def hessian_pair_blocks(model, decomp, u, row_ids, col_ids):
    """Dense Hessian block d^2 E_tot / du(row) du(col) at state u.

    Rows and columns are site id arrays; the result has shape
    (len(rows)*d, len(cols)*d). Inactive sites contribute zero rows/cols.
    """
    u = np.asarray(u, dtype=float)
    d = decomp.dim
    row_ids = np.asarray(row_ids)
    col_ids = np.asarray(col_ids)
    col_pos = {int(s): j for j, s in enumerate(col_ids)}
    H = np.zeros((len(row_ids) * d, len(col_ids) * d))
    row_act = decomp.active[row_ids]

    if model.kind == "chain1d":
        offs = np.asarray(model.offsets(), dtype=np.int64)
        table = decomp.neighbor_table(offs)
        for ri, s in enumerate(row_ids):
            if not row_act[ri]:
                continue
            diag = 0.0
            for j, off in enumerate(offs):
                nb = table[s, j]
                if nb < 0 or not decomp.active[nb]:
                    continue
                k = model.spring(off[0])
                diag += k
                cj = col_pos.get(int(nb))
                if cj is not None:
                    H[ri, cj] += -k
            cj = col_pos.get(int(s))
            if cj is not None:
                H[ri, cj] += diag
        return H

    nbr, valid, dvec, r = _bond_geometry(model, decomp, u, row_ids)
    rs = np.where(valid, r, 1.0)
    phi1 = model.pair_denergy(rs)
    phi2 = model.pair_ddenergy(rs)
    nvec = dvec / rs[:, :, None]
    eye = np.eye(d)
    for ri in range(len(row_ids)):
        if not row_act[ri]:
            continue
        diag = np.zeros((d, d))
        for j in range(nbr.shape[1]):
            if not valid[ri, j]:
                continue
            n = nvec[ri, j]
            # single-bond Hessian; factor 2 because each bond energy is
            # counted in both endpoint site energies
            Hb = 2.0 * (phi2[ri, j] * np.outer(n, n)
                        + phi1[ri, j] / rs[ri, j] * (eye - np.outer(n, n)))
            diag += Hb
            cj = col_pos.get(int(nbr[ri, j]))
            if cj is not None:
                H[ri * d:(ri + 1) * d, cj * d:(cj + 1) * d] += -Hb
        cj = col_pos.get(int(row_ids[ri]))
        if cj is not None:
            H[ri * d:(ri + 1) * d, cj * d:(cj + 1) * d] += diag
    return H


@dataclass
class LinearizedBlocks:
    """Dense linearized operator blocks at a given state."""

    decomp: object
    u_ref: np.ndarray
    L_aa: np.ndarray
    L_ap: np.ndarray
    a_ids: np.ndarray
    p_ids: np.ndarray
    positive_definite: bool

    def solve_aa(self, rhs):
        return np.linalg.solve(self.L_aa, rhs)


def hessian_blocks(model, decomp, u_ref):
    """Linearized atomistic blocks L^{a|a}, L^{a|p} at state u_ref.

    Rows/columns of inactive (vacancy) sites are zero; the a|a block is
    reported indefinite rather than raising, since the stability scans
    need to see that case.
    """
    u_ref = np.asarray(u_ref, dtype=float)
    Laa = hessian_pair_blocks(model, decomp, u_ref, decomp.a, decomp.a)
    Lap = hessian_pair_blocks(model, decomp, u_ref, decomp.a, decomp.p)
    act = np.repeat(decomp.active[decomp.a], decomp.dim)
    # keep the full a-indexing; pin vacancy rows so the block stays invertible
    Laa[~act, :] = 0.0
    Laa[:, ~act] = 0.0
    Laa[np.ix_(~act, ~act)] = np.eye((~act).sum())
    Lap[~act, :] = 0.0
    try:
        np.linalg.cholesky(Laa)
        pd = True
    except np.linalg.LinAlgError:
        pd = False
    return LinearizedBlocks(decomp, u_ref, Laa, Lap, decomp.a, decomp.p, pd)


class MinimizationError(RuntimeError):
    def __init__(self, msg, u_best=None):
        super().__init__(msg)
        self.u_best = u_best


def minimize_atomistic(model, decomp, u, f_ext=None, tol_a=1e-9,
                       method="tn", max_iter=2000, hess=None):
    """Relax the active a-sites with the pad held fixed.

    method="tn" is a Hessian-free truncated Newton scheme: the inner
    conjugate-gradient loop uses Hessian-vector products from forward
    differences of the forces, so every inner step costs one force
    evaluation (the accounting the reference results use). method="newton"
    solves with the assembled Hessian blocks instead. Convergence is
    measured on the 2-norm of the residual force vector (the molecular
    statics convention the reference tolerances assume).

    Returns the relaxed field (u is updated in place) and raises
    MinimizationError with the best iterate attached on non-convergence.
    """
    a_act = decomp.active_ids(decomp.a)
    dofs = a_act

    def residual(uv):
        g = -energy_variation(model, decomp, uv, dofs)
        model.n_force_evals += 1
        if f_ext is not None:
            g = g + f_ext[dofs]
        return g

    def energy(uv):
        reg = np.concatenate([decomp.a, decomp.p])
        return region_energy(model, decomp, uv, reg, f_ext=f_ext)

    f = residual(u)
    fnorm = np.linalg.norm(f) if f.size else 0.0
    e = energy(u)
    it = 0
    while fnorm > tol_a:
        if it >= max_iter:
            raise MinimizationError(
                f"inner relaxation stalled at |f|={fnorm:.3e}", u_best=u)
        if method == "newton":
            hb = hess if hess is not None else hessian_blocks(model, decomp, u)
            rhs = np.zeros((len(decomp.a), decomp.dim))
            rhs[np.isin(decomp.a, dofs)] = f
            step_full = hb.solve_aa(rhs.reshape(-1)).reshape(rhs.shape)
            step = step_full[np.isin(decomp.a, dofs)]
        else:
            step = _tn_step(model, decomp, u, dofs, f, f_ext)
        # backtracking on the coupled-region energy
        alpha = 1.0
        gdots = float(np.sum(f * step))
        if gdots <= 0:  # not a descent direction for -grad; fall back
            step = f
            gdots = float(np.sum(f * f))
        accepted = False
        for _ in range(40):
            trial = u.copy()
            trial[dofs] += alpha * step
            try:
                et = energy(trial)
            except SingularConfigurationError:
                alpha *= 0.5
                continue
            if et <= e - 1e-4 * alpha * gdots + 1e-14 * max(1.0, abs(e)):
                u[:] = trial
                e = et
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            raise MinimizationError("line search failed", u_best=u)
        f = residual(u)
        fnorm = np.linalg.norm(f)
        it += 1
    return u


def _tn_step(model, decomp, u, dofs, f, f_ext, cg_tol=0.25, cg_max=40):
    """Truncated-Newton step: CG on H s = f with finite-difference H*v."""

    def hv(v):
        vn = float(np.abs(v).max())
        if vn == 0:
            return np.zeros_like(v)
        h = 1e-6 / vn
        up = u.copy()
        up[dofs] += h * v
        gp = -energy_variation(model, decomp, up, dofs)
        model.n_force_evals += 1
        if f_ext is not None:
            gp = gp + f_ext[dofs]
        return (f - gp) / h  # (grad(u+hv) - grad(u))/h with grad = -force

    s = np.zeros_like(f)
    r = f.copy()
    p = r.copy()
    rr = float(np.sum(r * r))
    stop = cg_tol**2 * rr
    for _ in range(cg_max):
        Ap = hv(p)
        pAp = float(np.sum(p * Ap))
        if pAp <= 1e-14 * float(np.sum(p * p)):
            if not np.any(s):
                s = f.copy()  # negative curvature at start: gradient step
            break
        a = rr / pAp
        s += a * p
        r -= a * Ap
        rr_new = float(np.sum(r * r))
        if rr_new <= stop:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return s


def fd_gradient(model, decomp, u, region_ids, out_ids, h):
    """Central finite differences of the region energy (testing oracle)."""
    g = np.zeros((len(out_ids), decomp.dim))
    for j, s in enumerate(out_ids):
        for d in range(decomp.dim):
            up = u.copy(); up[s, d] += h
            um = u.copy(); um[s, d] -= h
            g[j, d] = (region_energy(model, decomp, up, region_ids)
                       - region_energy(model, decomp, um, region_ids)) / (2 * h)
    return g
