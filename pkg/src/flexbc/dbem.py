"""Discrete boundary element solver for the global harmonic problem.

The finite Dirichlet problem L_h[u] = r in Lambda, u = ubar on the outer
ring, is solved as the superposition of the infinite-lattice response
u_inf = G[r] and a homogeneous correction expressed through boundary
forces: f_o solves G^{o|o} f_o = -(I - F^{o|o})[ubar - u_inf], after which

    u_hom = F^{|o}[ubar - u_inf] - G^{|o}[f_o].

The boundary system depends only on geometry and stencil, so its
factorization is computed once and shared by every solve. In infinite mode
the homogeneous correction is switched off entirely and the solver reduces
to a single Green-operator application.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .continuum import apply_block
from .green import green_apply


class DbemWorkspace:
    """Factorized boundary system plus cached Green blocks for one geometry."""

    def __init__(self, table, stencil, decomp, infinite=False):
        self.table = table
        self.stencil = stencil
        self.decomp = decomp
        self.infinite = infinite or decomp.infinite
        self._blocks = {}
        if not self.infinite:
            o = decomp.o
            d = decomp.dim
            G_oo = table.block(decomp, o, o)
            F_oo = self._force_block(o)
            self.G_oo = G_oo
            self.F_oo = F_oo
            self.n_o = len(o) * d
            try:
                self.lu = lu_factor(G_oo)
            except ValueError as exc:
                raise RuntimeError("singular boundary system") from exc
            if not np.all(np.isfinite(self.lu[0])):
                raise RuntimeError("singular boundary system")

    def green_block(self, x_ids, y_ids):
        key = (x_ids.tobytes(), y_ids.tobytes())
        B = self._blocks.get(key)
        if B is None:
            B = self.table.block(self.decomp, x_ids, y_ids)
            self._blocks[key] = B
        return B

    def _force_block(self, x_ids):
        """Dense F^{x|o} = G^{x|o+} L_h^{o+|o}."""
        from .continuum import block_matrix
        L = block_matrix(self.stencil, self.decomp, self.decomp.op, self.decomp.o)
        return self.green_block(np.asarray(x_ids), self.decomp.op) @ L

    def force_block(self, x_ids):
        key = ("F", np.asarray(x_ids).tobytes())
        B = self._blocks.get(key)
        if B is None:
            B = self._force_block(np.asarray(x_ids))
            self._blocks[key] = B
        return B


def solve_boundary_forces(ws, g_o):
    """Boundary forces f_o = -(G^{o|o})^{-1} (I - F^{o|o}) g_o."""
    if ws.infinite:
        raise RuntimeError("boundary system disabled for infinite problems")
    g = np.asarray(g_o, dtype=float).reshape(ws.n_o)
    w = g - ws.F_oo @ g
    f = -lu_solve(ws.lu, w)
    resid = np.linalg.norm(ws.G_oo @ f + w)
    if resid > 1e-10 * max(1.0, np.linalg.norm(w)):
        raise RuntimeError(f"boundary solve residual too large: {resid:.3e}")
    return f.reshape(len(ws.decomp.o), ws.decomp.dim)


def dbem_solve(ws, ubar_o, r_ids, r_vals, out_ids):
    """Solve the finite harmonic problem; returns u on out_ids.

    ubar_o: Dirichlet data on the o-ring (len(o), d) or None for zero.
    r_ids/r_vals: compact force support and values (r_ids may be empty).
    """
    decomp = ws.decomp
    d = decomp.dim
    out_ids = np.asarray(out_ids)
    r_ids = np.asarray(r_ids, dtype=np.int64)
    u = np.zeros((len(out_ids), d))
    if len(r_ids):
        u += (ws.green_block(out_ids, r_ids)
              @ np.asarray(r_vals, dtype=float).reshape(-1)).reshape(-1, d)
    if ws.infinite:
        return u
    g = np.zeros((len(decomp.o), d)) if ubar_o is None else \
        np.asarray(ubar_o, dtype=float).reshape(len(decomp.o), d).copy()
    if len(r_ids):
        g -= (ws.green_block(decomp.o, r_ids)
              @ np.asarray(r_vals, dtype=float).reshape(-1)).reshape(-1, d)
    f_o = solve_boundary_forces(ws, g)
    u += (ws.force_block(out_ids) @ g.reshape(-1)).reshape(-1, d)
    u -= (ws.green_block(out_ids, decomp.o) @ f_o.reshape(-1)).reshape(-1, d)
    return u


def dense_dirichlet_solve(stencil, decomp, ubar_o, r_ids, r_vals, out_ids):
    """Direct sparse-free reference solve of the same Dirichlet problem."""
    from .continuum import block_matrix
    d = decomp.dim
    L = block_matrix(stencil, decomp, decomp.l, decomp.l)
    rhs = np.zeros((len(decomp.l), d))
    pos = np.full(decomp.n_sites, -1, dtype=np.int64)
    pos[decomp.l] = np.arange(len(decomp.l))
    r_ids = np.asarray(r_ids, dtype=np.int64)
    for s, val in zip(r_ids, np.asarray(r_vals, dtype=float).reshape(len(r_ids), d)):
        rhs[pos[s]] += val
    if ubar_o is not None:
        Lo = block_matrix(stencil, decomp, decomp.l, decomp.o)
        rhs -= (Lo @ np.asarray(ubar_o, dtype=float).reshape(-1)).reshape(-1, d)
    sol = np.linalg.solve(L, rhs.reshape(-1)).reshape(-1, d)
    u = np.zeros((decomp.n_sites, d))
    u[decomp.l] = sol
    if ubar_o is not None:
        u[decomp.o] = np.asarray(ubar_o, dtype=float).reshape(len(decomp.o), d)
    return u[out_ids]
