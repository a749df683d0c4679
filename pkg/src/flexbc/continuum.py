"""Local harmonic (continuum) operator built by Cauchy-Born localization.

For the hexagonal lattice the construction is the standard one: compute the
material stiffness tensor from the pair potential at the ground state, then
assemble the P1 finite-element stiffness on the canonical up/down triangle
split of the lattice. Because linear hat functions only overlap between
nearest neighbors, the resulting force-constant stencil K_h spans one
neighbor shell regardless of the range of the atomistic model. For the
chain the localized stiffness is the scalar kbar = k1 + 4*k2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import nn_offsets


@dataclass
class HarmonicStencil:
    """Nearest-neighbor force-constant kernel of the local harmonic operator."""

    dim: int
    kernel: dict          # offset tuple (incl. zero) -> (d, d) array
    kbar: float | None    # chain stiffness, 1D only
    stiffness: np.ndarray | None  # material stiffness tensor, reporting only
    basis_vectors: np.ndarray | None = None  # for real-space symbol evaluation

    def offsets(self):
        return [o for o in self.kernel if any(v != 0 for v in o)]

    def all_offsets(self):
        return list(self.kernel.keys())

    def matrix(self, offset):
        z = self.kernel.get(tuple(offset))
        if z is None:
            return np.zeros((self.dim, self.dim))
        return z

    def fingerprint(self):
        items = sorted(self.kernel.items())
        buf = b"".join(bytes(str(k), "ascii") + np.asarray(v).tobytes()
                       for k, v in items)
        import hashlib
        return hashlib.sha256(buf).hexdigest()[:16]

    def symbol(self, q):
        """Dynamical matrix D(q) = sum_rho K(rho) exp(-i q.rho).

        K(rho) = K(-rho), so the sine parts cancel pairwise and D is real
        symmetric, positive definite away from q = 0.
        """
        D = np.zeros((self.dim, self.dim))
        for off, K in self.kernel.items():
            D = D + K * np.cos(np.dot(q, self._rho(off)))
        return D

    def _rho(self, off):
        if self.basis_vectors is None:
            return np.asarray(off, dtype=float)
        return np.asarray(off, dtype=float) @ self.basis_vectors


def stiffness_tensor(model, basis):
    """Cauchy-Born stiffness C_{aibj} = d^2 W / dF_ai dF_bj per unit cell area."""
    d = basis.dim
    omega0 = abs(np.linalg.det(basis.vectors))
    C = np.zeros((d, d, d, d))
    for off in model.offsets():
        rho = basis.positions(np.asarray(off, dtype=float)[None, :])[0]
        r = np.linalg.norm(rho)
        n = rho / r
        p1 = model.pair_denergy(r)
        p2 = model.pair_ddenergy(r)
        for a in range(d):
            for i in range(d):
                for b in range(d):
                    for j in range(d):
                        C[a, i, b, j] += (p2 * n[a] * n[b] * rho[i] * rho[j]
                                          + p1 / r * ((a == b) - n[a] * n[b])
                                          * rho[i] * rho[j])
    return C / omega0


def _p1_element_stiffness(verts, C):
    """P1 stiffness of one triangle for the elasticity tensor C."""
    p0, p1, p2 = verts
    J = np.column_stack([p1 - p0, p2 - p0])
    area = 0.5 * abs(np.linalg.det(J))
    Jinv = np.linalg.inv(J)
    # gradients of the barycentric hats
    gref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    grads = gref @ Jinv
    K = np.zeros((3, 2, 3, 2))
    for a in range(3):
        for b in range(3):
            for i in range(2):
                for j in range(2):
                    K[a, i, b, j] = area * np.einsum(
                        "kl,k,l->", C[i, :, j, :], grads[a], grads[b])
    return K


def build_harmonic_stencil(model, basis):
    """Localize the atomistic model to the nearest-neighbor harmonic kernel."""
    if model.kind == "chain1d":
        kbar = model.k1 + 4.0 * model.k2
        if kbar <= 0:
            raise ValueError("unstable continuum: k1 + 4*k2 <= 0")
        kernel = {(0,): np.array([[2.0 * kbar]]),
                  (1,): np.array([[-kbar]]),
                  (-1,): np.array([[-kbar]])}
        return HarmonicStencil(1, kernel, kbar, np.array([[[[kbar]]]]),
                               basis.vectors)

    C = stiffness_tensor(model, basis)
    # two triangles per cell: (0, v1, v2) "up" and (v1, v1+v2, v2) "down";
    # assemble all element contributions touching the origin node
    v1, v2 = basis.vectors
    zero = np.zeros(2)
    kernel = {}

    def add(offset, block):
        key = tuple(int(v) for v in offset)
        kernel[key] = kernel.get(key, np.zeros((2, 2))) + block

    # lattice translates of the two reference triangles that contain node 0
    tris = []
    for sm in range(-1, 1):
        for sn in range(-1, 1):
            base = sm * np.array([1, 0]) + sn * np.array([0, 1])
            up = [base, base + np.array([1, 0]), base + np.array([0, 1])]
            dn = [base + np.array([1, 0]), base + np.array([1, 1]),
                  base + np.array([0, 1])]
            for tri in (up, dn):
                if any((c == 0).all() for c in tri):
                    tris.append(tri)
    for tri in tris:
        verts = [c[0] * v1 + c[1] * v2 for c in tri]
        Ke = _p1_element_stiffness(verts, C)
        loc = [i for i, c in enumerate(tri) if (c == 0).all()][0]
        for b in range(3):
            add(tri[b] - tri[loc], Ke[loc, :, b, :])

    rowsum = sum(kernel.values())
    if np.abs(rowsum).max() > 1e-10 * max(np.abs(K).max() for K in kernel.values()):
        raise RuntimeError("harmonic kernel row sums do not vanish")
    # acoustic stability: D(q) positive definite away from q = 0
    st = HarmonicStencil(2, kernel, None, C, basis.vectors)
    rng = np.random.default_rng(12345)
    b1, b2 = 2 * np.pi * np.linalg.inv(basis.vectors).T
    for _ in range(64):
        s = rng.uniform(0.05, 0.95, 2)
        D = st.symbol(s[0] * b1 + s[1] * b2)
        if np.linalg.eigvalsh(D).min() <= 0:
            raise RuntimeError("unstable continuum: acoustic tensor not positive")
    return st


def apply_block(stencil, decomp, x_ids, y_ids, v):
    """L_h^{x|y}[v]: the harmonic operator restricted to rows x, columns y.

    v holds values for y_ids (len(y), d); returns forces on x_ids.
    """
    x_ids = np.asarray(x_ids)
    y_ids = np.asarray(y_ids)
    v = np.asarray(v, dtype=float).reshape(len(y_ids), decomp.dim)
    y_pos = np.full(decomp.n_sites, -1, dtype=np.int64)
    y_pos[y_ids] = np.arange(len(y_ids))
    offs = stencil.all_offsets()
    table = decomp.neighbor_table(offs)[x_ids]
    out = np.zeros((len(x_ids), decomp.dim))
    for j, off in enumerate(offs):
        col = table[:, j]
        ok = col >= 0
        yj = np.where(ok, y_pos[np.where(ok, col, 0)], -1)
        ok &= yj >= 0
        if not ok.any():
            continue
        K = stencil.matrix(off)
        out[ok] += v[yj[ok]] @ K.T
    return out


def block_matrix(stencil, decomp, row_ids, col_ids):
    """Dense matrix of L_h^{rows|cols} (d*len(rows) x d*len(cols))."""
    row_ids = np.asarray(row_ids)
    col_ids = np.asarray(col_ids)
    d = decomp.dim
    col_pos = np.full(decomp.n_sites, -1, dtype=np.int64)
    col_pos[col_ids] = np.arange(len(col_ids))
    offs = stencil.all_offsets()
    table = decomp.neighbor_table(offs)[row_ids]
    M = np.zeros((len(row_ids) * d, len(col_ids) * d))
    for j, off in enumerate(offs):
        K = stencil.matrix(off)
        col = table[:, j]
        for ri in range(len(row_ids)):
            cid = col[ri]
            if cid < 0:
                continue
            cj = col_pos[cid]
            if cj < 0:
                continue
            M[ri * d:(ri + 1) * d, cj * d:(cj + 1) * d] += K
    return M
